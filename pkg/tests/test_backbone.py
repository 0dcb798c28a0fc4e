import numpy as np
import pytest

from cadtrans import tensor as T
from cadtrans.adm import AdmConfig
from cadtrans.backbone import (BackboneConfig, ConfigError, count_params_closed_form, ema_aggregate, mhsa_layer,
                               param_shapes)
from cadtrans.model import backbone_param_count, build_model, forward, matched_adm_config
from cadtrans.params import ModelState
from cadtrans.tensor import Tensor


def block_model(D, H, rng=None, identity=False):
    """Parameters of a single transformer block under prefix ``b.``."""
    m = ModelState()
    rng = rng or np.random.default_rng(0)
    for name in ("q", "k", "v", "proj"):
        m.add(f"b.{name}.w", np.eye(D) if identity else rng.standard_normal((D, D)))
        m.add(f"b.{name}.b", np.zeros(D) if identity else rng.standard_normal(D))
    for ln in ("ln1", "ln2"):
        m.add(f"b.{ln}.g", np.ones(D))
        m.add(f"b.{ln}.b", np.zeros(D))
    m.add("b.fc1.w", rng.standard_normal((D, H)))
    m.add("b.fc1.b", np.zeros(H))
    m.add("b.fc2.w", rng.standard_normal((H, D)))
    m.add("b.fc2.b", np.zeros(D))
    return m


def _ln(x):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-5)


def test_single_token_attention_returns_values():
    m = block_model(4, 8, identity=True)
    x = np.random.default_rng(1).standard_normal((1, 1, 4))
    _, attn_feat, w = mhsa_layer(Tensor(x), m, "b.", heads=2)
    np.testing.assert_array_equal(w.data, np.ones((1, 2, 1, 1)))
    # identity projections: V is the normalized token, and SA output equals V
    np.testing.assert_allclose(attn_feat.data, _ln(x), atol=1e-12)


def test_two_token_one_head_oracle():
    rng = np.random.default_rng(3)
    m = block_model(2, 4, rng)
    x = rng.standard_normal((1, 2, 2))
    out, attn_feat, _ = mhsa_layer(Tensor(x), m, "b.", heads=1)
    p = {k: v.data for k, v in m.params.items()}
    h = _ln(x[0])
    q, k, v = (h @ p[f"b.{n}.w"] + p[f"b.{n}.b"] for n in "qkv")
    s = q @ k.T / np.sqrt(2.0)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    sa = (a @ v) @ p["b.proj.w"] + p["b.proj.b"]
    t = x[0] + sa
    mlp = np.maximum(_ln(t) @ p["b.fc1.w"] + p["b.fc1.b"], 0) @ p["b.fc2.w"] + p["b.fc2.b"]
    np.testing.assert_allclose(attn_feat.data[0], sa, atol=1e-8)
    np.testing.assert_allclose(out.data[0], t + mlp, atol=1e-8)


def test_ema_hand_unrolled():
    feats = [Tensor(np.array([v])) for v in (1.0, 2.0, 3.0)]
    assert ema_aggregate(feats, 1, 0.99).data[0] == pytest.approx(2.9899, abs=1e-12)


def test_ema_lambda_one_is_last_layer():
    rng = np.random.default_rng(0)
    feats = [Tensor(rng.standard_normal((3, 2))) for _ in range(4)]
    np.testing.assert_array_equal(ema_aggregate(feats, 2, 1.0).data, feats[-1].data)


def test_ema_fixed_point():
    X = np.random.default_rng(0).standard_normal((5, 3))
    for lam in (0.0, 0.3, 0.99):
        out = ema_aggregate([Tensor(X) for _ in range(4)], 1, lam).data
        np.testing.assert_allclose(out, X, atol=1e-12)


def test_ema_is_order_sensitive():
    rng = np.random.default_rng(0)
    feats = [Tensor(rng.standard_normal((3, 2))) for _ in range(4)]
    fwd = ema_aggregate(feats, 1, 0.7).data
    rev = ema_aggregate(feats[::-1], 1, 0.7).data
    assert not np.allclose(fwd, rev)


def test_ema_swap_weights_accumulator():
    feats = [Tensor(np.array([v])) for v in (1.0, 2.0)]
    assert ema_aggregate(feats, 1, 0.9, swap=True).data[0] == pytest.approx(0.1 * 2 + 0.9 * 1)


def test_ema_empty_window():
    with pytest.raises(ConfigError):
        ema_aggregate([Tensor(np.zeros(1))], 2, 0.5)


@pytest.mark.parametrize("kwargs", [dict(image_side=15), dict(heads=5), dict(attn_agg_start=7)])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


@pytest.fixture(scope="module")
def toy():
    b = BackboneConfig()
    return build_model(b, matched_adm_config(b, AdmConfig()), seed=0, dtype=np.float64)


def test_forward_shapes(toy):
    b = toy.backbone_cfg
    out = forward(np.random.default_rng(0).uniform(size=(3, 1, 16, 16)), toy, "eval")
    N = b.num_patches
    assert out.f_t.shape == (3, b.feature_dim)
    assert out.z_t.shape == (3, b.num_classes)
    assert out.global_attn.shape == (3, N + 1, b.embed_dim)
    assert len(out.layer_feats) == b.layers
    assert out.f_a.shape == (3, b.feature_dim) and out.z_a.shape == (3, b.num_classes)


def test_attention_rows_sum_to_one(toy):
    out = forward(np.random.default_rng(1).uniform(size=(2, 1, 16, 16)), toy, "eval")
    for w in out.attn_weights:
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_identical_inputs_identical_outputs(toy):
    img = np.random.default_rng(2).uniform(size=(1, 1, 16, 16))
    out = forward(np.concatenate([img, img]), toy, "eval")
    for t in (out.f_t, out.z_t, out.f_a, out.z_a):
        assert np.array_equal(t.data[0], t.data[1])


def test_param_count_closed_form(toy):
    b = toy.backbone_cfg
    assert backbone_param_count(toy) == count_params_closed_form(b) == 78596
    vitb = BackboneConfig.vit_b16()
    assert sum(int(np.prod(s)) for s in param_shapes(vitb).values()) == count_params_closed_form(vitb)


def test_gradient_reaches_patch_embedding(toy):
    toy.zero_grad()
    out = forward(np.random.default_rng(3).uniform(size=(2, 1, 16, 16)), toy, "eval", with_adm=False)
    T.tsum(out.z_t).backward()
    assert np.abs(toy["backbone.patch.w"].grad.data).sum() > 0
    toy.zero_grad()


def test_wrong_image_shape(toy):
    with pytest.raises(T.DimensionError):
        forward(np.zeros((1, 1, 12, 12)), toy, "eval")
