import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadtrans.adm import (AdmConfig, adm_forward, count_params_closed_form, distill_loss, init_params,
                          param_shapes, reshape_attention)
from cadtrans.backbone import BackboneConfig, ConfigError
from cadtrans.backbone import count_params_closed_form as backbone_count
from cadtrans.model import overhead_ratio
from cadtrans.params import ModelState
from cadtrans.tensor import Tensor


def test_reshape_toy_shape():
    assert reshape_attention(Tensor(np.zeros((2, 17, 32)))).shape == (2, 32, 4, 4)


def test_reshape_vit_b16_shape():
    assert reshape_attention(Tensor(np.zeros((1, 197, 768), dtype=np.float32))).shape == (1, 768, 14, 14)


def test_reshape_layout():
    x = np.random.default_rng(0).standard_normal((2, 17, 3))
    out = reshape_attention(Tensor(x)).data
    for r in range(4):
        for c in range(4):
            np.testing.assert_array_equal(out[:, :, r, c], x[:, 1 + r * 4 + c, :])


def test_reshape_non_square():
    with pytest.raises(ConfigError):
        reshape_attention(Tensor(np.zeros((1, 16, 4))))


def test_vit_b16_plan_spatial_sizes():
    cfg = AdmConfig.vit_b16()
    assert cfg.spatial_sizes() == [14, 6, 4, 2]
    assert cfg.channels == (768, 512, 256, 256) and not cfg.needs_projection


def _adm(cfg, seed=0):
    m = ModelState()
    init_params(m, cfg, np.random.default_rng(seed), np.float64)
    return m


def test_toy_plan_64_channels_shapes():
    cfg = AdmConfig(channels=(32, 64, 64, 64))
    assert cfg.spatial_sizes() == [4, 4, 4, 2]
    f_a, z_a = adm_forward(Tensor(np.random.default_rng(0).standard_normal((3, 32, 4, 4))), _adm(cfg), cfg, True)
    assert f_a.shape == (3, 32) and z_a.shape == (3, 4)
    assert cfg.pooled_dim == 64 and cfg.needs_projection


def test_zero_map_eval_gives_zero_features():
    cfg = AdmConfig()
    f_a, _ = adm_forward(Tensor(np.zeros((2, 32, 4, 4))), _adm(cfg), cfg, training=False)
    np.testing.assert_array_equal(f_a.data, 0.0)


def test_plan_collapse_rejected():
    with pytest.raises(ConfigError):
        AdmConfig(channels=(32, 8, 8, 8), strides=(2, 2, 2), paddings=(0, 0, 0))


def test_param_count_closed_form():
    for cfg in (AdmConfig(), AdmConfig.vit_b16()):
        assert count_params_closed_form(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())
    assert count_params_closed_form(AdmConfig()) == 7132


def test_overhead_ratio_toy_and_vit_b16():
    toy = overhead_ratio(BackboneConfig(), AdmConfig())
    vitb = overhead_ratio(BackboneConfig.vit_b16(), AdmConfig.vit_b16())
    assert toy <= 1.10 and vitb <= 1.10
    # hand formula: conv weights + BN affine + head, over the backbone formula
    b = BackboneConfig()
    hand = 1 + (32 * 12 * 9 + 24 + 12 * 12 * 9 * 2 + 48 + 12 * 32 + 32 + 32 * 16 + 16 + 16 * 4 + 4) / backbone_count(b)
    assert toy == pytest.approx(hand, rel=1e-12)


def test_distill_three_four_five():
    f_a, f_s = Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([[0.0, 0.0]]))
    z = Tensor(np.array([[0.3, -1.0]]))
    assert float(distill_loss(f_a, f_s, z, z).data) == pytest.approx(5.0, abs=1e-12)


def test_distill_identical_is_zero():
    x = np.random.default_rng(0).standard_normal((4, 3))
    z = np.random.default_rng(1).standard_normal((4, 5))
    assert float(distill_loss(Tensor(x), Tensor(x), Tensor(z), Tensor(z)).data) == pytest.approx(0.0, abs=1e-12)


def test_distill_direct_oracle():
    rng = np.random.default_rng(5)
    fa, fs, za, zs = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 5)), \
        rng.standard_normal((3, 5))
    total = 0.0
    for i in range(3):
        norm = np.sqrt(sum((fa[i, j] - fs[i, j]) ** 2 for j in range(4)))
        pa = np.exp(za[i]) / sum(np.exp(za[i]))
        ps = np.exp(zs[i]) / sum(np.exp(zs[i]))
        total += norm + sum(pa[k] * np.log(pa[k] / ps[k]) for k in range(5))
    got = float(distill_loss(Tensor(fa), Tensor(fs), Tensor(za), Tensor(zs)).data)
    assert got == pytest.approx(total / 3, abs=1e-8)


def test_distill_squared_variant():
    f_a, f_s = Tensor(np.array([[3.0, 4.0]])), Tensor(np.zeros((1, 2)))
    z = Tensor(np.zeros((1, 2)))
    assert float(distill_loss(f_a, f_s, z, z, squared=True).data) == pytest.approx(25.0)


def test_distill_teacher_gets_no_gradient():
    rng = np.random.default_rng(2)
    fa, fs = Tensor(rng.standard_normal((2, 3)), requires_grad=True), Tensor(rng.standard_normal((2, 3)),
                                                                            requires_grad=True)
    za, zs = Tensor(rng.standard_normal((2, 4)), requires_grad=True), Tensor(rng.standard_normal((2, 4)),
                                                                            requires_grad=True)
    distill_loss(fa, fs, za, zs).backward()
    assert fs.grad is None and zs.grad is None
    assert fa.grad is not None and za.grad is not None


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_distill_nonnegative(seed, batch):
    rng = np.random.default_rng(seed)
    args = [Tensor(rng.standard_normal((batch, 3)) * 3) for _ in range(2)] + \
        [Tensor(rng.standard_normal((batch, 4)) * 3) for _ in range(2)]
    assert float(distill_loss(*args).data) >= -1e-12
