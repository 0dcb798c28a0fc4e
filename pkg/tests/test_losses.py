import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cadtrans import losses
from cadtrans.losses import KernelSpec, LossWeights, cmk_mmd, cst_loss, im_loss, total_loss
from cadtrans.tensor import Tensor
from helpers import check_grad


def _f(t):
    return float(t.data)


def test_im_uniform_is_zero():
    # the 1e-12 log guard leaves a residual of about C * 1e-12
    assert _f(im_loss(Tensor(np.zeros((5, 4))))) == pytest.approx(0.0, abs=1e-10)


def test_im_confident_single_class():
    z = np.zeros((3, 2))
    z[:, 0] = 50.0
    assert _f(im_loss(Tensor(z))) == pytest.approx(0.0, abs=1e-9)


def test_im_direct_oracle():
    z = np.random.default_rng(0).standard_normal((7, 5)) * 2
    B, C = z.shape
    P = [[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in z]
    ent = sum(-sum(p * math.log(p) for p in row) for row in P) / B
    pbar = [sum(P[i][k] for i in range(B)) / B for k in range(C)]
    div = sum(p * math.log(p + 1e-12) for p in pbar)
    assert _f(im_loss(Tensor(z))) == pytest.approx(ent + div, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_im_entropy_term_bounded(seed):
    z = np.random.default_rng(seed).standard_normal((6, 4)) * 5
    # with a single-sample batch the diversity term is -entropy, so im = 0;
    # the entropy term alone is im minus the diversity term
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    pbar = p.mean(0)
    ent = _f(im_loss(Tensor(z))) - float(np.sum(pbar * np.log(pbar + 1e-12)))
    assert -1e-9 <= ent <= math.log(4) + 1e-9


def test_cst_uniform():
    z = Tensor(np.zeros((3, 4)))
    assert _f(cst_loss(z, z, [0, 1, 3])) == pytest.approx(2 * math.log(4), abs=1e-12)


def test_cst_confident_correct():
    z = Tensor(np.eye(3) * 60.0)
    assert _f(cst_loss(z, z, [0, 1, 2])) == pytest.approx(0.0, abs=1e-12)


def test_cst_direct_oracle():
    rng = np.random.default_rng(1)
    zt, za, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.integers(0, 3, 6)

    def ce(z):
        return sum(-z[i, y[i]] + math.log(sum(math.exp(v) for v in z[i])) for i in range(6)) / 6

    assert _f(cst_loss(Tensor(zt), Tensor(za), y)) == pytest.approx(ce(zt) + ce(za), abs=1e-8)


def test_cst_label_out_of_range():
    with pytest.raises(ValueError, match="labels must lie"):
        cst_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), [0, 3])


def test_total_arithmetic():
    parts = [Tensor(np.asarray(v)) for v in (1.0, 2.0, 3.0)]
    assert _f(total_loss(*parts, LossWeights(0.3, 0.1))) == pytest.approx(1.9, abs=1e-12)


def test_total_ablation_baseline_is_im():
    parts = [Tensor(np.asarray(v)) for v in (0.7, 2.0, 3.0)]
    assert _f(total_loss(*parts, LossWeights(0.0, 0.0))) == 0.7


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ValueError):
        KernelSpec(weights=(1, 1, 1, 1, -1))
    with pytest.raises(ValueError):
        KernelSpec(multipliers=())


def test_total_gradient_is_weighted_sum():
    rng = np.random.default_rng(2)
    zt0, za0, f0 = rng.standard_normal((8, 4)), rng.standard_normal((8, 4)), rng.standard_normal((8, 3))
    y = np.arange(8) % 4
    easy = np.arange(8) < 4
    w = LossWeights()

    def parts():
        zt, za, f = (Tensor(a.copy(), requires_grad=True) for a in (zt0, za0, f0))
        l_cmk, _ = cmk_mmd(f[np.flatnonzero(easy)], y[easy], f[np.flatnonzero(~easy)], y[~easy])
        return (zt, za, f), (im_loss(zt), cst_loss(zt, za, y), l_cmk)

    ins, p = parts()
    total_loss(*p, w).backward()
    g_total = [t.grad.data.copy() for t in ins]
    g_sum = [np.zeros_like(a) for a in (zt0, za0, f0)]
    for i, coef in enumerate((1.0, w.alpha, w.beta)):
        ins, p = parts()
        p[i].backward()
        for acc, t in zip(g_sum, ins):
            if t.grad is not None:
                acc += coef * t.grad.data
    for a, b in zip(g_total, g_sum):
        np.testing.assert_allclose(a, b, atol=1e-7)


def test_gradients_against_finite_differences():
    rng = np.random.default_rng(3)
    y = np.arange(10) % 3
    assert check_grad(lambda z: im_loss(z), rng.standard_normal((6, 4))) < 1e-6
    assert check_grad(lambda a, b: cst_loss(a, b, y[:6]), rng.standard_normal((6, 3)),
                      rng.standard_normal((6, 3))) < 1e-6
    assert check_grad(lambda e, h: cmk_mmd(e, y[:5], h, y[5:])[0], rng.standard_normal((5, 3)),
                      rng.standard_normal((5, 3))) < 1e-5


# --- CMK-MMD ---

def _rand_case(rng, n_e, n_h, F=3, C=3):
    return (rng.standard_normal((n_e, F)), rng.integers(0, C, n_e),
            rng.standard_normal((n_h, F)) + 0.5, rng.integers(0, C, n_h))


def test_cmk_matches_loop_oracle():
    rng = np.random.default_rng(4)
    spec = KernelSpec()
    for _ in range(5):
        xe, ye, xh, yh = _rand_case(rng, 9, 7)
        got, _ = cmk_mmd(Tensor(xe), ye, Tensor(xh), yh, spec)
        assert _f(got) == pytest.approx(oracles.cmk_mmd(xe, ye, xh, yh, spec.multipliers, spec.weights), abs=1e-10)


def test_cmk_single_pair_closed_form():
    s2 = 0.7
    x = np.array([[0.0, 0.0]])
    y = np.array([[math.sqrt(2 * s2), 0.0]])
    got, skipped = cmk_mmd(Tensor(x), [1], Tensor(y), [1], KernelSpec(multipliers=(1.0,), fixed_sigma2=s2))
    assert not skipped
    assert _f(got) == pytest.approx(2 - 2 * math.exp(-1), abs=1e-12)


def test_cmk_no_shared_class_skips():
    got, skipped = cmk_mmd(Tensor(np.ones((2, 2))), [0, 0], Tensor(np.ones((2, 2))), [1, 1])
    assert skipped and _f(got) == 0.0


def test_cmk_empty_side_skips():
    _, skipped = cmk_mmd(Tensor(np.zeros((0, 2))), [], Tensor(np.ones((2, 2))), [1, 1])
    assert skipped


def test_cmk_zero_bandwidth_floor():
    x = np.ones((2, 3))
    got, _ = cmk_mmd(Tensor(x), [0, 0], Tensor(x.copy()), [0, 0])
    assert _f(got) == pytest.approx(0.0, abs=1e-12)


def test_cmk_pooled_mode_runs():
    rng = np.random.default_rng(5)
    xe, ye, xh, yh = _rand_case(rng, 6, 6)
    got, _ = cmk_mmd(Tensor(xe), ye, Tensor(xh), yh, KernelSpec(pooled=True))
    assert _f(got) >= -1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 12), st.integers(1, 12))
def test_cmk_properties(seed, n_e, n_h):
    rng = np.random.default_rng(seed)
    xe, ye, xh, yh = _rand_case(rng, n_e, n_h)
    v, _ = cmk_mmd(Tensor(xe), ye, Tensor(xh), yh)
    assert _f(v) >= -1e-9
    swapped, _ = cmk_mmd(Tensor(xh), yh, Tensor(xe), ye)
    assert _f(swapped) == pytest.approx(_f(v), abs=1e-12)
    pe, ph = rng.permutation(n_e), rng.permutation(n_h)
    perm, _ = cmk_mmd(Tensor(xe[pe]), ye[pe], Tensor(xh[ph]), yh[ph])
    assert _f(perm) == _f(v)
    same, _ = cmk_mmd(Tensor(xe), ye, Tensor(xe.copy()), ye.copy())
    assert _f(same) < 1e-9


def test_bandwidth_uses_multiplier_on_sigma():
    # one kernel with multiplier 2 equals fixed sigma^2 scaled by 4
    x, y = np.array([[0.0]]), np.array([[1.3]])
    a, _ = cmk_mmd(Tensor(x), [0], Tensor(y), [0], KernelSpec(multipliers=(2.0,), fixed_sigma2=0.5))
    b, _ = cmk_mmd(Tensor(x), [0], Tensor(y), [0], KernelSpec(multipliers=(1.0,), fixed_sigma2=2.0))
    assert _f(a) == pytest.approx(_f(b), abs=1e-15)


def test_log_guard_constant():
    assert losses.LOG_EPS == 1e-12
