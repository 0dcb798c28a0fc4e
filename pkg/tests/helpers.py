"""Shared test utilities: central finite differences on raw arrays."""
import numpy as np

from cadtrans import tensor as T
from cadtrans.tensor import Tensor

H = 1e-5


def check_grad(fn, *arrays, seed=0, h=H):
    """Max relative error between backward and central differences.

    ``fn`` maps Tensors to a Tensor; the output is reduced to a scalar with a
    fixed random weighting so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*xs):
        return T.tsum(T.mul(fn(*xs), Tensor(weights)))

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    scalar(*inputs).backward()
    worst = 0.0
    for a, t in zip(arrays, inputs):
        analytic = t.grad.data if t.grad is not None else np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            up = float(scalar(*[Tensor(x) for x in arrays]).data)
            a[i] = orig - h
            down = float(scalar(*[Tensor(x) for x in arrays]).data)
            a[i] = orig
            num = (up - down) / (2 * h)
            err = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
