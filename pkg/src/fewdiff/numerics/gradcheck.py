"""Finite-difference verification of the autodiff engine.

Central differences in float64: for scalar f and input x,
df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / 2h. Analytic gradients must
match to a relative error of 1e-4 at h=1e-5 on every supported op.
"""

import numpy as np

from .tensor import Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def finite_difference_gradient(fn, inputs, h=DEFAULT_H):
    """Gradients of scalar fn w.r.t. each float64 input array, by central
    differences. fn receives plain numpy arrays and returns a float."""
    grads = []
    for k, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs))
            flat[i] = orig - h
            fm = float(fn(*inputs))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build, inputs, h=DEFAULT_H, tol=DEFAULT_TOL):
    """Compare autodiff gradients of `build` against finite differences.

    `build` maps Tensors to a scalar Tensor; `inputs` are float64 arrays.
    Returns the worst relative error across all inputs; raises AssertionError
    above `tol`.
    """
    arrs = [np.asarray(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
    out = build(*ts)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def fn(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    numeric = finite_difference_gradient(fn, arrs, h=h)
    worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    if worst > tol:
        raise AssertionError(f"gradient mismatch: rel err {worst:.3e} > {tol:.1e}")
    return worst
