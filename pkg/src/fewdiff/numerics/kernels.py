"""Kernel dispatch: compiled fused kernels when built, numpy otherwise.

The compiled lane (``fewdiff.numerics._fused``, Cython) fuses the
elementwise/reduction-heavy inner loops: GELU, softmax, layer norm and
the Adam update. Matrix multiplies are numpy/BLAS in both lanes. The
active lane is selected at import time and can be switched with
``set_backend``; per-call the compiled lane only takes C-contiguous
float32/float64 arrays and silently defers to numpy for anything else.
"""

import numpy as np

from . import _kernels_np as _npk

try:
    from . import _fused as _ext
except ImportError:
    _ext = None

_backend = "compiled" if _ext is not None else "numpy"


def available_backends():
    return ("numpy", "compiled") if _ext is not None else ("numpy",)


def set_backend(name):
    """Select 'compiled' or 'numpy'. Raises if the lane is not built."""
    global _backend
    if name not in ("numpy", "compiled"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _ext is None:
        raise RuntimeError("compiled kernels are not available in this install")
    _backend = name


def get_backend():
    return _backend


def _fast(*arrays):
    if _backend != "compiled":
        return False
    for a in arrays:
        if a.dtype not in (np.float32, np.float64) or not a.flags.c_contiguous:
            return False
    return True


def gelu_fwd(x):
    if _fast(x):
        y = np.empty_like(x)
        t = np.empty_like(x)
        _ext.gelu_fwd(x.reshape(-1), y.reshape(-1), t.reshape(-1))
        return y, t
    return _npk.gelu_fwd(x)


def gelu_bwd(x, t, g):
    if _fast(x, t, g):
        gx = np.empty_like(x)
        _ext.gelu_bwd(x.reshape(-1), t.reshape(-1), g.reshape(-1), gx.reshape(-1))
        return gx
    return _npk.gelu_bwd(x, t, g)


def softmax_fwd(x):
    if x.ndim >= 1 and _fast(x):
        y = np.empty_like(x)
        _ext.softmax_fwd(x.reshape(-1, x.shape[-1]), y.reshape(-1, x.shape[-1]))
        return y
    return _npk.softmax_fwd(x)


def softmax_bwd(y, g):
    if _fast(y, g):
        gx = np.empty_like(y)
        _ext.softmax_bwd(
            y.reshape(-1, y.shape[-1]), g.reshape(-1, y.shape[-1]),
            gx.reshape(-1, y.shape[-1]),
        )
        return gx
    return _npk.softmax_bwd(y, g)


def layernorm_fwd(x, gamma, beta, eps):
    if x.ndim >= 2 and _fast(x) and gamma.dtype == x.dtype and beta.dtype == x.dtype:
        d = x.shape[-1]
        lead = x.shape[:-1]
        y = np.empty_like(x)
        mean = np.empty(lead, dtype=x.dtype)
        rstd = np.empty(lead, dtype=x.dtype)
        _ext.layernorm_fwd(
            x.reshape(-1, d), np.ascontiguousarray(gamma), np.ascontiguousarray(beta),
            eps, y.reshape(-1, d), mean.reshape(-1), rstd.reshape(-1),
        )
        return y, mean, rstd
    return _npk.layernorm_fwd(x, gamma, beta, eps)


def layernorm_bwd(x, gamma, mean, rstd, g):
    if (
        x.ndim >= 2 and _fast(x, g) and gamma.dtype == x.dtype
        and mean.dtype == x.dtype and rstd.dtype == x.dtype
    ):
        d = x.shape[-1]
        gx = np.empty_like(x)
        dgamma = np.zeros(d, dtype=x.dtype)
        dbeta = np.zeros(d, dtype=x.dtype)
        _ext.layernorm_bwd(
            x.reshape(-1, d), np.ascontiguousarray(gamma),
            np.ascontiguousarray(mean).reshape(-1), np.ascontiguousarray(rstd).reshape(-1),
            g.reshape(-1, d), gx.reshape(-1, d), dgamma, dbeta,
        )
        return gx, dgamma, dbeta
    return _npk.layernorm_bwd(x, gamma, mean, rstd, g)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    if _fast(p, g, m, v) and p.dtype == g.dtype == m.dtype == v.dtype:
        _ext.adam_step(
            p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
            lr, beta1, beta2, eps, wd, bc1, bc2,
        )
        return
    _npk.adam_step(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2)
