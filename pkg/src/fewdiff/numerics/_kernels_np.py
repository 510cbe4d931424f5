"""Pure-numpy reference kernels. Always available; also the correctness
baseline the compiled lane is tested against."""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    y = 0.5 * x * (1.0 + t)
    return y, t


def gelu_bwd(x, t, g):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y, g):
    dot = np.sum(y * g, axis=-1, keepdims=True)
    return y * (g - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=-1)
    xc = x - mean[..., None]
    var = np.mean(xc * xc, axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[..., None] * gamma + beta
    return y, mean, rstd


def layernorm_bwd(x, gamma, mean, rstd, g):
    xhat = (x - mean[..., None]) * rstd[..., None]
    gxh = g * gamma
    m1 = gxh.mean(axis=-1, keepdims=True)
    m2 = np.mean(gxh * xhat, axis=-1, keepdims=True)
    gx = rstd[..., None] * (gxh - m1 - xhat * m2)
    lead = tuple(range(x.ndim - 1))
    return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """One Adam update, in place on p/m/v.

    Decoupled weight decay shrinks the parameter before the moment update;
    bc1/bc2 are the bias corrections 1-beta1^t, 1-beta2^t.
    """
    if wd != 0.0:
        p -= lr * wd * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * mhat / (np.sqrt(vhat) + eps)
