# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Fused single-pass kernels for the elementwise/reduction hot spots.

Compiled with -O3 -ffast-math so gcc can route tanh/exp through libmvec;
matmul is deliberately absent (BLAS already owns it). Every function here
mirrors a reference implementation in ``_kernels_np`` and is tested for
parity against it.
"""

from libc.math cimport tanh, tanhf, exp, expf, sqrt, sqrtf

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def gelu_fwd(real[::1] x, real[::1] y, real[::1] t):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real u, ti
    cdef real c = <real>GELU_C
    cdef real a = <real>GELU_A
    for i in range(n):
        u = c * (x[i] + a * x[i] * x[i] * x[i])
        if real is float:
            ti = tanhf(u)
        else:
            ti = tanh(u)
        t[i] = ti
        y[i] = <real>0.5 * x[i] * (<real>1.0 + ti)


def gelu_bwd(real[::1] x, real[::1] t, real[::1] g, real[::1] gx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real du, ti
    cdef real c = <real>GELU_C
    cdef real a3 = <real>(3.0 * GELU_A)
    for i in range(n):
        ti = t[i]
        du = c * (<real>1.0 + a3 * x[i] * x[i])
        gx[i] = g[i] * (<real>0.5 * (<real>1.0 + ti)
                        + <real>0.5 * x[i] * (<real>1.0 - ti * ti) * du)


def softmax_fwd(real[:, ::1] x, real[:, ::1] y):
    cdef Py_ssize_t i, j, rows = x.shape[0], d = x.shape[1]
    cdef real m, s, inv
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = <real>0.0
        for j in range(d):
            if real is float:
                y[i, j] = expf(x[i, j] - m)
            else:
                y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        inv = <real>1.0 / s
        for j in range(d):
            y[i, j] *= inv


def softmax_bwd(real[:, ::1] y, real[:, ::1] g, real[:, ::1] gx):
    cdef Py_ssize_t i, j, rows = y.shape[0], d = y.shape[1]
    cdef real dot
    for i in range(rows):
        dot = <real>0.0
        for j in range(d):
            dot += y[i, j] * g[i, j]
        for j in range(d):
            gx[i, j] = y[i, j] * (g[i, j] - dot)


def layernorm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta,
                  double eps, real[:, ::1] y, real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t i, j, rows = x.shape[0], d = x.shape[1]
    cdef real mu, var, rs, xc
    cdef real invd = <real>(1.0 / d)
    cdef real e = <real>eps
    for i in range(rows):
        mu = <real>0.0
        for j in range(d):
            mu += x[i, j]
        mu *= invd
        var = <real>0.0
        for j in range(d):
            xc = x[i, j] - mu
            var += xc * xc
        var *= invd
        if real is float:
            rs = <real>1.0 / sqrtf(var + e)
        else:
            rs = <real>1.0 / sqrt(var + e)
        mean[i] = mu
        rstd[i] = rs
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * rs * gamma[j] + beta[j]


def layernorm_bwd(real[:, ::1] x, real[::1] gamma, real[::1] mean,
                  real[::1] rstd, real[:, ::1] g, real[:, ::1] gx,
                  real[::1] dgamma, real[::1] dbeta):
    cdef Py_ssize_t i, j, rows = x.shape[0], d = x.shape[1]
    cdef real mu, rs, m1, m2, xhat, gxh
    cdef real invd = <real>(1.0 / d)
    for i in range(rows):
        mu = mean[i]
        rs = rstd[i]
        m1 = <real>0.0
        m2 = <real>0.0
        for j in range(d):
            xhat = (x[i, j] - mu) * rs
            gxh = g[i, j] * gamma[j]
            m1 += gxh
            m2 += gxh * xhat
        m1 *= invd
        m2 *= invd
        for j in range(d):
            xhat = (x[i, j] - mu) * rs
            gxh = g[i, j] * gamma[j]
            gx[i, j] = rs * (gxh - m1 - xhat * m2)
            dgamma[j] += g[i, j] * xhat
            dbeta[j] += g[i, j]


def adam_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
              double lr, double beta1, double beta2, double eps,
              double wd, double bc1, double bc2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef real b1 = <real>beta1
    cdef real b2 = <real>beta2
    cdef real c1 = <real>(1.0 - beta1)
    cdef real c2 = <real>(1.0 - beta2)
    cdef real ilr = <real>lr
    cdef real ie = <real>eps
    cdef real ibc1 = <real>(1.0 / bc1)
    cdef real ibc2 = <real>(1.0 / bc2)
    cdef real decay = <real>(1.0 - lr * wd)
    cdef real mhat, vhat
    for i in range(n):
        if wd != 0.0:
            p[i] *= decay
        m[i] = b1 * m[i] + c1 * g[i]
        v[i] = b2 * v[i] + c2 * g[i] * g[i]
        mhat = m[i] * ibc1
        vhat = v[i] * ibc2
        if real is float:
            p[i] -= ilr * mhat / (sqrtf(vhat) + ie)
        else:
            p[i] -= ilr * mhat / (sqrt(vhat) + ie)
