"""Noise schedule, asymmetric masking, forward diffusion, posterior.

The forward process perturbs only the visible token block; masked tokens
never see noise (they are dropped and replaced by a mask embedding
downstream). The closed-form marginal

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps

stands in for iterating the per-step chain, and the posterior of the
chain given (x0, x_t) is Gaussian with the fixed variance beta_tilde;
nothing about the variance is learned.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Per-step noise variances and their cumulative products.

    Arrays are stored 0-based; the accessors take the conventional
    1-based timestep with abar(0) == 1 (the no-noise boundary).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def beta_t(self, t):
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_t(self, t):
        self._check_t(t)
        return float(self.alpha[t - 1])

    def abar(self, t):
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")


def build_schedule(T, beta_start=1e-4, beta_end=0.02, direction="increasing"):
    """Linear beta schedule over T steps.

    beta[t] = beta_start + (t-1)/(T-1) * (beta_end - beta_start), or the
    reverse of that when direction == "decreasing".
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if direction not in ("increasing", "decreasing"):
        raise ValueError(f"unknown beta direction {direction!r}")
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = beta_start + np.arange(T) / (T - 1) * (beta_end - beta_start)
    if direction == "decreasing":
        beta = beta[::-1].copy()
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = Schedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
    assert np.all(np.diff(alpha_bar) < 0) or T == 1
    return sched


@dataclass(frozen=True)
class MaskPlan:
    """Partition of {0..P-1} into visible and masked index sets."""

    P: int
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    def __post_init__(self):
        both = np.concatenate([self.visible, self.masked])
        if len(np.unique(both)) != self.P or both.size != self.P:
            raise ValueError("visible/masked must partition the token range")


def sample_mask(P, ratio, rng):
    """Uniform random mask plan: floor(ratio * P) masked tokens."""
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n_masked = int(np.floor(ratio * P))
    perm = rng.permutation(P)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskPlan(P=P, visible=visible, masked=masked, ratio=ratio)


def forward_diffuse(x0_v, t, eps, schedule):
    """Closed-form marginal at step t for the visible block."""
    schedule._check_t(t)
    x0_v = np.asarray(x0_v)
    eps = np.asarray(eps)
    if eps.shape != x0_v.shape:
        raise ValueError(f"noise shape {eps.shape} != input shape {x0_v.shape}")
    ab = schedule.abar(t)
    return np.sqrt(ab) * x0_v + np.sqrt(1.0 - ab) * eps


def posterior_params(x0, xt, t, schedule):
    """Mean and variance of the chain posterior q(x_{t-1} | x_t, x0).

    With abar(0) = 1 the t=1 case collapses to (x0, 0) and is returned
    exactly rather than through the general formula's 0/0-adjacent path.
    """
    schedule._check_t(t)
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    if t == 1:
        return x0.copy(), 0.0
    ab_prev = schedule.abar(t - 1)
    ab = schedule.abar(t)
    beta = schedule.beta_t(t)
    alpha = schedule.alpha_t(t)
    denom = 1.0 - ab
    coef0 = np.sqrt(ab_prev) * beta / denom
    coeft = np.sqrt(alpha) * (1.0 - ab_prev) / denom
    beta_tilde = beta * (1.0 - ab_prev) / denom
    return coef0 * x0 + coeft * xt, beta_tilde


def sample_reverse(model, schedule, shape, rng):
    """Ancestral sampler, diagnostic only.

    `model(x_t, t) -> x0_hat` is the clean-sample predictor (a mask plan,
    if relevant, is captured inside the closure). Starts from N(0, I),
    at each step re-noises around the posterior mean of the predicted
    x0, and returns the final prediction.
    """
    xt = rng.standard_normal(shape)
    for t in range(schedule.T, 1, -1):
        x0_hat = model(xt, t)
        mu, beta_tilde = posterior_params(x0_hat, xt, t, schedule)
        xt = mu + np.sqrt(beta_tilde) * rng.standard_normal(shape)
    return model(xt, 1)
