"""Variance-preserving noise schedule and closed-form stride algebra.

The schedule stores the signal/noise coefficient arrays once, in double
precision; transition and posterior quantities for arbitrary step pairs
(s, t) are derived from those arrays on demand so the algebraic identities
between them hold to machine precision by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Schedule",
    "TransitionParams",
    "PosteriorParams",
    "build_schedule",
    "transition_params",
    "posterior_params",
    "variance_profile",
]

# Minimum allowed per-step ratio alpha_t^2 / alpha_{t-1}^2 before the floor
# precision is blended in; keeps the last steps from collapsing to zero signal.
RATIO_CLIP = 1.0e-3


@dataclass(frozen=True)
class Schedule:
    """Precomputed noise schedule over integer steps 0..T.

    alpha[t]^2 + sigma[t]^2 == 1 for every t; snr[t] = alpha[t]^2 / sigma[t]^2
    is strictly decreasing.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    snr: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "sigma", "snr"):
            getattr(self, name).setflags(write=False)


@dataclass(frozen=True)
class TransitionParams:
    """Parameters of the forward transition from step s to step t > s."""

    alpha_ts: float
    sigma2_ts: float
    s: int
    t: int


@dataclass(frozen=True)
class PosteriorParams:
    """Coefficients of the exact denoising transition for the pair (s, t).

    The denoising mean is coef_zt * z_t + coef_m * m and the standard
    deviation is sigma_q.
    """

    coef_zt: float
    coef_m: float
    sigma_q: float
    s: int
    t: int


def build_schedule(T: int, precision: float = 1.0e-4) -> Schedule:
    """Build the polynomial variance-preserving schedule.

    raw(t) = (1 - (t/T)^2)^2, per-step ratios clipped from below at
    RATIO_CLIP and re-accumulated, then squeezed into
    [precision, 1 - precision] via alpha_t^2 = (1 - 2 p) raw(t) + p.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < precision < 0.5):
        raise ValueError(f"precision must lie in (0, 0.5), got {precision!r}")

    t = np.arange(T + 1, dtype=np.float64)
    raw = (1.0 - (t / T) ** 2) ** 2
    ratios = np.concatenate([[1.0], raw[1:] / raw[:-1]])
    ratios = np.clip(ratios, RATIO_CLIP, 1.0)
    clipped = np.cumprod(ratios)

    alpha2 = (1.0 - 2.0 * precision) * clipped + precision
    sigma2 = 1.0 - alpha2
    alpha = np.sqrt(alpha2)
    sigma = np.sqrt(sigma2)
    snr = alpha2 / sigma2
    return Schedule(T=int(T), alpha=alpha, sigma=sigma, snr=snr)


def _check_pair(sched: Schedule, s: int, t: int) -> None:
    if not (0 <= s < t <= sched.T):
        raise ValueError(f"need 0 <= s < t <= T={sched.T}, got s={s}, t={t}")


def transition_params(sched: Schedule, s: int, t: int, *, allow_equal: bool = False) -> TransitionParams:
    """Forward transition q(z_t | z_s) parameters for 0 <= s < t <= T.

    With allow_equal=True the degenerate s == t case returns the identity
    transition (alpha_ts = 1, sigma2_ts = 0).
    """
    if allow_equal and s == t:
        if not 0 <= s <= sched.T:
            raise ValueError(f"step {s} out of range 0..{sched.T}")
        return TransitionParams(alpha_ts=1.0, sigma2_ts=0.0, s=s, t=t)
    _check_pair(sched, s, t)
    alpha_ts = sched.alpha[t] / sched.alpha[s]
    sigma2_ts = sched.sigma[t] ** 2 - alpha_ts**2 * sched.sigma[s] ** 2
    return TransitionParams(alpha_ts=float(alpha_ts), sigma2_ts=float(max(sigma2_ts, 0.0)), s=s, t=t)


def posterior_params(sched: Schedule, s: int, t: int) -> PosteriorParams:
    """Exact denoising transition q(z_s | z_t, m) coefficients."""
    _check_pair(sched, s, t)
    tr = transition_params(sched, s, t)
    sig2_s = sched.sigma[s] ** 2
    sig2_t = sched.sigma[t] ** 2
    coef_zt = tr.alpha_ts * sig2_s / sig2_t
    coef_m = sched.alpha[s] * tr.sigma2_ts / sig2_t
    sigma_q = np.sqrt(tr.sigma2_ts) * sched.sigma[s] / sched.sigma[t]
    return PosteriorParams(
        coef_zt=float(coef_zt), coef_m=float(coef_m), sigma_q=float(sigma_q), s=s, t=t
    )


def coarse_grid(T: int, stride: int) -> list[tuple[int, int]]:
    """(t, s) pairs of the coarse denoising grid T -> 0.

    Steps down by `stride` from T; if stride does not divide T the final
    transition is shortened so the grid always terminates at 0.
    """
    if not 1 <= stride <= T:
        raise ValueError(f"stride must lie in 1..{T}, got {stride}")
    pairs = []
    t = T
    while t > 0:
        s = max(t - stride, 0)
        pairs.append((t, s))
        t = s
    return pairs


def variance_profile(sched: Schedule, stride: int) -> list[tuple[int, float]]:
    """(t, sigma_q(t - stride, t)) along the coarse grid T, T-stride, ...

    Only full-stride transitions are emitted; entries reproduce
    posterior_params exactly.
    """
    if not 1 <= stride <= sched.T:
        raise ValueError(f"stride must lie in 1..{sched.T}, got {stride}")
    out = []
    t = sched.T
    while t - stride >= 0:
        out.append((t, posterior_params(sched, t - stride, t).sigma_q))
        t -= stride
    return out
