"""Forward noising, reverse (policy) transitions, and their log-densities.

The reverse transition at stride t -> s is a Gaussian whose mean combines
the current state with the thresholded clean-ligand reconstruction and
whose scale is the exact posterior sigma_q(s, t). Log-densities are
computed over the stored state components (3 N_M coordinates + K N_M
features); because the CoM constraint removes 3 coordinate dimensions, a
corrected-dimension density is exposed separately. The constant offset
between the two conventions cancels in every policy ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .denoiser import (
    DenoiserParams,
    build_packed_batch,
    pack_coords,
    pack_node_features,
    packed_forward,
    predict_clean_arrays,
)
from .geometry import (
    FEATURE_SCALE,
    K_LIGAND_TYPES,
    LigandCloud,
    PocketCloud,
    project_com_free,
)
from .schedule import Schedule, posterior_params

__all__ = [
    "NoisyState",
    "TransitionRecord",
    "noise_to",
    "reverse_mean",
    "sample_transition",
    "logp_under",
    "logp_corrected",
    "pretrain_loss",
    "pretrain_loss_value",
    "sample_prior",
    "decode",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoisyState:
    """MDP state: noisy ligand, timestep, and the conditioning pocket."""

    z: LigandCloud
    t: int
    pocket: PocketCloud

    def __post_init__(self):
        com = np.abs(self.z.coords.mean(axis=0)).max()
        scale = max(1.0, float(np.abs(self.z.coords).max()))
        if not com <= 1e-6 * scale:
            raise ValueError(f"noisy coordinates must be CoM-free, |mean|={com:.2e}")


@dataclass(frozen=True)
class TransitionRecord:
    """One policy action: everything needed to re-evaluate its log-density."""

    state: NoisyState
    action: LigandCloud
    logp: float
    s: int

    def __post_init__(self):
        if not math.isfinite(self.logp):
            raise ValueError("non-finite action log-density")
        if self.s >= self.state.t:
            raise ValueError(f"target step {self.s} must precede {self.state.t}")


def noise_to(
    sched: Schedule, ligand: LigandCloud, pocket: PocketCloud, t: int, rng: np.random.Generator
) -> NoisyState:
    """Forward-noise a clean centered ligand to step t.

    Coordinate noise is projected into the CoM-free subspace; feature noise
    is unconstrained. t = 0 is allowed as a guarded limit and returns the
    clean ligand unchanged (alpha_0, sigma_0 are within `precision` of the
    identity).
    """
    if not 0 <= t <= sched.T:
        raise ValueError(f"t must lie in 0..{sched.T}, got {t}")
    if np.abs(ligand.coords.mean(axis=0)).max() > 1e-6:
        raise ValueError("complex must be centered on the ligand CoM")
    if t == 0:
        return NoisyState(z=ligand, t=0, pocket=pocket)
    eps_c = project_com_free(rng.standard_normal(ligand.coords.shape))
    eps_f = rng.standard_normal(ligand.features.shape)
    a, s = sched.alpha[t], sched.sigma[t]
    z = LigandCloud(
        coords=a * ligand.coords + s * eps_c,
        features=a * ligand.features + s * eps_f,
    )
    return NoisyState(z=z, t=t, pocket=pocket)


def _forward_eps(params, state: NoisyState, sched: Schedule):
    """Packed single-complex forward; tensor-aware in params."""
    packed = build_packed_batch([(state.z.n_atoms, state.pocket.n_atoms)])
    coords = pack_coords(packed, [state.z.coords], [state.pocket.coords])
    feats = pack_node_features(packed, [state.z.features], [state.pocket.types], state.t / sched.T)
    return packed_forward(params, coords, feats, packed)


def _mu_of(params, state: NoisyState, sched: Schedule, s: int):
    """Reverse-transition mean (tensor-aware); coordinates re-projected CoM-free."""
    po = posterior_params(sched, s, state.t)
    eps_c, eps_f = _forward_eps(params, state, sched)
    m_c, m_f = predict_clean_arrays(
        sched, state.z.coords, state.z.features, eps_c, eps_f, state.t
    )
    n = state.z.n_atoms
    starts = np.array([0, n], dtype=np.int64)
    mu_c = ad.segment_mean_subtract(
        po.coef_zt * state.z.coords + po.coef_m * m_c, starts
    )
    mu_f = po.coef_zt * state.z.features + po.coef_m * m_f
    return mu_c, mu_f, po


def reverse_mean(sched: Schedule, params: DenoiserParams, state: NoisyState, s: int) -> LigandCloud:
    """mu_theta = coef_zt z_t + coef_m m_hat, with thresholded m_hat."""
    mu_c, mu_f, _ = _mu_of(params.arrays, state, sched, s)
    return LigandCloud(coords=mu_c, features=mu_f)


def _gauss_logp(diff_c, diff_f, sigma_q: float, n_atoms: int, corrected: bool):
    n_coord = 3 * (n_atoms - 1) if corrected else 3 * n_atoms
    dims = n_coord + K_LIGAND_TYPES * n_atoms
    ssq = ad.total(ad.square(diff_c)) + ad.total(ad.square(diff_f))
    return -0.5 * ssq / (sigma_q**2) - 0.5 * dims * (LOG_2PI + 2.0 * math.log(sigma_q))


def sample_transition(
    sched: Schedule,
    params: DenoiserParams,
    state: NoisyState,
    s: int,
    rng: np.random.Generator,
) -> TransitionRecord:
    """Draw z_s ~ N(mu_theta, sigma_q^2 I) and record its log-density."""
    if s >= state.t:
        raise ValueError(f"need s < t, got s={s}, t={state.t}")
    mu_c, mu_f, po = _mu_of(params.arrays, state, sched, s)
    if not (np.all(np.isfinite(mu_c)) and np.all(np.isfinite(mu_f))):
        raise ValueError("non-finite transition mean")
    eps_c = project_com_free(rng.standard_normal(mu_c.shape))
    eps_f = rng.standard_normal(mu_f.shape)
    act_c = mu_c + po.sigma_q * eps_c
    act_f = mu_f + po.sigma_q * eps_f
    logp = float(_gauss_logp(act_c - mu_c, act_f - mu_f, po.sigma_q, state.z.n_atoms, False))
    return TransitionRecord(
        state=state,
        action=LigandCloud(coords=act_c, features=act_f),
        logp=logp,
        s=s,
    )


def logp_under(params, record: TransitionRecord, sched: Schedule):
    """Log-density of the stored action under the given parameters.

    `params` may be a DenoiserParams (returns float) or a dict of autodiff
    tensors (returns a Tensor differentiable in the parameters).
    """
    arrays = params.arrays if isinstance(params, DenoiserParams) else params
    mu_c, mu_f, po = _mu_of(arrays, record.state, sched, record.s)
    out = _gauss_logp(
        record.action.coords - mu_c,
        record.action.features - mu_f,
        po.sigma_q,
        record.state.z.n_atoms,
        corrected=False,
    )
    if isinstance(out, ad.Tensor):
        if not np.isfinite(out.value):
            raise ValueError("non-finite log-density")
        return out
    out = float(out)
    if not math.isfinite(out):
        raise ValueError("non-finite log-density")
    return out


def logp_corrected(params: DenoiserParams, record: TransitionRecord, sched: Schedule) -> float:
    """Log-density with the coordinate dimensionality reduced to 3 (N - 1).

    The CoM constraint confines coordinates to that subspace; this variant
    normalizes over it. It differs from logp_under by a params-independent
    constant, so policy ratios are unchanged.
    """
    mu_c, mu_f, po = _mu_of(params.arrays, record.state, sched, record.s)
    return float(
        _gauss_logp(
            record.action.coords - mu_c,
            record.action.features - mu_f,
            po.sigma_q,
            record.state.z.n_atoms,
            corrected=True,
        )
    )


def pretrain_loss(
    sched: Schedule,
    params,
    ligand: LigandCloud,
    pocket: PocketCloud,
    rng: np.random.Generator,
):
    """Noise-matching loss: t ~ U{1..T}, mean squared (eps - eps_hat).

    Averaged over atoms and channels (coordinates and features jointly).
    Tensor-aware in `params`; the random draw happens before the network
    evaluation so a closure over a fixed rng state is a pure function of
    the parameters.
    """
    t = int(rng.integers(1, sched.T + 1))
    eps_c = project_com_free(rng.standard_normal(ligand.coords.shape))
    eps_f = rng.standard_normal(ligand.features.shape)
    return pretrain_loss_value(sched, params, ligand, pocket, t, eps_c, eps_f)


def pretrain_loss_value(sched, params, ligand, pocket, t, eps_c, eps_f):
    """Deterministic core of pretrain_loss for a fixed draw (t, eps)."""
    arrays = params.arrays if isinstance(params, DenoiserParams) else params
    a, s = sched.alpha[t], sched.sigma[t]
    z = LigandCloud(
        coords=a * ligand.coords + s * eps_c,
        features=a * ligand.features + s * eps_f,
    )
    state = NoisyState(z=z, t=t, pocket=pocket)
    hat_c, hat_f = _forward_eps(arrays, state, sched)
    n = ligand.n_atoms * (3 + K_LIGAND_TYPES)
    ssq = ad.total(ad.square(hat_c - eps_c)) + ad.total(ad.square(hat_f - eps_f))
    return ssq * (1.0 / n)


def sample_prior(
    sched: Schedule, n_atoms: int, pocket: PocketCloud, rng: np.random.Generator
) -> NoisyState:
    """Pure-noise start of the reverse process at t = T."""
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    z = LigandCloud(
        coords=project_com_free(rng.standard_normal((n_atoms, 3))),
        features=rng.standard_normal((n_atoms, K_LIGAND_TYPES)),
    )
    return NoisyState(z=z, t=sched.T, pocket=pocket)


def decode(z0: LigandCloud) -> LigandCloud:
    """Terminal decoding: features -> one-hot(argmax) * FEATURE_SCALE.

    Ties break toward the lowest type index; coordinates pass through.
    """
    idx = np.argmax(z0.features, axis=1)
    return LigandCloud.from_types(z0.coords, idx)
