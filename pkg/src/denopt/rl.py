"""Denoising policy optimization: rollouts, advantages, the clipped
surrogate, parameter updates, and top-N harvesting.

Trajectories in a batch advance together on the shared coarse grid, packed
into one graph per step so every network call covers the whole batch. All
randomness is drawn from per-trajectory streams (seed = base seed +
trajectory index), so results are independent of batching and worker
count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import (
    DenoiserParams,
    PackedBatch,
    build_packed_batch,
    pack_coords,
    pack_node_features,
    packed_forward,
    predict_clean_arrays,
)
from .diffusion import LOG_2PI, NoisyState, TransitionRecord, decode, sample_prior
from .geometry import K_LIGAND_TYPES, LigandCloud, PocketCloud, project_com_free
from .rewards import OracleVector, RewardBatch, build_reward_batch
from .schedule import Schedule, coarse_grid, posterior_params
from .synthworld import SizeSampler, sample_ligand_size

__all__ = [
    "PpoConfig",
    "Trajectory",
    "RolloutBatch",
    "AdamWState",
    "rollout",
    "group_advantages",
    "ppo_loss",
    "ppo_gradient",
    "policy_gradient_terms",
    "update_step",
    "finetune",
    "topn_harvest",
]

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_RATIO_CLAMP = 20.0
EPS_STD = 1e-8


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 32
    n_updates: int = 100
    stride: int = 5
    epochs_per_batch: int = 1
    # fraction of grid steps entering each surrogate gradient; an unbiased
    # Monte-Carlo estimate of the per-timestep expectation
    grad_timestep_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for group advantages")
        if not 0.0 < self.grad_timestep_fraction <= 1.0:
            raise ValueError("grad_timestep_fraction must lie in (0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class Trajectory:
    records: list[TransitionRecord]
    final: LigandCloud  # decoded terminal ligand
    oracle: OracleVector | None = None


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    pocket: PocketCloud
    stride: int
    grid: list[tuple[int, int]]
    packed: PackedBatch = None

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)


def _packed_arrays(batch_states: list[tuple[np.ndarray, np.ndarray]], packed, pocket, t_frac):
    coords = pack_coords(
        packed, [c for c, _ in batch_states], [pocket.coords] * packed.n_complexes
    )
    feats = pack_node_features(
        packed, [f for _, f in batch_states], [pocket.types] * packed.n_complexes, t_frac
    )
    return coords, feats


def _packed_mu(arrays, packed, pocket, z_list, sched, t, s):
    """Reverse-transition mean over a packed batch (tensor-aware)."""
    po = posterior_params(sched, s, t)
    coords, feats = _packed_arrays(z_list, packed, pocket, t / sched.T)
    eps_c, eps_f = packed_forward(arrays, coords, feats, packed)
    z_c = np.concatenate([c for c, _ in z_list])
    z_f = np.concatenate([f for _, f in z_list])
    m_c, m_f = predict_clean_arrays(sched, z_c, z_f, eps_c, eps_f, t)
    # re-project the mean: keeps accumulated CoM float error (amplified by
    # the 1/alpha_t reconstruction at low-signal steps) from drifting
    mu_c = ad.segment_mean_subtract(po.coef_zt * z_c + po.coef_m * m_c, packed.lig_starts)
    mu_f = po.coef_zt * z_f + po.coef_m * m_f
    return mu_c, mu_f, po


def _logp_terms(mu_c, mu_f, act_c, act_f, sigma_q, packed):
    """Per-complex Gaussian log-density over stored components, (B, 1)."""
    diff_c = act_c - mu_c
    diff_f = act_f - mu_f
    row = ad.sum_axis(ad.square(diff_c), 1, keepdims=True) + ad.sum_axis(
        ad.square(diff_f), 1, keepdims=True
    )
    ssq = ad.segment_sum(row, packed.lig_starts)
    n_atoms = np.asarray(packed.n_ligand, dtype=np.float64)[:, None]
    dims = (3 + K_LIGAND_TYPES) * n_atoms
    const = -0.5 * dims * (LOG_2PI + 2.0 * math.log(sigma_q))
    return ssq * (-0.5 / sigma_q**2) + const


def rollout(
    params: DenoiserParams,
    pocket: PocketCloud,
    sched: Schedule,
    cfg: PpoConfig,
    sampler: SizeSampler,
    base_seed: int,
    traj_offset: int = 0,
) -> RolloutBatch:
    """Sample a batch of denoising trajectories from the current policy.

    Trajectory i uses the stream seeded with base_seed + traj_offset + i,
    drawing in a fixed order (size, prior, one noise pair per transition).
    """
    n = cfg.batch_size
    streams = [np.random.default_rng(base_seed + traj_offset + i) for i in range(n)]
    sizes = [sample_ligand_size(sampler, pocket.n_atoms, streams[i]) for i in range(n)]
    priors = [sample_prior(sched, sizes[i], pocket, streams[i]) for i in range(n)]
    packed = build_packed_batch([(nl, pocket.n_atoms) for nl in sizes])
    grid = coarse_grid(sched.T, cfg.stride)

    z_list = [(st.z.coords, st.z.features) for st in priors]
    records: list[list[TransitionRecord]] = [[] for _ in range(n)]
    for t, s in grid:
        mu_c, mu_f, po = _packed_mu(params.arrays, packed, pocket, z_list, sched, t, s)
        if not (np.all(np.isfinite(mu_c)) and np.all(np.isfinite(mu_f))):
            raise ValueError("non-finite transition mean during rollout")
        new_z = []
        for i in range(n):
            lo, hi = packed.lig_starts[i], packed.lig_starts[i + 1]
            eps_c = project_com_free(streams[i].standard_normal((sizes[i], 3)))
            eps_f = streams[i].standard_normal((sizes[i], K_LIGAND_TYPES))
            new_z.append((mu_c[lo:hi] + po.sigma_q * eps_c, mu_f[lo:hi] + po.sigma_q * eps_f))
        act_c = np.concatenate([c for c, _ in new_z])
        act_f = np.concatenate([f for _, f in new_z])
        # same code path as the surrogate re-evaluation, so stored log-densities
        # reproduce bitwise at unchanged parameters
        logps = _logp_terms(mu_c, mu_f, act_c, act_f, po.sigma_q, packed)
        for i in range(n):
            state = NoisyState(
                z=LigandCloud(coords=z_list[i][0], features=z_list[i][1]), t=t, pocket=pocket
            )
            records[i].append(
                TransitionRecord(
                    state=state,
                    action=LigandCloud(*new_z[i]),
                    logp=float(logps[i, 0]),
                    s=s,
                )
            )
        z_list = new_z

    trajectories = [
        Trajectory(records=records[i], final=decode(LigandCloud(*z_list[i]))) for i in range(n)
    ]
    return RolloutBatch(trajectories=trajectories, pocket=pocket, stride=cfg.stride, grid=grid, packed=packed)


def group_advantages(rewards) -> np.ndarray:
    """Critic-free advantages: z-scored rewards within the sampled group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least 2 rewards")
    std = r.std()
    if std < EPS_STD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def _chunk_objective(arrays, batch: RolloutBatch, advantages, clip_eps, sched, k: int):
    """Sum of clipped-surrogate terms for grid index k (tensor-aware)."""
    recs = [traj.records[k] for traj in batch.trajectories]
    t, s = batch.grid[k]
    z_list = [(r.state.z.coords, r.state.z.features) for r in recs]
    mu_c, mu_f, po = _packed_mu(arrays, batch.packed, batch.pocket, z_list, sched, t, s)
    act_c = np.concatenate([r.action.coords for r in recs])
    act_f = np.concatenate([r.action.features for r in recs])
    logp = _logp_terms(mu_c, mu_f, act_c, act_f, po.sigma_q, batch.packed)
    logp_old = np.array([[r.logp] for r in recs])
    ratio = ad.exp(ad.clip(logp - logp_old, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    adv = np.asarray(advantages, dtype=np.float64)[:, None]
    term = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    return ad.total(term)


def _chunk_score(arrays, batch: RolloutBatch, advantages, sched, k: int):
    """Sum of advantage-weighted log-densities for grid index k (tensor-aware)."""
    recs = [traj.records[k] for traj in batch.trajectories]
    t, s = batch.grid[k]
    z_list = [(r.state.z.coords, r.state.z.features) for r in recs]
    mu_c, mu_f, po = _packed_mu(arrays, batch.packed, batch.pocket, z_list, sched, t, s)
    act_c = np.concatenate([r.action.coords for r in recs])
    act_f = np.concatenate([r.action.features for r in recs])
    logp = _logp_terms(mu_c, mu_f, act_c, act_f, po.sigma_q, batch.packed)
    adv = np.asarray(advantages, dtype=np.float64)[:, None]
    return ad.total(logp * adv)


def ppo_loss(
    params,
    batch: RolloutBatch,
    advantages,
    clip_eps: float,
    sched: Schedule,
    grid_indices=None,
) -> float:
    """Clipped-surrogate objective (a maximization target).

    Mean over trajectories and the selected timesteps of
    min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
    """
    arrays = params.arrays if isinstance(params, DenoiserParams) else params
    indices = range(len(batch.grid)) if grid_indices is None else grid_indices
    indices = list(indices)
    total = 0.0
    for k in indices:
        total += float(ad.value_of(_chunk_objective(arrays, batch, advantages, clip_eps, sched, k)))
    return total / (batch.n_trajectories * len(indices))


def ppo_gradient(
    params: DenoiserParams,
    batch: RolloutBatch,
    advantages,
    clip_eps: float,
    sched: Schedule,
    grid_indices=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Value and parameter gradient of ppo_loss, accumulated chunkwise."""
    indices = range(len(batch.grid)) if grid_indices is None else grid_indices
    indices = list(indices)
    denom = batch.n_trajectories * len(indices)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    total = 0.0
    for k in indices:
        view = params.tensor_view()
        obj = _chunk_objective(view, batch, advantages, clip_eps, sched, k)
        total += float(obj.value)
        ad.backward(obj)
        for name, t in view.items():
            if t.grad is not None:
                grads[name] += t.grad
    for name in grads:
        grads[name] /= denom
    return total / denom, grads


def policy_gradient_terms(
    params: DenoiserParams, batch: RolloutBatch, advantages, sched: Schedule
) -> dict[str, np.ndarray]:
    """Vanilla score-function gradient mean(A * grad logp) over the batch."""
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    denom = batch.n_trajectories * len(batch.grid)
    for k in range(len(batch.grid)):
        view = params.tensor_view()
        obj = _chunk_score(view, batch, advantages, sched, k)
        ad.backward(obj)
        for name, t in view.items():
            if t.grad is not None:
                grads[name] += t.grad
    return {k: g / denom for k, g in grads.items()}


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: DenoiserParams) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.arrays.items()},
            v={k: np.zeros_like(v) for k, v in params.arrays.items()},
            step=0,
        )


def update_step(
    params: DenoiserParams,
    opt: AdamWState,
    gradient: dict[str, np.ndarray],
    cfg: PpoConfig,
) -> tuple[DenoiserParams, AdamWState]:
    """One AdamW descent step with decoupled weight decay.

    Callers maximizing an objective pass the gradient of its negation. A
    non-finite gradient skips the update (with a warning) and leaves both
    parameters and moments untouched.
    """
    if any(not np.all(np.isfinite(g)) for g in gradient.values()):
        log.warning("skipping update: non-finite gradient")
        return params, opt
    new_params = params.copy()
    new_opt = AdamWState(
        m={k: v.copy() for k, v in opt.m.items()},
        v={k: v.copy() for k, v in opt.v.items()},
        step=opt.step + 1,
    )
    k = new_opt.step
    bc1 = 1.0 - ADAM_BETA1**k
    bc2 = 1.0 - ADAM_BETA2**k
    for name, g in gradient.items():
        m = new_opt.m[name]
        v = new_opt.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        theta = new_params.arrays[name]
        theta -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        theta -= cfg.learning_rate * cfg.weight_decay * theta
    return new_params, new_opt


def _history_row(iteration: int, rb: RewardBatch) -> dict:
    mask = rb.valid_mask
    row = {"iteration": iteration, "invalid_rate": float(1.0 - mask.mean())}
    vals = {
        "affinity": np.array([o.affinity for o, ok in zip(rb.oracles, mask) if ok]),
        "qed": np.array([o.qed_like for o, ok in zip(rb.oracles, mask) if ok]),
        "sa": np.array([o.sa_like for o, ok in zip(rb.oracles, mask) if ok]),
        "diversity": rb.diversity if rb.diversity is not None else np.zeros(0),
    }
    for name, v in vals.items():
        row[f"{name}_mean"] = float(v.mean()) if v.size else float("nan")
        row[f"{name}_std"] = float(v.std()) if v.size else float("nan")
    row["composite_mean"] = float(rb.composite.mean())
    row["composite_std"] = float(rb.composite.std())
    return row


def finetune(
    pocket: PocketCloud,
    init_params: DenoiserParams,
    cfg: PpoConfig,
    sched: Schedule,
    sampler: SizeSampler,
    seed: int,
    reward_weights: dict[str, float] | None = None,
    checkpoint_callback=None,
) -> tuple[DenoiserParams, list[dict], list[dict]]:
    """The full policy-optimization loop for one pocket.

    Returns (final params, per-iteration history rows, harvested pool of
    all decoded ligands with their oracle values).
    """
    params = init_params.copy()
    opt = AdamWState.for_params(params)
    history: list[dict] = []
    pool: list[dict] = []
    subset_rng = np.random.default_rng([seed, 0xD5])
    n_grid = len(coarse_grid(sched.T, cfg.stride))
    n_sub = max(1, math.ceil(cfg.grad_timestep_fraction * n_grid))

    if cfg.n_updates == 0:
        # stats-only pass: record the initial policy's iteration-0 row
        batch = rollout(params, pocket, sched, cfg, sampler, seed, traj_offset=0)
        rb = build_reward_batch([traj.final for traj in batch.trajectories], pocket, reward_weights)
        history.append(_history_row(0, rb))
        return params, history, pool

    for iteration in range(cfg.n_updates):
        batch = rollout(
            params, pocket, sched, cfg, sampler, seed, traj_offset=iteration * cfg.batch_size
        )
        ligands = [traj.final for traj in batch.trajectories]
        rb = build_reward_batch(ligands, pocket, reward_weights)
        for traj, oracle in zip(batch.trajectories, rb.oracles):
            traj.oracle = oracle
        history.append(_history_row(iteration, rb))
        for i, (traj, oracle) in enumerate(zip(batch.trajectories, rb.oracles)):
            pool.append(
                {
                    "iteration": iteration,
                    "trajectory": i,
                    "coords": traj.final.coords.tolist(),
                    "types": traj.final.type_indices.tolist(),
                    **oracle.to_dict(),
                }
            )
        if not rb.valid_mask.any():
            log.warning("iteration %d: all ligands invalid, skipping update", iteration)
            if checkpoint_callback is not None:
                checkpoint_callback(iteration, params, opt)
            continue
        advantages = group_advantages(rb.composite)
        rb.advantages = advantages
        for _ in range(cfg.epochs_per_batch):
            if n_sub < n_grid:
                indices = np.sort(subset_rng.choice(n_grid, size=n_sub, replace=False))
            else:
                indices = np.arange(n_grid)
            _, grads = ppo_gradient(params, batch, advantages, cfg.clip_eps, sched, indices)
            neg = {k: -g for k, g in grads.items()}
            params, opt = update_step(params, opt, neg, cfg)
        if checkpoint_callback is not None:
            checkpoint_callback(iteration, params, opt)
    return params, history, pool


def topn_harvest(pool: list[dict], n: int) -> list[dict]:
    """Best n valid pool entries by the weighted z-score; exhaustive sort."""
    from .rewards import topn_score

    valid = [e for e in pool if e["valid"]]
    if not valid:
        return []
    z = topn_score(
        [e["affinity"] for e in valid],
        [e["qed_like"] for e in valid],
        [e["sa_like"] for e in valid],
    )
    order = sorted(range(len(valid)), key=lambda i: (-z[i], i))
    return [dict(valid[i], topn_z=float(z[i])) for i in order[:n]]
