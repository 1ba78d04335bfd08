"""Reward oracles, rank-based score normalization, and batch reward assembly.

The oracles are deterministic synthetic stand-ins for docking/property
scorers: a truncated pairwise-energy affinity (lower is better), a
composition/size score in [0,1], a regularity/connectivity score in [0,1],
and a validity predicate. Raw values are never mixed directly; each
objective is rank-transformed within the batch before the weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .geometry import K_LIGAND_TYPES, LigandCloud, PocketCloud

__all__ = [
    "OracleVector",
    "RewardBatch",
    "OracleSpec",
    "DEFAULT_WEIGHTS",
    "TOPN_WEIGHTS",
    "PREFERRED_LIGAND_TYPE",
    "TARGET_TYPE_HISTOGRAM",
    "gaussian_rank_transform",
    "ligand_descriptor",
    "diversity_scores",
    "composite_reward",
    "invalid_penalty",
    "oracle_affinity",
    "oracle_qed_like",
    "oracle_sa_like",
    "oracle_validity",
    "evaluate_oracles",
    "build_reward_batch",
    "topn_score",
]

# Pairwise-energy constants (affinity oracle)
LJ_SIGMA = 1.0
LJ_CLIP = (-1.0, 10.0)
CONTACT_RADIUS = 1.5
CONTACT_BONUS = -0.5

# Validity / connectivity thresholds
MIN_PAIR_DIST = 0.8
BOND_CUTOFF = 1.6

# Composition target: pocket type p prefers ligand type p; type 4 is neutral.
PREFERRED_LIGAND_TYPE = {0: 0, 1: 1, 2: 2, 3: 3}
TARGET_TYPE_HISTOGRAM = np.array([0.225, 0.225, 0.225, 0.225, 0.1])
IDEAL_LIGAND_SIZE = 11

# Weighted-sum reward: 0.2 qed + 0.2 sa + 0.5 affinity(reversed) + 0.1 diversity
DEFAULT_WEIGHTS = {"qed": 0.2, "sa": 0.2, "affinity": 0.5, "diversity": 0.1}
# Top-N harvesting: z = 5 norm(|affinity|) + 1 norm(qed) + 1.5 norm(sa)
TOPN_WEIGHTS = (5.0, 1.0, 1.5)

FALLBACK_PENALTY = -3.0
EPS_STD = 1e-8

DESCRIPTOR_DIST_BINS = 16
DESCRIPTOR_DIST_RANGE = (0.0, 8.0)


@dataclass(frozen=True)
class OracleVector:
    """Raw per-ligand oracle outputs."""

    affinity: float
    qed_like: float
    sa_like: float
    valid: bool
    descriptor: np.ndarray

    def to_dict(self) -> dict:
        return {
            "affinity": self.affinity,
            "qed_like": self.qed_like,
            "sa_like": self.sa_like,
            "valid": self.valid,
        }


@dataclass
class RewardBatch:
    """One sampled batch: raw oracles, transformed scores, composites, advantages."""

    oracles: list[OracleVector]
    transformed: dict[str, np.ndarray] = field(default_factory=dict)
    diversity: np.ndarray | None = None
    composite: np.ndarray | None = None
    advantages: np.ndarray | None = None

    @property
    def valid_mask(self) -> np.ndarray:
        return np.array([o.valid for o in self.oracles], dtype=bool)


@dataclass(frozen=True)
class OracleSpec:
    """Pluggable per-ligand objective: callable plus optimization direction."""

    name: str
    evaluate: Callable[[LigandCloud, PocketCloud], float]
    direction: str  # "max" or "min"

    def __post_init__(self):
        if self.direction not in ("max", "min"):
            raise ValueError(f"direction must be 'max' or 'min', got {self.direction!r}")


def gaussian_rank_transform(values) -> np.ndarray:
    """Ranks (ties averaged) -> (rank - 0.5)/n -> inverse normal CDF.

    Depends only on the ordering of the inputs, so it is exactly invariant
    under strictly increasing transformations.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1 or vals.size < 1:
        raise ValueError("expected a non-empty 1-d array")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite oracle values")
    n = vals.size
    order = np.argsort(vals, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(1, n + 1, dtype=np.float64)
    # average ranks over ties
    uniq, inv, counts = np.unique(vals, return_inverse=True, return_counts=True)
    if uniq.size != n:
        sums = np.zeros(uniq.size)
        np.add.at(sums, inv, ranks)
        ranks = (sums / counts)[inv]
    u = (ranks - 0.5) / n
    return ndtri(u)


def _pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def ligand_descriptor(ligand: LigandCloud) -> np.ndarray:
    """Rotation/permutation-invariant fingerprint analogue.

    Concatenation of the normalized type histogram and a 16-bin histogram of
    pairwise distances over [0, 8] normalized by the pair count.
    """
    n = ligand.n_atoms
    hist_t = np.bincount(ligand.type_indices, minlength=K_LIGAND_TYPES).astype(np.float64)
    hist_t /= n
    if n >= 2:
        d = _pairwise_distances(ligand.coords)
        iu = np.triu_indices(n, k=1)
        hist_d, _ = np.histogram(d[iu], bins=DESCRIPTOR_DIST_BINS, range=DESCRIPTOR_DIST_RANGE)
        hist_d = hist_d.astype(np.float64) / iu[0].size
    else:
        hist_d = np.zeros(DESCRIPTOR_DIST_BINS)
    return np.concatenate([hist_t, hist_d])


def diversity_scores(descriptors, *, binary_tanimoto: bool = False) -> np.ndarray:
    """score_i = 1 - mean_{j != i} similarity(descriptor_i, descriptor_j).

    Similarity is cosine by default; with binary_tanimoto=True descriptors
    are thresholded at their median bin value and compared by Tanimoto.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    if desc.ndim != 2:
        raise ValueError("descriptors must be (batch, dim)")
    n = desc.shape[0]
    if n < 2:
        return np.zeros(n)
    if binary_tanimoto:
        bits = desc > np.median(desc, axis=1, keepdims=True)
        inter = (bits[:, None, :] & bits[None, :, :]).sum(axis=-1).astype(np.float64)
        union = (bits[:, None, :] | bits[None, :, :]).sum(axis=-1).astype(np.float64)
        sim = inter / np.maximum(union, 1.0)
    else:
        norms = np.linalg.norm(desc, axis=1)
        denom = np.maximum(norms[:, None] * norms[None, :], EPS_STD)
        sim = (desc @ desc.T) / denom
    np.fill_diagonal(sim, 0.0)
    return 1.0 - sim.sum(axis=1) / (n - 1)


def invalid_penalty(valid_rewards) -> float:
    """mu - 3 sigma of the valid composite rewards (population std)."""
    vals = np.asarray(valid_rewards, dtype=np.float64)
    if vals.size == 0:
        return FALLBACK_PENALTY
    return float(vals.mean() - 3.0 * vals.std())


def composite_reward(batch: RewardBatch, weights: dict[str, float] | None = None) -> np.ndarray:
    """Weighted sum of the batch's rank-transformed scores.

    Valid ligands get the weighted sum; invalid ligands get the batch
    penalty mu_B - 3 sigma_B computed from the valid composites.
    """
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    missing = set(weights) - set(batch.transformed)
    if missing:
        raise ValueError(f"weights refer to missing objectives: {sorted(missing)}")
    mask = batch.valid_mask
    n = mask.size
    out = np.zeros(n)
    valid_sum = np.zeros(int(mask.sum()))
    for name, w in weights.items():
        scores = np.asarray(batch.transformed[name], dtype=np.float64)
        if scores.shape != (int(mask.sum()),):
            raise ValueError(f"transformed scores for {name!r} have wrong length")
        valid_sum += w * scores
    out[mask] = valid_sum
    if not np.all(mask):
        out[~mask] = invalid_penalty(valid_sum)
    return out


def _neighbor_graph_components(coords: np.ndarray, cutoff: float) -> np.ndarray:
    """Connected-component label per atom under the distance cutoff."""
    n = coords.shape[0]
    adj = _pairwise_distances(coords) <= cutoff
    labels = np.full(n, -1, dtype=np.int64)
    comp = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = comp
        while stack:
            i = stack.pop()
            for j in np.nonzero(adj[i])[0]:
                if labels[j] < 0:
                    labels[j] = comp
                    stack.append(j)
        comp += 1
    return labels


def oracle_affinity(ligand: LigandCloud, pocket: PocketCloud) -> float:
    """Truncated pairwise-energy score over ligand-pocket pairs; lower is better.

    Each pair contributes 4((s/r)^12 - (s/r)^6) clipped to [-1, 10], plus a
    -0.5 bonus per contact (r < 1.5) whose ligand type matches the pocket
    type's preference.
    """
    diff = ligand.coords[:, None, :] - pocket.coords[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    r = np.maximum(r, 1e-12)
    inv6 = (LJ_SIGMA / r) ** 6
    lj = np.clip(4.0 * (inv6 * inv6 - inv6), LJ_CLIP[0], LJ_CLIP[1])
    lig_t = ligand.type_indices[:, None]
    poc_t = pocket.type_indices[None, :]
    preferred = np.zeros_like(r, dtype=bool)
    for p_type, l_type in PREFERRED_LIGAND_TYPE.items():
        preferred |= (poc_t == p_type) & (lig_t == l_type)
    bonus = CONTACT_BONUS * np.sum((r < CONTACT_RADIUS) & preferred)
    return float(lj.sum() + bonus)


def oracle_qed_like(ligand: LigandCloud) -> float:
    """Composition/size score in [0, 1]; 1.0 at the target histogram and size 11."""
    hist = np.bincount(ligand.type_indices, minlength=K_LIGAND_TYPES).astype(np.float64)
    hist /= ligand.n_atoms
    tv = 0.5 * np.abs(hist - TARGET_TYPE_HISTOGRAM).sum()
    size_term = abs(ligand.n_atoms - IDEAL_LIGAND_SIZE) / IDEAL_LIGAND_SIZE
    return float(np.clip(1.0 - 0.5 * tv - 0.5 * size_term, 0.0, 1.0))


def oracle_sa_like(ligand: LigandCloud) -> float:
    """Regularity score: exp(-var(nearest-neighbor dists)) * largest-component fraction."""
    n = ligand.n_atoms
    if n == 1:
        return 1.0
    d = _pairwise_distances(ligand.coords)
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    labels = _neighbor_graph_components(ligand.coords, BOND_CUTOFF)
    frac = np.bincount(labels).max() / n
    return float(np.exp(-nn.var()) * frac)


def oracle_validity(ligand: LigandCloud) -> bool:
    """True iff no pair is closer than 0.8 and the 1.6-cutoff graph is connected."""
    n = ligand.n_atoms
    if n == 1:
        return True
    d = _pairwise_distances(ligand.coords)
    np.fill_diagonal(d, np.inf)
    if d.min() < MIN_PAIR_DIST:
        return False
    return bool(_neighbor_graph_components(ligand.coords, BOND_CUTOFF).max() == 0)


def evaluate_oracles(ligand: LigandCloud, pocket: PocketCloud) -> OracleVector:
    """All oracles for one ligand; any oracle failure marks the ligand invalid."""
    try:
        return OracleVector(
            affinity=oracle_affinity(ligand, pocket),
            qed_like=oracle_qed_like(ligand),
            sa_like=oracle_sa_like(ligand),
            valid=oracle_validity(ligand),
            descriptor=ligand_descriptor(ligand),
        )
    except Exception:
        return OracleVector(
            affinity=float("nan"),
            qed_like=float("nan"),
            sa_like=float("nan"),
            valid=False,
            descriptor=np.zeros(K_LIGAND_TYPES + DESCRIPTOR_DIST_BINS),
        )


def build_reward_batch(
    ligands: list[LigandCloud],
    pocket: PocketCloud,
    weights: dict[str, float] | None = None,
    extra_oracles: list[OracleSpec] | None = None,
) -> RewardBatch:
    """Evaluate oracles, rank-transform each objective over the valid subset,
    and assemble composite rewards (invalid ligands get the batch penalty).

    Affinity is a minimize-objective: values are negated before the rank
    transform. Diversity is computed over valid-ligand descriptors only.
    """
    batch = RewardBatch(oracles=[evaluate_oracles(lig, pocket) for lig in ligands])
    mask = batch.valid_mask
    valid_idx = np.nonzero(mask)[0]
    if valid_idx.size > 0:
        aff = np.array([batch.oracles[i].affinity for i in valid_idx])
        qed = np.array([batch.oracles[i].qed_like for i in valid_idx])
        sa = np.array([batch.oracles[i].sa_like for i in valid_idx])
        desc = np.stack([batch.oracles[i].descriptor for i in valid_idx])
        div = diversity_scores(desc)
        batch.diversity = div
        batch.transformed = {
            "affinity": gaussian_rank_transform(-aff),
            "qed": gaussian_rank_transform(qed),
            "sa": gaussian_rank_transform(sa),
            "diversity": gaussian_rank_transform(div),
        }
        for spec in extra_oracles or []:
            vals = np.array([spec.evaluate(ligands[i], pocket) for i in valid_idx])
            batch.transformed[spec.name] = gaussian_rank_transform(
                -vals if spec.direction == "min" else vals
            )
    else:
        batch.diversity = np.zeros(0)
        batch.transformed = {k: np.zeros(0) for k in ("affinity", "qed", "sa", "diversity")}
    batch.composite = composite_reward(batch, weights)
    return batch


def topn_score(affinity, qed_like, sa_like) -> np.ndarray:
    """Weighted z-score for top-N harvesting over a pool.

    z = 5 norm(|affinity|) + 1 norm(qed) + 1.5 norm(sa), where norm is the
    z-score over the pool. Affinity magnitude counts favorable (negative)
    energy only, so unfavorable poses are not rewarded for magnitude.
    """
    aff = np.asarray(affinity, dtype=np.float64)
    qed = np.asarray(qed_like, dtype=np.float64)
    sa = np.asarray(sa_like, dtype=np.float64)
    mag = np.abs(np.minimum(aff, 0.0))

    def norm(x):
        return (x - x.mean()) / max(x.std(), EPS_STD)

    w_aff, w_qed, w_sa = TOPN_WEIGHTS
    return w_aff * norm(mag) + w_qed * norm(qed) + w_sa * norm(sa)
