"""Deterministic synthetic pocket/ligand worlds.

Each complex is generated independently from (seed, index): a typed
hemispherical pocket shell opening toward +z around the cavity origin, and a
connected chain-with-branches ligand placed inside the cavity. Ligand sizes
are coupled to pocket sizes so the empirical conditional size distribution
carries signal, and ligand types are biased toward the pocket's preferred
composition so the reward oracles are learnable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import K_LIGAND_TYPES, K_POCKET_TYPES, LigandCloud, PocketCloud
from .rewards import PREFERRED_LIGAND_TYPE

__all__ = [
    "WorldConfig",
    "SizeSampler",
    "WorldGenerationError",
    "generate_complex",
    "build_size_sampler",
    "sample_ligand_size",
]

# Placement margins keep every generated ligand comfortably inside the
# validity oracle's thresholds (min pair dist 0.8, connectivity cutoff 1.6):
# bond lengths straddle the pair-energy optimum 2^(1/6) and leave ~0.2 units
# of noise margin on both thresholds.
PARENT_DIST_RANGE = (1.05, 1.35)
MIN_SELF_DIST = 1.0
MIN_POCKET_DIST = 1.05
CAVITY_FRACTION = 0.75
DOMINANT_TYPE_PROB = 0.6
PREFERRED_COMPOSITION_PROB = 0.5
MAX_ATOM_RETRIES = 200
MAX_BUILD_RETRIES = 50


class WorldGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    pocket_radius: float = 4.0
    n_pockets: int = 50
    pocket_size_range: tuple[int, int] = (15, 25)
    ligand_size_range: tuple[int, int] = (8, 14)
    seed: int = 0

    def __post_init__(self):
        if self.pocket_radius <= 0:
            raise ValueError("pocket_radius must be positive")
        for name in ("pocket_size_range", "ligand_size_range"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValueError(f"{name} must be a non-empty range, got ({lo}, {hi})")
        if self.n_pockets < 1:
            raise ValueError("n_pockets must be >= 1")


@dataclass(frozen=True)
class SizeSampler:
    """Empirical conditional distribution of ligand size given pocket size."""

    table: dict[int, dict[int, float]]

    def __post_init__(self):
        if not self.table:
            raise ValueError("size sampler needs at least one complex")
        for np_bucket, dist in self.table.items():
            total = sum(dist.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"conditional for N_P={np_bucket} sums to {total}")


def _rng_for(cfg: WorldConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index])


def _ligand_size_for(cfg: WorldConfig, n_pocket: int, rng: np.random.Generator) -> int:
    p_lo, p_hi = cfg.pocket_size_range
    l_lo, l_hi = cfg.ligand_size_range
    frac = 0.5 if p_hi == p_lo else (n_pocket - p_lo) / (p_hi - p_lo)
    base = l_lo + frac * (l_hi - l_lo)
    jitter = int(rng.integers(-1, 2))
    return int(np.clip(round(base) + jitter, l_lo, l_hi))


def _place_pocket(cfg: WorldConfig, rng: np.random.Generator) -> PocketCloud:
    p_lo, p_hi = cfg.pocket_size_range
    n = int(rng.integers(p_lo, p_hi + 1))
    dirs = np.empty((n, 3))
    count = 0
    while count < n:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            continue
        v /= norm
        if v[2] <= 0.25:  # bowl opening toward +z
            dirs[count] = v
            count += 1
    radii = cfg.pocket_radius * (1.0 + 0.05 * rng.standard_normal(n))
    coords = dirs * radii[:, None]

    dominant = int(rng.integers(0, K_POCKET_TYPES))
    types = np.where(
        rng.random(n) < DOMINANT_TYPE_PROB,
        dominant,
        rng.integers(0, K_POCKET_TYPES, n),
    )
    onehot = np.zeros((n, K_POCKET_TYPES))
    onehot[np.arange(n), types] = 1.0
    return PocketCloud(coords=coords, types=onehot)


def _sample_ligand_types(n: int, dominant_pocket_type: int, rng: np.random.Generator) -> np.ndarray:
    preferred = PREFERRED_LIGAND_TYPE[dominant_pocket_type]
    return np.where(
        rng.random(n) < PREFERRED_COMPOSITION_PROB,
        preferred,
        rng.integers(0, K_LIGAND_TYPES, n),
    )


def _place_ligand_coords(
    cfg: WorldConfig, pocket_coords: np.ndarray, n: int, rng: np.random.Generator, index: int
) -> np.ndarray:
    """Sequential chain-with-branches placement inside the cavity."""
    max_radius = CAVITY_FRACTION * cfg.pocket_radius
    for _ in range(MAX_BUILD_RETRIES):
        coords = np.empty((n, 3))
        coords[0] = rng.standard_normal(3) * 0.3
        ok = True
        for k in range(1, n):
            placed = False
            for _ in range(MAX_ATOM_RETRIES):
                # branch off the previous atom most of the time
                parent = k - 1 if rng.random() < 0.7 else int(rng.integers(0, k))
                direction = rng.standard_normal(3)
                direction /= max(np.linalg.norm(direction), 1e-9)
                dist = rng.uniform(*PARENT_DIST_RANGE)
                cand = coords[parent] + direction * dist
                if np.linalg.norm(cand) > max_radius:
                    continue
                if k > 0 and np.min(np.linalg.norm(coords[:k] - cand, axis=1)) < MIN_SELF_DIST:
                    continue
                if np.min(np.linalg.norm(pocket_coords - cand, axis=1)) < MIN_POCKET_DIST:
                    continue
                coords[k] = cand
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return coords
    raise WorldGenerationError(f"ligand placement failed for complex index {index}")


def generate_complex(cfg: WorldConfig, index: int) -> tuple[PocketCloud, LigandCloud]:
    """Deterministically generate complex `index` of the world."""
    if not 0 <= index < cfg.n_pockets:
        raise ValueError(f"index must lie in 0..{cfg.n_pockets - 1}, got {index}")
    rng = _rng_for(cfg, index)
    pocket = _place_pocket(cfg, rng)
    dominant = int(np.argmax(pocket.types.sum(axis=0)))
    n_lig = _ligand_size_for(cfg, pocket.n_atoms, rng)
    coords = _place_ligand_coords(cfg, pocket.coords, n_lig, rng, index)
    types = _sample_ligand_types(n_lig, dominant, rng)
    return pocket, LigandCloud.from_types(coords, types)


def build_size_sampler(complexes) -> SizeSampler:
    """Empirical p(N_M | N_P) from (pocket, ligand) pairs."""
    counts: dict[int, dict[int, int]] = {}
    for pocket, ligand in complexes:
        bucket = counts.setdefault(pocket.n_atoms, {})
        bucket[ligand.n_atoms] = bucket.get(ligand.n_atoms, 0) + 1
    table = {
        np_size: {nm: c / sum(dist.values()) for nm, c in sorted(dist.items())}
        for np_size, dist in sorted(counts.items())
    }
    return SizeSampler(table=table)


def sample_ligand_size(sampler: SizeSampler, n_pocket: int, rng: np.random.Generator) -> int:
    """Draw from the conditional histogram of the nearest populated bucket."""
    buckets = sorted(sampler.table)
    nearest = min(buckets, key=lambda b: (abs(b - n_pocket), b))
    dist = sampler.table[nearest]
    sizes = np.array(sorted(dist))
    probs = np.array([dist[s] for s in sizes])
    return int(rng.choice(sizes, p=probs))
