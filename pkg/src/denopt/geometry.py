"""Point-cloud types for pockets and ligands, plus the rigid-transform helpers.

Coordinates are plain float64 arrays in arbitrary length units. "Center of
mass" always means the unweighted coordinate mean. Atom-type alphabets are
fixed per run: K_P pocket types and K_M ligand types; clean ligand features
are one-hot vectors scaled by FEATURE_SCALE, noisy ligand features are
unconstrained reals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "K_POCKET_TYPES",
    "K_LIGAND_TYPES",
    "FEATURE_SCALE",
    "PocketCloud",
    "LigandCloud",
    "O3Transform",
    "center_on_ligand",
    "project_com_free",
    "apply_o3",
    "sample_random_o3",
    "clouds_to_xyz",
    "cloud_from_xyz",
]

K_POCKET_TYPES = 4
K_LIGAND_TYPES = 5
FEATURE_SCALE = 0.25


def _as_coords(coords) -> np.ndarray:
    arr = np.ascontiguousarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ValueError(f"coords must be (N, 3) with N >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coords contain non-finite values")
    return arr


@dataclass(frozen=True)
class PocketCloud:
    """Protein-pocket point cloud: coordinates plus one-hot atom types."""

    coords: np.ndarray
    types: np.ndarray  # (N_P, K_POCKET_TYPES) one-hot

    def __post_init__(self):
        coords = _as_coords(self.coords)
        types = np.ascontiguousarray(self.types, dtype=np.float64)
        if types.shape != (coords.shape[0], K_POCKET_TYPES):
            raise ValueError(f"types must be ({coords.shape[0]}, {K_POCKET_TYPES})")
        if not np.allclose(types.sum(axis=1), 1.0):
            raise ValueError("pocket type rows must sum to 1")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "types", types)

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]

    @property
    def type_indices(self) -> np.ndarray:
        return np.argmax(self.types, axis=1)


@dataclass(frozen=True)
class LigandCloud:
    """Ligand point cloud.

    For clean ligands `features` rows are one-hot * FEATURE_SCALE; during
    diffusion they hold unconstrained noisy values.
    """

    coords: np.ndarray
    features: np.ndarray  # (N_M, K_LIGAND_TYPES)

    def __post_init__(self):
        coords = _as_coords(self.coords)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.shape != (coords.shape[0], K_LIGAND_TYPES):
            raise ValueError(f"features must be ({coords.shape[0]}, {K_LIGAND_TYPES})")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]

    @property
    def type_indices(self) -> np.ndarray:
        return np.argmax(self.features, axis=1)

    def is_clean(self) -> bool:
        """True when every feature row is one-hot * FEATURE_SCALE."""
        onehot = np.zeros_like(self.features)
        onehot[np.arange(self.n_atoms), self.type_indices] = FEATURE_SCALE
        return bool(np.array_equal(onehot, self.features))

    @classmethod
    def from_types(cls, coords, type_indices) -> "LigandCloud":
        idx = np.asarray(type_indices, dtype=np.int64)
        feats = np.zeros((idx.shape[0], K_LIGAND_TYPES))
        feats[np.arange(idx.shape[0]), idx] = FEATURE_SCALE
        return cls(coords=coords, features=feats)


@dataclass(frozen=True)
class O3Transform:
    """Orthogonal 3x3 transform (rotation or rotoreflection)."""

    rotation: np.ndarray

    def __post_init__(self):
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-10:
            raise ValueError("matrix is not orthogonal")
        object.__setattr__(self, "rotation", rot)

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.rotation))


def center_on_ligand(pocket: PocketCloud, ligand: LigandCloud) -> tuple[PocketCloud, LigandCloud]:
    """Shift the whole complex so the ligand coordinate mean is at the origin."""
    shift = ligand.coords.mean(axis=0)
    return (
        PocketCloud(coords=pocket.coords - shift, types=pocket.types),
        LigandCloud(coords=ligand.coords - shift, features=ligand.features),
    )


def project_com_free(arr: np.ndarray) -> np.ndarray:
    """Remove the per-column mean; idempotent linear projection."""
    arr = np.asarray(arr, dtype=np.float64)
    return arr - arr.mean(axis=0, keepdims=True)


def apply_o3(tf: O3Transform, coords: np.ndarray) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ tf.rotation.T


def sample_random_o3(seed) -> O3Transform:
    """Haar-ish random orthogonal matrix; proper/improper with equal probability.

    Accepts either an integer seed or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if rng.random() < 0.5:
        q = q @ np.diag([1.0, 1.0, -1.0])
    return O3Transform(rotation=q)


def clouds_to_xyz(cloud, role: str) -> str:
    """Extended-XYZ-like text: count line, role line, then `type x y z` rows."""
    if role not in ("pocket", "ligand"):
        raise ValueError(f"role must be 'pocket' or 'ligand', got {role!r}")
    lines = [str(cloud.n_atoms), f"role={role}"]
    for ti, xyz in zip(cloud.type_indices, cloud.coords):
        x, y, z = (float(v) for v in xyz)
        lines.append(f"{int(ti)} {x!r} {y!r} {z!r}")
    return "\n".join(lines) + "\n"


def cloud_from_xyz(text: str):
    """Inverse of clouds_to_xyz; returns a PocketCloud or LigandCloud."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValueError("truncated xyz text")
    n = int(lines[0])
    role = lines[1].strip()
    if role not in ("role=pocket", "role=ligand"):
        raise ValueError(f"bad role line {lines[1]!r}")
    if len(lines) != 2 + n:
        raise ValueError(f"expected {n} atom lines, found {len(lines) - 2}")
    types, coords = [], []
    for ln in lines[2:]:
        parts = ln.split()
        types.append(int(parts[0]))
        coords.append([float(parts[1]), float(parts[2]), float(parts[3])])
    coords = np.asarray(coords)
    idx = np.asarray(types)
    if role == "role=ligand":
        return LigandCloud.from_types(coords, idx)
    onehot = np.zeros((n, K_POCKET_TYPES))
    onehot[np.arange(n), idx] = 1.0
    return PocketCloud(coords=coords, types=onehot)
