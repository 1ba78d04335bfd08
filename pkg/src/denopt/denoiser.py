"""Equivariant noise-prediction network over joint ligand/pocket graphs.

Message passing on the fully connected complex graph. Hidden features see
only squared distances, type channels, a ligand flag, and t/T, so they are
invariant under O(3); coordinate updates move ligand atoms along pairwise
difference vectors, so the coordinate output is equivariant. Pocket
coordinates are conditioning only and never move.

Complexes are packed: nodes and edges of a whole batch are concatenated so
every linear layer is one matrix product. The same forward code runs on
plain arrays (sampling) and on autodiff tensors (training).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    FEATURE_SCALE,
    K_LIGAND_TYPES,
    K_POCKET_TYPES,
    LigandCloud,
    PocketCloud,
    project_com_free,
)
from .schedule import Schedule

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "DenoiserOutput",
    "PackedBatch",
    "init_params",
    "forward",
    "packed_forward",
    "predict_clean",
    "predict_clean_arrays",
    "gradient",
]

N_NODE_FEATURES = K_POCKET_TYPES + K_LIGAND_TYPES + 2  # types, ligand flag, t/T


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 3
    hidden: int = 32

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1:
            raise ValueError("n_layers and hidden must be positive")


@dataclass
class DenoiserParams:
    """Named parameter arrays in a fixed serialization order."""

    config: DenoiserConfig
    arrays: dict[str, np.ndarray]

    def names(self) -> list[str]:
        out = ["embed_W", "embed_b"]
        for l in range(self.config.n_layers):
            out += [f"L{l}_e1_Wd", f"L{l}_e1_Ws", f"L{l}_e1_wd2", f"L{l}_e1_b"]
            for part in ("e2", "x1", "x2", "h1", "h2"):
                out += [f"L{l}_{part}_W", f"L{l}_{part}_b"]
        out += ["out_W", "out_b"]
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensor_view(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def check_finite(self) -> None:
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in parameter {k}")


def init_params(
    config: DenoiserConfig, rng: np.random.Generator, *, zero_heads: bool = True
) -> DenoiserParams:
    """Fan-in uniform initialization; output heads zeroed so eps_hat == 0."""
    h = config.hidden

    def linear(fan_in, fan_out, zero=False):
        if zero:
            return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
        bound = 1.0 / np.sqrt(fan_in)
        return (
            rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            rng.uniform(-bound, bound, size=fan_out),
        )

    arrays: dict[str, np.ndarray] = {}
    arrays["embed_W"], arrays["embed_b"] = linear(N_NODE_FEATURES, h)
    for l in range(config.n_layers):
        # edge-message input [h_dst | h_src | d2] is projected per block so
        # the wide gemm runs at node level
        bound = 1.0 / np.sqrt(2 * h + 1)
        arrays[f"L{l}_e1_Wd"] = rng.uniform(-bound, bound, size=(h, h))
        arrays[f"L{l}_e1_Ws"] = rng.uniform(-bound, bound, size=(h, h))
        arrays[f"L{l}_e1_wd2"] = rng.uniform(-bound, bound, size=h)
        arrays[f"L{l}_e1_b"] = rng.uniform(-bound, bound, size=h)
        arrays[f"L{l}_e2_W"], arrays[f"L{l}_e2_b"] = linear(h, h)
        arrays[f"L{l}_x1_W"], arrays[f"L{l}_x1_b"] = linear(h, h)
        arrays[f"L{l}_x2_W"], arrays[f"L{l}_x2_b"] = linear(h, 1, zero=zero_heads)
        arrays[f"L{l}_h1_W"], arrays[f"L{l}_h1_b"] = linear(2 * h, h)
        arrays[f"L{l}_h2_W"], arrays[f"L{l}_h2_b"] = linear(h, h)
    arrays["out_W"], arrays["out_b"] = linear(h, K_LIGAND_TYPES, zero=zero_heads)
    return DenoiserParams(config=config, arrays=arrays)


@dataclass(frozen=True)
class DenoiserOutput:
    """Predicted forward noise for one ligand (coordinates CoM-free)."""

    eps_coord: np.ndarray
    eps_feat: np.ndarray


@dataclass(frozen=True)
class PackedBatch:
    """Index structure for a batch of complexes flattened into one graph.

    Node order: per complex, ligand atoms then pocket atoms. Messages flow
    into ligand nodes from every other node of the same complex (ligand and
    pocket alike); pocket nodes are conditioning only, so they carry static
    embeddings and receive no messages. Edges are sorted by destination, so
    aggregation is a contiguous segment sum over ligand rows.
    """

    n_ligand: tuple[int, ...]
    n_pocket: tuple[int, ...]
    node_starts: np.ndarray  # (B+1,)
    lig_rows: np.ndarray  # packed indices of ligand nodes
    lig_starts: np.ndarray  # (B+1,) offsets into ligand-row space
    edge_src: np.ndarray  # global node index per edge
    edge_dst: np.ndarray  # global node index per edge (always a ligand node)
    edge_dst_lig: np.ndarray  # same edge's destination in ligand-row space
    lig_edge_starts: np.ndarray  # (sum N_lig + 1,) segment bounds by destination

    @property
    def n_complexes(self) -> int:
        return len(self.n_ligand)

    @property
    def n_nodes(self) -> int:
        return int(self.node_starts[-1])


def build_packed_batch(sizes: list[tuple[int, int]]) -> PackedBatch:
    """sizes: per complex (n_ligand, n_pocket); every complex needs >= 2 nodes."""
    n_lig = tuple(s[0] for s in sizes)
    n_poc = tuple(s[1] for s in sizes)
    totals = [a + b for a, b in sizes]
    if any(t < 2 for t in totals):
        raise ValueError("each complex needs at least 2 nodes")
    node_starts = np.concatenate([[0], np.cumsum(totals)])
    lig_rows, src_all, dst_all = [], [], []
    for b, (nl, npn) in enumerate(sizes):
        base = node_starts[b]
        n = nl + npn
        lig_rows.append(np.arange(base, base + nl))
        # (dst, src) pairs for every ligand dst and every other node, dst-major
        local = np.arange(n)
        dst = np.repeat(local[:nl], n - 1)
        src = np.concatenate([np.concatenate([local[:i], local[i + 1 :]]) for i in range(nl)])
        dst_all.append(dst + base)
        src_all.append(src + base)
    lig_rows = np.concatenate(lig_rows)
    edge_src = np.concatenate(src_all)
    edge_dst = np.concatenate(dst_all)
    per_lig_node = np.concatenate([np.full(nl, nl + npn - 1) for nl, npn in sizes])
    lig_edge_starts = np.concatenate([[0], np.cumsum(per_lig_node)])
    lig_starts = np.concatenate([[0], np.cumsum(n_lig)])
    # destination position within the ligand-row ordering
    lig_pos = np.full(int(node_starts[-1]), -1, dtype=np.int64)
    lig_pos[lig_rows] = np.arange(lig_rows.size)
    return PackedBatch(
        n_ligand=n_lig,
        n_pocket=n_poc,
        node_starts=node_starts.astype(np.int64),
        lig_rows=lig_rows.astype(np.int64),
        lig_starts=lig_starts.astype(np.int64),
        edge_src=edge_src.astype(np.int64),
        edge_dst=edge_dst.astype(np.int64),
        edge_dst_lig=lig_pos[edge_dst].astype(np.int64),
        lig_edge_starts=lig_edge_starts.astype(np.int64),
    )


def pack_coords(packed: PackedBatch, lig_coords: list[np.ndarray], poc_coords: list[np.ndarray]) -> np.ndarray:
    out = np.empty((packed.n_nodes, 3))
    for b in range(packed.n_complexes):
        base = packed.node_starts[b]
        nl = packed.n_ligand[b]
        out[base : base + nl] = lig_coords[b]
        out[base + nl : packed.node_starts[b + 1]] = poc_coords[b]
    return out


def pack_node_features(
    packed: PackedBatch,
    lig_feats: list[np.ndarray],
    poc_types: list[np.ndarray],
    t_frac,
) -> np.ndarray:
    """Input rows: [pocket one-hot | ligand channels | ligand flag | t/T]."""
    f = np.zeros((packed.n_nodes, N_NODE_FEATURES))
    t_per_complex = np.broadcast_to(np.asarray(t_frac, dtype=np.float64), (packed.n_complexes,))
    for b in range(packed.n_complexes):
        base = packed.node_starts[b]
        nl = packed.n_ligand[b]
        end = packed.node_starts[b + 1]
        f[base : base + nl, K_POCKET_TYPES : K_POCKET_TYPES + K_LIGAND_TYPES] = lig_feats[b]
        f[base : base + nl, K_POCKET_TYPES + K_LIGAND_TYPES] = 1.0
        f[base + nl : end, :K_POCKET_TYPES] = poc_types[b]
        f[base:end, -1] = t_per_complex[b]
    return f


def packed_forward(params, coords: np.ndarray, node_features: np.ndarray, packed: PackedBatch):
    """Run the network on a packed batch.

    `params` is a dict of arrays or autodiff Tensors. Returns
    (eps_coord, eps_feat) over the packed ligand rows; these are Tensors
    when params are Tensors.
    """
    src, dst_g, dst_l = packed.edge_src, packed.edge_dst, packed.edge_dst_lig
    h = ad.linear(node_features, params["embed_W"], params["embed_b"])
    h_lig = ad.gather_rows(h, packed.lig_rows)
    poc_mask = np.ones((packed.n_nodes, 1))
    poc_mask[packed.lig_rows] = 0.0
    h_poc = h * poc_mask  # static pocket embeddings, zero on ligand rows
    x = coords
    n_layers = sum(1 for k in params if k.endswith("_e1_Wd"))
    for l in range(n_layers):
        d2 = ad.edge_sqdist(x, src, dst_g)
        # source features mix the static pocket embeddings with the evolving
        # ligand stream; node-level projections, gathered per edge in the
        # fused message kernel
        hs_nodes = ad.scatter_rows(h_lig, packed.lig_rows, packed.n_nodes) + h_poc
        hd = ad.linear(h_lig, params[f"L{l}_e1_Wd"], params[f"L{l}_e1_b"])
        hs = ad.matmul(hs_nodes, params[f"L{l}_e1_Ws"])
        m = ad.edge_message_silu(hd, hs, d2, src, dst_l, params[f"L{l}_e1_wd2"])
        m = ad.linear(m, params[f"L{l}_e2_W"], params[f"L{l}_e2_b"])

        # ligand coordinate stream
        s = ad.silu(ad.linear(m, params[f"L{l}_x1_W"], params[f"L{l}_x1_b"]))
        s = ad.linear(s, params[f"L{l}_x2_W"], params[f"L{l}_x2_b"])
        delta = ad.coord_step(x, s, src, dst_g, packed.lig_edge_starts)
        x = x + ad.scatter_rows(delta, packed.lig_rows, packed.n_nodes)

        # ligand feature stream
        agg = ad.segment_sum(m, packed.lig_edge_starts)
        h_in = ad.concat_cols([h_lig, agg])
        upd = ad.silu(ad.linear(h_in, params[f"L{l}_h1_W"], params[f"L{l}_h1_b"]))
        h_lig = h_lig + ad.matmul(upd, params[f"L{l}_h2_W"]) + params[f"L{l}_h2_b"]

    x_lig = ad.gather_rows(x, packed.lig_rows)
    x_lig_in = coords[packed.lig_rows]
    eps_coord = ad.segment_mean_subtract(x_lig - x_lig_in, packed.lig_starts)
    eps_feat = ad.linear(h_lig, params["out_W"], params["out_b"])
    return eps_coord, eps_feat


def forward(
    params: DenoiserParams,
    z_t: LigandCloud,
    pocket: PocketCloud,
    t: int,
    T: int,
) -> DenoiserOutput:
    """Single-complex noise prediction (plain-array fast path)."""
    if not 0 < t <= T:
        raise ValueError(f"need 0 < t <= T, got t={t}, T={T}")
    params.check_finite()
    if not (np.all(np.isfinite(z_t.coords)) and np.all(np.isfinite(z_t.features))):
        raise ValueError("non-finite ligand state")
    packed = build_packed_batch([(z_t.n_atoms, pocket.n_atoms)])
    coords = pack_coords(packed, [z_t.coords], [pocket.coords])
    feats = pack_node_features(packed, [z_t.features], [pocket.types], t / T)
    eps_coord, eps_feat = packed_forward(params.arrays, coords, feats, packed)
    return DenoiserOutput(eps_coord=eps_coord, eps_feat=eps_feat)


def predict_clean_arrays(sched: Schedule, z_coords, z_feats, eps_coord, eps_feat, t: int):
    """Reconstruction m_hat = z/alpha_t - (sigma_t/alpha_t) eps, feature
    channels thresholded to [0, FEATURE_SCALE]; tensor-aware."""
    if t < 1:
        raise ValueError("predict_clean requires t >= 1")
    a, s = sched.alpha[t], sched.sigma[t]
    m_coord = (z_coords - s * eps_coord) * (1.0 / a)
    m_feat = ad.clip((z_feats - s * eps_feat) * (1.0 / a), 0.0, FEATURE_SCALE)
    return m_coord, m_feat


def predict_clean(
    sched: Schedule, z_t: LigandCloud, eps_hat: DenoiserOutput, t: int
) -> LigandCloud:
    """Cloud-level reconstruction with prediction thresholding."""
    m_coord, m_feat = predict_clean_arrays(
        sched, z_t.coords, z_t.features, eps_hat.eps_coord, eps_hat.eps_feat, t
    )
    return LigandCloud(coords=m_coord, features=m_feat)


def value_and_grad(params: DenoiserParams, loss_closure) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact reverse-mode parameter gradients.

    `loss_closure` maps a dict of parameter Tensors to a scalar Tensor and
    must be a pure function of those tensors.
    """
    view = params.tensor_view()
    loss = loss_closure(view)
    if not isinstance(loss, Tensor):
        loss = Tensor(np.asarray(loss, dtype=np.float64))
    if not np.isfinite(loss.value):
        raise ValueError("non-finite loss")
    ad.backward(loss)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for k, t in view.items()
    }
    return float(loss.value), grads


def gradient(params: DenoiserParams, loss_closure) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss over the parameters."""
    return value_and_grad(params, loss_closure)[1]


def output_com_free(out: DenoiserOutput, tol: float = 1e-8) -> bool:
    return bool(np.max(np.abs(out.eps_coord.mean(axis=0))) < tol)


def project_output(out: DenoiserOutput) -> DenoiserOutput:
    return DenoiserOutput(project_com_free(out.eps_coord), out.eps_feat)
