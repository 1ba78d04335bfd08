"""Pure-numpy implementations of the hot kernels.

This is the fallback backend: semantics here define the contract the
compiled core must match (within floating-point reassociation noise).
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def silu_fwd(x: np.ndarray):
    # overflow-safe logistic: exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return x * sig, sig


def silu_bwd(g: np.ndarray, x: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return g * (sig + x * sig * (1.0 - sig))


def segment_sum(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Sum of rows within contiguous segments. starts has S+1 boundaries.

    Segments must be non-empty.
    """
    return np.add.reduceat(values, starts[:-1], axis=0)


def segment_sum_bwd(g: np.ndarray, starts: np.ndarray) -> np.ndarray:
    return np.repeat(g, np.diff(starts), axis=0)


def gather_rows(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return values[idx]


def scatter_add_rows(g: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, g)
    return out


def edge_sqdist(x: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = x[dst] - x[src]
    return np.einsum("ij,ij->i", diff, diff)


def edge_sqdist_bwd(g: np.ndarray, x: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    gd = (2.0 * g)[:, None] * (x[dst] - x[src])
    gx = np.zeros_like(x)
    np.add.at(gx, dst, gd)
    np.add.at(gx, src, -gd)
    return gx


def edge_message_silu(
    hd: np.ndarray, hs: np.ndarray, d2: np.ndarray, src: np.ndarray, dst: np.ndarray, wd2: np.ndarray
) -> np.ndarray:
    """silu(hd[dst] + hs[src] + outer(d2, wd2)).

    Nothing is cached: the backward pass recomputes the pre-activations
    from its inputs (cheaper than streaming them through memory).
    """
    pre = hd[dst] + hs[src] + d2[:, None] * wd2[None, :]
    return silu_fwd(pre)[0]


def edge_message_silu_bwd(
    g: np.ndarray,
    hd: np.ndarray,
    hs: np.ndarray,
    d2: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    wd2: np.ndarray,
):
    pre = hd[dst] + hs[src] + d2[:, None] * wd2[None, :]
    sig = silu_fwd(pre)[1]
    gpre = silu_bwd(g, pre, sig)
    ghd = np.zeros_like(hd)
    ghs = np.zeros_like(hs)
    np.add.at(ghd, dst, gpre)
    np.add.at(ghs, src, gpre)
    gd2 = gpre @ wd2
    gwd2 = gpre.T @ d2
    return ghd, ghs, gd2, gwd2


def coord_step(
    x: np.ndarray,
    s: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    seg_starts: np.ndarray,
):
    """Sum over in-edges of s_e * (x_dst - x_src) / (dist + 1), per ligand node."""
    diff = x[dst] - x[src]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    u = diff / (d + 1.0)[:, None]
    return segment_sum(u * s, seg_starts)


def coord_step_bwd(
    g: np.ndarray,
    x: np.ndarray,
    s: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    seg_starts: np.ndarray,
):
    """Returns (gx, gs) for the fused coordinate step."""
    diff = x[dst] - x[src]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    u = diff / (d + 1.0)[:, None]
    ge = segment_sum_bwd(g, seg_starts)  # (E, 3) gradient per edge output
    gs = np.einsum("ij,ij->i", u, ge)[:, None]
    gu = ge * s
    # d(u)/d(diff) = I/(d+1) - diff diff^T / (d (d+1)^2)
    dot = np.einsum("ij,ij->i", diff, gu)
    denom = np.where(d > 1e-12, d * (d + 1.0) ** 2, 1.0)
    gdiff = gu / (d + 1.0)[:, None] - diff * (dot / denom)[:, None]
    gx = np.zeros_like(x)
    np.add.at(gx, dst, gdiff)
    np.add.at(gx, src, -gdiff)
    return gx, gs
