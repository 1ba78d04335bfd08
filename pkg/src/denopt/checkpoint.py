"""Versioned binary checkpoints with bit-exact round-trips.

Layout: magic, format version, a JSON header (schedule metadata, network
configuration, iteration counter, generator state, array manifest), then
the raw little-endian float64 buffers in manifest order. No timestamps or
other nondeterministic content, so identical state produces identical
bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams
from .rl import AdamWState

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"DNOPTCKP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: DenoiserParams
    opt: AdamWState
    schedule_T: int
    schedule_precision: float
    iteration: int
    rng_state: dict

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params.names():
            out[f"param/{name}"] = self.params.arrays[name]
        for name in self.params.names():
            out[f"adam_m/{name}"] = self.opt.m[name]
        for name in self.params.names():
            out[f"adam_v/{name}"] = self.opt.v[name]
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = ckpt.state_arrays()
    header = {
        "version": VERSION,
        "schedule": {"T": ckpt.schedule_T, "precision": ckpt.schedule_precision},
        "denoiser": {
            "n_layers": ckpt.params.config.n_layers,
            "hidden": ckpt.params.config.hidden,
        },
        "iteration": ckpt.iteration,
        "adam_step": ckpt.opt.step,
        "rng_state": ckpt.rng_state,
        "manifest": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    off += 8
    header = json.loads(data[off : off + hlen].decode())
    off += hlen
    arrays = {}
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        arrays[name] = arr.astype(np.float64)
        off += count * 8
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes ({len(data) - off})")
    config = DenoiserConfig(**header["denoiser"])
    params = DenoiserParams(
        config=config,
        arrays={n.split("/", 1)[1]: a for n, a in arrays.items() if n.startswith("param/")},
    )
    opt = AdamWState(
        m={n.split("/", 1)[1]: a for n, a in arrays.items() if n.startswith("adam_m/")},
        v={n.split("/", 1)[1]: a for n, a in arrays.items() if n.startswith("adam_v/")},
        step=header["adam_step"],
    )
    expected = set(params.names())
    if set(params.arrays) != expected or set(opt.m) != expected:
        raise CheckpointError(f"{path}: manifest does not match the declared architecture")
    return Checkpoint(
        params=params,
        opt=opt,
        schedule_T=header["schedule"]["T"],
        schedule_precision=header["schedule"]["precision"],
        iteration=header["iteration"],
        rng_state=header["rng_state"],
    )
