"""Command-line interface: world generation, pretraining, policy
fine-tuning, sampling, harvesting, and schedule inspection.

Every subcommand is deterministic given (config, seed): outputs carry no
timestamps, floats are serialized with shortest round-trip repr, and row
orders are fixed. DENOPT_SEED and DENOPT_WORKERS are the only environment
overrides. Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import rl
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PretrainConfig, RunConfig
from .denoiser import init_params, value_and_grad
from .diffusion import pretrain_loss_value
from .geometry import (
    LigandCloud,
    center_on_ligand,
    cloud_from_xyz,
    clouds_to_xyz,
    project_com_free,
)
from .rewards import build_reward_batch, diversity_scores, ligand_descriptor
from .rl import AdamWState, PpoConfig, finetune, rollout, topn_harvest, update_step
from .schedule import build_schedule, variance_profile
from .synthworld import WorldConfig, build_size_sampler, generate_complex

LOCK_NAME = ".denopt.lock"


class RuntimeFailure(click.ClickException):
    exit_code = 3


def _seed(value: int) -> int:
    env = os.environ.get("DENOPT_SEED")
    return int(env) if env else value


def _workers() -> int:
    env = os.environ.get("DENOPT_WORKERS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


class OutDir:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self.written: list[Path] = []
        self._lock = self.path / LOCK_NAME

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise RuntimeFailure(
                f"{self.path} is locked by another run (remove {self._lock} if stale)"
            ) from None
        return self

    def __exit__(self, *exc):
        self._lock.unlink(missing_ok=True)
        return False

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.written.append(p)
        return p

    def add(self, rel: str) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in sorted(self.written, key=lambda q: str(q.relative_to(self.path))):
            h.update(str(p.relative_to(self.path)).encode())
            h.update(b"\0")
            h.update(p.read_bytes())
            h.update(b"\0")
        return h.hexdigest()


def _finish(out: OutDir, do_hash: bool) -> None:
    if do_hash:
        click.echo(f"sha256:{out.digest()}")


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


def _write_csv(out: OutDir, rel: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    out.write_text(rel, "\n".join(lines) + "\n")


def _load_world(world_dir) -> tuple[list, dict]:
    world_dir = Path(world_dir)
    meta_path = world_dir / "meta.json"
    if not meta_path.exists():
        raise RuntimeFailure(f"{world_dir}: missing meta.json (not a world directory)")
    meta = json.loads(meta_path.read_text())
    complexes = []
    for i in range(meta["config"]["n_pockets"]):
        pocket = cloud_from_xyz((world_dir / str(i) / "pocket.xyz").read_text())
        ligand = cloud_from_xyz((world_dir / str(i) / "ligand.xyz").read_text())
        complexes.append((pocket, ligand))
    return complexes, meta


def _schedule_from_checkpoint(ckpt: Checkpoint):
    return build_schedule(ckpt.schedule_T, ckpt.schedule_precision)


def _load_ligands(path) -> list[LigandCloud]:
    path = Path(path)
    ligands = []
    if path.is_dir():
        for p in sorted(path.glob("*.xyz")):
            cloud = cloud_from_xyz(p.read_text())
            if isinstance(cloud, LigandCloud):
                ligands.append(cloud)
    else:
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            ligands.append(LigandCloud.from_types(np.asarray(entry["coords"]), entry["types"]))
    if not ligands:
        raise RuntimeFailure(f"{path}: no ligands found")
    return ligands


ORACLE_HEADER = ["index", "affinity", "qed_like", "sa_like", "valid"]


def _oracle_rows_and_summary(ligands, pocket):
    batch = build_reward_batch(ligands, pocket)
    rows = []
    for i, o in enumerate(batch.oracles):
        rows.append([i, o.affinity, o.qed_like, o.sa_like, int(o.valid)])
    mask = batch.valid_mask
    aff = np.array([o.affinity for o, ok in zip(batch.oracles, mask) if ok])
    qed = np.array([o.qed_like for o, ok in zip(batch.oracles, mask) if ok])
    sa = np.array([o.sa_like for o, ok in zip(batch.oracles, mask) if ok])
    if mask.any():
        desc = np.stack([o.descriptor for o, ok in zip(batch.oracles, mask) if ok])
        div = float(np.mean(diversity_scores(desc))) if mask.sum() >= 2 else 0.0
    else:
        div = float("nan")
    summary = {
        "affinity_mean": float(aff.mean()) if aff.size else None,
        "affinity_median": float(np.median(aff)) if aff.size else None,
        "qed_mean": float(qed.mean()) if qed.size else None,
        "sa_mean": float(sa.mean()) if sa.size else None,
        "diversity_mean": None if math.isnan(div) else div,
        "valid_rate": float(mask.mean()),
    }
    return rows, summary


@click.group()
def main():
    """Pocket-conditional diffusion with denoising policy optimization."""


def _config_option(fn):
    return click.option(
        "--config", "config_path", type=click.Path(exists=True), default=None,
        help="JSON run config; explicit flags override its fields.",
    )(fn)


def _load_config(config_path) -> RunConfig:
    try:
        return RunConfig.from_file(config_path) if config_path else RunConfig()
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc


# ------------------------------------------------------------------ gen-world


@main.command("gen-world")
@_config_option
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--n-pockets", type=int, default=None)
@click.option("--pocket-radius", type=float, default=None)
@click.option("--hash", "do_hash", is_flag=True)
def cmd_gen_world(config_path, out_dir, seed, n_pockets, pocket_radius, do_hash):
    """Generate a synthetic world of pocket/ligand complexes."""
    cfg = _load_config(config_path).world
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if n_pockets is not None:
        updates["n_pockets"] = n_pockets
    if pocket_radius is not None:
        updates["pocket_radius"] = pocket_radius
    if "seed" not in updates:
        updates["seed"] = _seed(cfg.seed)
    try:
        cfg = WorldConfig(**{**cfg.__dict__, **updates})
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    try:
        with OutDir(out_dir) as out:
            with ThreadPoolExecutor(max_workers=_workers()) as pool:
                complexes = list(
                    pool.map(lambda i: generate_complex(cfg, i), range(cfg.n_pockets))
                )
            hist: dict[str, int] = {}
            lig_hist: dict[str, int] = {}
            for i, (pocket, ligand) in enumerate(complexes):
                out.write_text(f"{i}/pocket.xyz", clouds_to_xyz(pocket, "pocket"))
                out.write_text(f"{i}/ligand.xyz", clouds_to_xyz(ligand, "ligand"))
                hist[str(pocket.n_atoms)] = hist.get(str(pocket.n_atoms), 0) + 1
                lig_hist[str(ligand.n_atoms)] = lig_hist.get(str(ligand.n_atoms), 0) + 1
            meta = {
                "config": {
                    "pocket_radius": cfg.pocket_radius,
                    "n_pockets": cfg.n_pockets,
                    "pocket_size_range": list(cfg.pocket_size_range),
                    "ligand_size_range": list(cfg.ligand_size_range),
                    "seed": cfg.seed,
                },
                "pocket_size_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
                "ligand_size_histogram": dict(sorted(lig_hist.items(), key=lambda kv: int(kv[0]))),
            }
            out.write_text("meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
            _finish(out, do_hash)
    except RuntimeFailure:
        raise
    except Exception as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


# ------------------------------------------------------------------- pretrain


@main.command("pretrain")
@_config_option
@click.option("--world", "world_dir", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--hash", "do_hash", is_flag=True)
def cmd_pretrain(config_path, world_dir, out_dir, steps, batch, lr, seed, do_hash):
    """Train the denoiser on the synthetic world with the noise-matching loss."""
    run_cfg = _load_config(config_path)
    pre = run_cfg.pretrain
    pre = PretrainConfig(
        steps=steps if steps is not None else pre.steps,
        batch_size=batch if batch is not None else pre.batch_size,
        learning_rate=lr if lr is not None else pre.learning_rate,
        weight_decay=pre.weight_decay,
    )
    seed = _seed(seed if seed is not None else run_cfg.seed)
    try:
        with OutDir(out_dir) as out:
            complexes, _ = _load_world(world_dir)
            centered = [center_on_ligand(p, l) for p, l in complexes]
            sched = build_schedule(run_cfg.schedule.T, run_cfg.schedule.precision)
            params = init_params(run_cfg.denoiser, np.random.default_rng([seed, 0x1]))
            opt = AdamWState.for_params(params)
            opt_cfg = PpoConfig(
                learning_rate=pre.learning_rate, weight_decay=pre.weight_decay
            )
            draw_rng = np.random.default_rng([seed, 0x2])
            noise_rng = np.random.default_rng([seed, 0x3])
            rows = []
            for step in range(pre.steps):
                idx = draw_rng.integers(0, len(centered), size=pre.batch_size)
                draws = []
                for i in idx:
                    pocket_c, ligand_c = centered[int(i)]
                    t = int(noise_rng.integers(1, sched.T + 1))
                    eps_c = project_com_free(noise_rng.standard_normal(ligand_c.coords.shape))
                    eps_f = noise_rng.standard_normal(ligand_c.features.shape)
                    draws.append((pocket_c, ligand_c, t, eps_c, eps_f))

                def closure(view):
                    total = None
                    for pocket_c, ligand_c, t, eps_c, eps_f in draws:
                        term = pretrain_loss_value(
                            sched, view, ligand_c, pocket_c, t, eps_c, eps_f
                        )
                        total = term if total is None else total + term
                    return total * (1.0 / len(draws))

                loss, grads = value_and_grad(params, closure)
                params, opt = update_step(params, opt, grads, opt_cfg)
                rows.append([step, loss])
            smooth = []
            for i, (_, loss) in enumerate(rows):
                lo = max(0, i - 99)
                smooth.append(float(np.mean([r[1] for r in rows[lo : i + 1]])))
            _write_csv(
                out,
                "loss.csv",
                ["step", "loss", "loss_smooth100"],
                [[r[0], r[1], s] for r, s in zip(rows, smooth)],
            )
            ckpt = Checkpoint(
                params=params,
                opt=opt,
                schedule_T=run_cfg.schedule.T,
                schedule_precision=run_cfg.schedule.precision,
                iteration=0,
                rng_state=_rng_state_json(noise_rng),
            )
            path = out.add("checkpoint.ckpt")
            save_checkpoint(path, ckpt)
            _finish(out, do_hash)
    except RuntimeFailure:
        raise
    except (CheckpointError, Exception) as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


def _rng_state_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


# ------------------------------------------------------------------- finetune


@main.command("finetune")
@_config_option
@click.option("--world", "world_dir", required=True, type=click.Path(exists=True))
@click.option("--pocket-index", type=int, default=0, show_default=True)
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--stride", type=int, default=5, show_default=True)
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--updates", type=int, default=100, show_default=True)
@click.option("--clip", type=float, default=0.2, show_default=True)
@click.option("--lr", type=float, default=1e-5, show_default=True)
@click.option("--wd", type=float, default=1e-4, show_default=True)
@click.option("--epochs-per-batch", type=int, default=1, show_default=True)
@click.option("--grad-fraction", type=float, default=1.0 / 3.0)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--hash", "do_hash", is_flag=True)
def cmd_finetune(
    config_path, world_dir, pocket_index, ckpt_path, out_dir, stride, batch,
    updates, clip, lr, wd, epochs_per_batch, grad_fraction, seed, do_hash,
):
    """Optimize the denoising policy against the reward oracles."""
    run_cfg = _load_config(config_path)
    seed = _seed(seed)
    try:
        ppo = PpoConfig(
            clip_eps=clip,
            learning_rate=lr,
            weight_decay=wd,
            batch_size=batch,
            n_updates=updates,
            stride=stride,
            epochs_per_batch=epochs_per_batch,
            grad_timestep_fraction=grad_fraction,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    try:
        with OutDir(out_dir) as out:
            complexes, _ = _load_world(world_dir)
            if not 0 <= pocket_index < len(complexes):
                raise RuntimeFailure(f"pocket index {pocket_index} outside the world")
            pocket = complexes[pocket_index][0]
            sampler = build_size_sampler(complexes)
            ckpt = load_checkpoint(ckpt_path)
            if ckpt.schedule_T != run_cfg.schedule.T or not math.isclose(
                ckpt.schedule_precision, run_cfg.schedule.precision
            ):
                if config_path is not None:
                    raise RuntimeFailure(
                        "checkpoint schedule does not match the configured schedule"
                    )
            sched = _schedule_from_checkpoint(ckpt)

            def save_cb(iteration, params, opt):
                if (iteration + 1) % 25 == 0:
                    p = out.add(f"checkpoint_{iteration + 1:06d}.ckpt")
                    save_checkpoint(
                        p,
                        Checkpoint(
                            params=params,
                            opt=opt,
                            schedule_T=ckpt.schedule_T,
                            schedule_precision=ckpt.schedule_precision,
                            iteration=iteration + 1,
                            rng_state=ckpt.rng_state,
                        ),
                    )

            final, history, pool = finetune(
                pocket,
                ckpt.params,
                ppo,
                sched,
                sampler,
                seed,
                reward_weights=run_cfg.reward_weights,
                checkpoint_callback=save_cb,
            )
            hist_header = list(history[0].keys()) if history else []
            _write_csv(out, "history.csv", hist_header, [[row[k] for k in hist_header] for row in history])
            pool_lines = [json.dumps(entry, sort_keys=True) for entry in pool]
            out.write_text("pool.jsonl", "\n".join(pool_lines) + ("\n" if pool_lines else ""))
            p = out.add("checkpoint_final.ckpt")
            save_checkpoint(
                p,
                Checkpoint(
                    params=final,
                    opt=AdamWState.for_params(final),
                    schedule_T=ckpt.schedule_T,
                    schedule_precision=ckpt.schedule_precision,
                    iteration=ppo.n_updates,
                    rng_state=ckpt.rng_state,
                ),
            )
            _finish(out, do_hash)
    except RuntimeFailure:
        raise
    except Exception as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


# --------------------------------------------------------------------- sample


@main.command("sample")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--world", "world_dir", required=True, type=click.Path(exists=True))
@click.option("--pocket-index", type=int, default=0, show_default=True)
@click.option("--n", "n_samples", type=int, default=100, show_default=True)
@click.option("--stride", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--hash", "do_hash", is_flag=True)
def cmd_sample(ckpt_path, world_dir, pocket_index, n_samples, stride, seed, out_dir, do_hash):
    """Sample ligands from a checkpointed policy and evaluate the oracles."""
    seed = _seed(seed)
    try:
        with OutDir(out_dir) as out:
            complexes, _ = _load_world(world_dir)
            pocket = complexes[pocket_index][0]
            sampler = build_size_sampler(complexes)
            ckpt = load_checkpoint(ckpt_path)
            sched = _schedule_from_checkpoint(ckpt)
            cfg = PpoConfig(batch_size=n_samples, stride=stride)
            batch = rollout(ckpt.params, pocket, sched, cfg, sampler, seed)
            ligands = [traj.final for traj in batch.trajectories]
            for i, lig in enumerate(ligands):
                out.write_text(f"ligand_{i:04d}.xyz", clouds_to_xyz(lig, "ligand"))
            rows, summary = _oracle_rows_and_summary(ligands, pocket)
            _write_csv(out, "oracles.csv", ORACLE_HEADER, rows)
            out.write_text("summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
            _finish(out, do_hash)
    except RuntimeFailure:
        raise
    except Exception as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


# ----------------------------------------------------------------------- topn


@main.command("topn")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--n", type=int, required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--hash", "do_hash", is_flag=True)
def cmd_topn(pool_path, n, out_path, do_hash):
    """Select the best N harvested ligands by the weighted z-score."""
    try:
        entries = []
        for line in Path(pool_path).read_text().splitlines():
            if line.strip():
                entries.append(json.loads(line))
        if not entries:
            raise RuntimeFailure(f"{pool_path}: empty pool")
        selected = topn_harvest(entries, n)
        if not selected:
            raise RuntimeFailure(f"{pool_path}: no valid ligands in pool")
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("\n".join(json.dumps(e, sort_keys=True) for e in selected) + "\n")
        if do_hash:
            h = hashlib.sha256(out_path.read_bytes()).hexdigest()
            click.echo(f"sha256:{h}")
    except RuntimeFailure:
        raise
    except Exception as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


# ------------------------------------------------------------ variance-profile


@main.command("variance-profile")
@click.option("--t", "total_steps", type=int, default=500, show_default=True)
@click.option("--precision", type=float, default=1e-4, show_default=True)
@click.option("--strides", default="1,5,10,20", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--hash", "do_hash", is_flag=True)
def cmd_variance_profile(total_steps, precision, strides, out_path, do_hash):
    """Export sigma_q along the coarse grid for each stride as CSV."""
    try:
        stride_list = sorted({int(s) for s in strides.split(",") if s.strip()})
        sched = build_schedule(total_steps, precision)
        from .schedule import posterior_params

        # fixed-source ordering law: larger stride, larger sigma_q
        for s in range(0, total_steps - max(stride_list), max(1, total_steps // 50)):
            vals = [posterior_params(sched, s, s + d).sigma_q for d in stride_list]
            if not all(vals[i] < vals[i + 1] for i in range(len(vals) - 1)):
                raise RuntimeFailure("variance ordering violated; schedule is inconsistent")
        lines = ["t,stride,sigma_q"]
        for d in stride_list:
            for t, sq in variance_profile(sched, d):
                lines.append(f"{t},{d},{sq!r}")
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("\n".join(lines) + "\n")
        if do_hash:
            click.echo(f"sha256:{hashlib.sha256(out_path.read_bytes()).hexdigest()}")
    except RuntimeFailure:
        raise
    except Exception as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


# ----------------------------------------------------------------------- eval


@main.command("eval")
@click.option("--world", "world_dir", required=True, type=click.Path(exists=True))
@click.option("--pocket-index", type=int, default=0, show_default=True)
@click.option("--ligands", "ligands_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--hash", "do_hash", is_flag=True)
def cmd_eval(world_dir, pocket_index, ligands_path, out_dir, do_hash):
    """Evaluate oracle metrics for stored ligands against a world pocket."""
    try:
        with OutDir(out_dir) as out:
            complexes, _ = _load_world(world_dir)
            pocket = complexes[pocket_index][0]
            ligands = _load_ligands(ligands_path)
            rows, summary = _oracle_rows_and_summary(ligands, pocket)
            _write_csv(out, "oracles.csv", ORACLE_HEADER, rows)
            out.write_text("summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
            _finish(out, do_hash)
    except RuntimeFailure:
        raise
    except Exception as exc:  # noqa: BLE001
        raise RuntimeFailure(str(exc)) from exc


if __name__ == "__main__":
    main()
