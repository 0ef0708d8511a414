"""Joint training of one field from camera and scanner rays.

Every source of randomness is a named PCG64 stream keyed by (seed, name):
per-modality ray draws, stratified jitter, and importance draws. A
modality whose loss weight is zero is skipped entirely; because streams
are per-modality, the surviving modality consumes exactly the random
numbers it would have consumed alone, which is what makes the decomposed
joint model bit-identical to the two single-modality runs.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch

from .checkpoints import extract_segment, load_state, save_state
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .evaluation import evaluate_model
from .fileio import dump_json, ensure_dir
from .grids import GridConfig, grid_header
from .models import MlpConfig, ModelSpec, build_model
from .nets import stream_rng
from .rendering import SamplingConfig, blend_background, drop_total, render_rays
from .scene import Dataset


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_step: int = 1024  # per modality
    lambda_l: float = 1.0
    lambda_c: float = 1.0
    lr: float = 1e-2
    lr_decay_per_1k: float | None = None  # None: reach 0.1x at 80% of the run
    seed: int = 0
    w_rgb: float = 1.0
    w_depth: float = 1.0
    w_intensity: float = 0.1
    w_drop: float = 0.1
    w_hard_constraint: float = 1e-3
    n_coarse: int = 128
    n_fine: int = 32
    checkpoint_interval: int = 0  # 0: final checkpoint only
    log_interval: int = 100
    pretrain_iterations: int | None = None  # SGI stage; None: same as iterations

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_step < 1:
            raise ConfigError("bad iteration/ray counts")
        if self.lambda_l < 0 or self.lambda_c < 0:
            raise ConfigError("loss mix weights must be >= 0")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ConfigError("bad sample counts")

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return TrainConfig(**d)

    @property
    def w_lambda(self):
        """Camera-to-lidar loss mix ratio."""
        if self.lambda_l == 0:
            return float("inf")
        return self.lambda_c / self.lambda_l


def lr_at(config, step):
    """Exponential schedule: lr * decay^(step/1000), continuous in step."""
    decay = config.lr_decay_per_1k
    if decay is None:
        # Default lands on 0.1x of the initial rate at 80% of the run.
        horizon = max(1.0, 0.8 * config.iterations)
        decay = 0.1 ** (1000.0 / horizon)
    return config.lr * decay ** (step / 1000.0)


class RngBundle:
    """Named PCG64 streams with JSON-able state snapshots."""

    STREAMS = ("rays", "strat", "imp")

    def __init__(self, seed, modalities):
        self.seed = seed
        self.streams = {}
        for m in modalities:
            for s in self.STREAMS:
                name = f"{s}/{m}"
                self.streams[name] = stream_rng(seed, name)

    def get(self, kind, modality):
        return self.streams[f"{kind}/{modality}"]

    def state_json(self):
        return {name: gen.bit_generator.state for name, gen in self.streams.items()}

    def restore(self, states):
        for name, state in states.items():
            if name in self.streams:
                self.streams[name].bit_generator.state = state


def make_batch(pool, n, rng):
    """Uniform-with-replacement ray draw from a modality's training pool."""
    idx = rng.integers(0, len(pool), size=n)
    return pool.take(idx)


def _bce(p, target, eps=1e-6):
    p = torch.clamp(p, eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def step_losses(model, batches, outs, extras, config, background):
    """Combine per-modality render outputs into the total training loss.

    Returns (total tensor, parts dict of floats). Depth targets are
    already in scene units (the domain box), so no normalization is
    applied before the L1.
    """
    dtype = model.dtype
    zero = torch.zeros((), dtype=dtype)
    parts = {"rgb": 0.0, "depth": 0.0, "intensity": 0.0, "drop": 0.0, "constraint": 0.0}
    total = zero

    if "camera" in outs:
        out = outs["camera"]
        gt = torch.from_numpy(batches["camera"].targets["rgb"]).to(dtype)
        pred = blend_background(out, background)
        l_rgb = ((pred - gt) ** 2).mean()
        parts["rgb"] = float(l_rgb.detach())
        total = total + config.lambda_c * config.w_rgb * l_rgb

    if "lidar" in outs:
        out = outs["lidar"]
        tgt = batches["lidar"].targets
        gt_range = torch.from_numpy(tgt["range"]).to(dtype)
        gt_int = torch.from_numpy(tgt["intensity"]).to(dtype)
        gt_drop = torch.from_numpy(tgt["drop"]).to(dtype)
        valid = gt_drop < 0.5
        l_lidar = zero
        if bool(valid.any()):
            l_depth = (out.depth - gt_range)[valid].abs().mean()
            l_int = ((out.outputs["intensity"] - gt_int)[valid] ** 2).mean()
            parts["depth"] = float(l_depth.detach())
            parts["intensity"] = float(l_int.detach())
            l_lidar = l_lidar + config.w_depth * l_depth + config.w_intensity * l_int
        l_drop = _bce(drop_total(out), gt_drop)
        parts["drop"] = float(l_drop.detach())
        l_lidar = l_lidar + config.w_drop * l_drop
        total = total + config.lambda_l * l_lidar

    hc_terms = [e["aux_hc"].mean() for e in extras.values() if "aux_hc" in e]
    if hc_terms:
        hc = torch.stack(hc_terms).mean()
        parts["constraint"] = float(hc.detach())
        total = total + config.w_hard_constraint * model.spec.hard_constraint_weight * hc

    parts["total"] = float(total.detach())
    return total, parts


def active_modalities(model, config):
    """Modalities that are both modeled and carry a nonzero loss weight."""
    out = []
    for m in model.modalities:
        lam = config.lambda_l if m == "lidar" else config.lambda_c
        if lam > 0:
            out.append(m)
    if not out:
        raise ConfigError("no modality has a positive loss weight")
    return out


def save_checkpoint(path, model, config, step, rngs, dataset_path=None):
    params, m, v = model.store.state_blobs()
    header = {
        "format": "mmfield-checkpoint-v1",
        "model_spec": model.spec.to_json(),
        "grid_config": model.grid_config.to_json(),
        "mlp_config": model.mlp_config.to_json(),
        "train_config": config.to_json(),
        "step": int(step),
        "adam_t": int(model.store.adam_t),
        "rng": rngs.state_json(),
        "segments": model.store.segment_table(),
        "grids": {name: grid_header(model.grid_config) for name in model.grids},
        "frozen": sorted(model.store.frozen),
        "dataset": dataset_path,
    }
    save_state(path, header, {"params": params, "adam_m": m, "adam_v": v})
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild (model, config, step, rngs) from a checkpoint file."""
    header, blobs = load_state(path)
    if header.get("format") != "mmfield-checkpoint-v1":
        raise CheckpointError(f"{path}: not a checkpoint")
    spec = ModelSpec.from_json(header["model_spec"])
    grid_config = GridConfig.from_json(header["grid_config"])
    mlp_config = MlpConfig.from_json(header["mlp_config"])
    config = TrainConfig.from_json(header["train_config"])
    sgi_tables = None
    if spec.architecture in ("sgi", "alignmif"):
        # The trained base grid is inside the blob; do not re-read the
        # original pretraining file (it may be gone).
        sgi_tables = extract_segment(header, blobs["params"], "grid_init")
    model = build_model(spec, grid_config, mlp_config, seed=config.seed,
                        dtype=dtype, sgi_tables=sgi_tables)
    model.store.load_state_blobs(
        blobs["params"], blobs["adam_m"], blobs["adam_v"], header["adam_t"]
    )
    rngs = RngBundle(config.seed, model.modalities)
    rngs.restore(header["rng"])
    return model, config, header, rngs


def train_model(model, dataset, config, out_dir, quiet=True, dataset_path=None):
    """Run the optimization loop; returns the final checkpoint path.

    Writes train_log.csv (per log_interval component losses) and
    checkpoint files under out_dir. Aborts with TrainingDiverged when the
    loss or any parameter goes non-finite, naming the worst segment.
    """
    ensure_dir(out_dir)
    mods = active_modalities(model, config)
    pools = {m: dataset.train_pool(m) for m in mods}
    sampling = SamplingConfig(config.n_coarse, config.n_fine)
    rngs = RngBundle(config.seed, model.modalities)
    background = dataset.background

    log_path = os.path.join(out_dir, "train_log.csv")
    log_fields = ["step", "lr", "total", "rgb", "depth", "intensity", "drop", "constraint"]
    log_rows = []
    t_start = time.time()

    if config.iterations == 0:
        # Nothing to optimize; still emit the initial state.
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model, config, 0, rngs,
                        dataset_path)
        with open(log_path, "w", newline="") as f:
            csv.DictWriter(f, fieldnames=log_fields).writeheader()
        return os.path.join(out_dir, "final.ckpt")

    for step in range(config.iterations):
        lr = lr_at(config, step)
        model.store.zero_grad()
        batches, outs, extras = {}, {}, {}
        for m in mods:
            batches[m] = make_batch(pools[m], config.rays_per_step, rngs.get("rays", m))
            out, ext = render_rays(
                model, batches[m], sampling, rngs.get("strat", m), rngs.get("imp", m)
            )
            outs[m], extras[m] = out, ext
        total, parts = step_losses(model, batches, outs, extras, config, background)
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(
                f"loss became non-finite at step {step}", parts=parts
            )
        total.backward()
        model.store.adam_step(lr)

        if step % config.log_interval == 0 or step == config.iterations - 1:
            row = {"step": step, "lr": lr, **{k: parts[k] for k in log_fields[2:]}}
            log_rows.append(row)
            if not quiet:
                el = time.time() - t_start
                print(f"  step {step:5d} lr {lr:.2e} total {parts['total']:.4f} [{el:.0f}s]")
        if config.checkpoint_interval and step and step % config.checkpoint_interval == 0:
            save_checkpoint(
                os.path.join(out_dir, f"step_{step:06d}.ckpt"),
                model, config, step, rngs, dataset_path,
            )

    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=log_fields)
        writer.writeheader()
        for row in log_rows:
            writer.writerow(row)
    final = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final, model, config, config.iterations, rngs, dataset_path)
    return final


def run_training(spec, dataset, config, out_dir, grid_config=None, mlp_config=None,
                 dtype=torch.float32, quiet=True, dataset_path=None):
    """Build and train a model, handling the SGI pretraining stage.

    When an SGI-style spec has no sgi_init, a single_lidar model is
    trained first (same seed/budget unless pretrain_iterations is set)
    and its checkpoint becomes the base-grid initialization.

    Returns (model, final_checkpoint_path).
    """
    if isinstance(dataset, str):
        dataset_path = dataset_path or dataset
        dataset = Dataset(dataset)
    ensure_dir(out_dir)
    grid_config = grid_config or GridConfig()
    mlp_config = mlp_config or MlpConfig()

    if spec.architecture in ("sgi", "alignmif") and spec.sgi_init is None:
        pre_iters = config.pretrain_iterations
        pre_cfg = replace(
            config,
            iterations=config.iterations if pre_iters is None else pre_iters,
            lambda_l=1.0,
            lambda_c=0.0,
        )
        pre_model = build_model(ModelSpec("single_lidar"), grid_config, mlp_config,
                                seed=config.seed, dtype=dtype)
        pre_path = train_model(pre_model, dataset, pre_cfg,
                               os.path.join(out_dir, "sgi_pretrain"),
                               quiet=quiet, dataset_path=dataset_path)
        spec = replace(spec, sgi_init=pre_path)

    model = build_model(spec, grid_config, mlp_config, seed=config.seed, dtype=dtype)
    final = train_model(model, dataset, config, out_dir, quiet=quiet,
                        dataset_path=dataset_path)
    return model, final


def wlambda_sweep(dataset, values, config, out_dir, spec=None, grid_config=None,
                  mlp_config=None, quiet=True, dataset_path=None):
    """Train the same architecture across loss-mix ratios and score each.

    lambda_l stays 1; lambda_c takes each value in ``values``. Writes
    wlambda.csv and returns the result rows.
    """
    if isinstance(dataset, str):
        dataset_path = dataset_path or dataset
        dataset = Dataset(dataset)
    spec = spec or ModelSpec("shared_fusion")
    ensure_dir(out_dir)
    rows = []
    for w in values:
        cfg = replace(config, lambda_l=1.0, lambda_c=float(w))
        run_dir = os.path.join(out_dir, f"w_{w:g}")
        model, _ = run_training(spec, dataset, cfg, run_dir, grid_config, mlp_config,
                                quiet=quiet, dataset_path=dataset_path)
        result = evaluate_model(model, dataset)
        row = {"w_lambda": float(w), **result["summary"]}
        rows.append(row)
        dump_json(os.path.join(run_dir, "metrics.json"), result["summary"])
    if rows:
        with open(os.path.join(out_dir, "wlambda.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    return rows
