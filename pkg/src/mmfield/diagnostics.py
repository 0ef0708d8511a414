"""Read-only introspection of trained fields.

Both entry points are pure observers: they run under no_grad and leave
parameters, optimizer state, and RNG streams untouched.
"""

from __future__ import annotations

import csv
import os

import numpy as np
import torch

from .errors import ConfigError
from .fileio import ensure_dir, write_f32, write_ppm
from .grids import level_mask
from .rendering import ray_box_span


def dump_bev_features(model, grid_name, levels, z_slice, resolution, out_dir, beta=None):
    """Bird's-eye-view magnitude maps of selected grid levels.

    Samples an (resolution x resolution) lattice over the scene's x/y
    extent at height z_slice, takes the L2 norm of each level's feature
    vector, normalizes each map by its own max (all-zero maps stay
    zero), and writes bev_<grid>_<level>.ppm + .f32 per level.
    Returns the list of written basenames.
    """
    if grid_name not in model.grids:
        raise ConfigError(f"model has no grid {grid_name!r}; has {sorted(model.grids)}")
    grid = model.grids[grid_name]
    cfg = grid.config
    for level in levels:
        if not (1 <= level <= cfg.levels):
            raise ConfigError(f"level {level} outside 1..{cfg.levels}")
    ensure_dir(out_dir)
    lo, hi = np.asarray(cfg.bounds[0]), np.asarray(cfg.bounds[1])
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1), np.full(gx.size, z_slice)], axis=1)

    mask = None if beta is None else level_mask(beta, cfg.levels)
    with torch.no_grad():
        feats = grid.level_features(pts, mask).numpy()  # (B, L, d)
    mags = np.linalg.norm(feats, axis=2).reshape(resolution, resolution, cfg.levels)

    written = []
    for level in levels:
        img = mags[:, :, level - 1]
        peak = img.max()
        norm = img / peak if peak > 0 else img
        base = f"bev_{grid_name}_{level}"
        write_ppm(os.path.join(out_dir, base + ".ppm"), np.repeat(norm[:, :, None], 3, axis=2))
        write_f32(os.path.join(out_dir, base + ".f32"), norm.astype(np.float32))
        written.append(base)
    return written


def dump_ray_density(named_models, origin, direction, n, out_csv, bounds=None):
    """Density profiles of several fields along one ray, as CSV.

    Columns: t, then one sigma column per (name, model, modality) entry.
    ``named_models`` is a list of (column_name, model, modality). The ray
    is clipped to ``bounds`` (default: first model's grid bounds).
    """
    if n < 2:
        raise ConfigError("need at least two sample points")
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    nrm = np.linalg.norm(direction)
    if nrm == 0:
        raise ConfigError("direction must be nonzero")
    direction = direction / nrm
    if bounds is None:
        bounds = named_models[0][1].grid_config.bounds
    t0, t1, valid = ray_box_span(origin[None], direction[None], bounds)
    if not valid[0]:
        raise ConfigError("ray misses the scene box")
    t = np.linspace(t0[0], t1[0], n)
    pts = origin[None, :] + t[:, None] * direction[None, :]

    cols = {}
    with torch.no_grad():
        for name, model, modality in named_models:
            cols[name] = model.query_density(pts, modality).numpy()

    ensure_dir(os.path.dirname(out_csv) or ".")
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + [name for name, _, _ in named_models])
        for i in range(n):
            writer.writerow([f"{t[i]:.8g}"] + [f"{cols[name][i]:.8g}" for name, _, _ in named_models])
    return out_csv
