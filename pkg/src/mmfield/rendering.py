"""Ray generation, sample placement, and volumetric compositing.

Ray math stays in float64 numpy (geometry should not accumulate float32
error); field queries and compositing run in the field's dtype through
torch so gradients flow back to the parameter store.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, TrainingDiverged


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @staticmethod
    def from_fov(width, height, fov_x_deg):
        """Pinhole with square pixels and the optical center mid-pixel."""
        fx = (width / 2.0) / math.tan(math.radians(fov_x_deg) / 2.0)
        return CameraIntrinsics(
            width=width, height=height, fx=fx, fy=fx,
            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        )

    def to_json(self):
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
        }

    @staticmethod
    def from_json(d):
        return CameraIntrinsics(**d)


@dataclass(frozen=True)
class LidarPattern:
    """Spinning-scanner layout: beams x azimuth steps, top beam first."""

    n_beams: int
    n_azimuth: int
    elevation_min_deg: float
    elevation_max_deg: float
    max_range: float

    def elevations(self):
        """Per-beam elevation in radians, highest beam first."""
        return np.radians(
            np.linspace(self.elevation_max_deg, self.elevation_min_deg, self.n_beams)
        )

    def azimuths(self):
        """Azimuth angles in radians, 2*pi*j / n_azimuth."""
        return 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth

    def directions(self):
        """Unit directions in the sensor frame, shape (n_beams, n_azimuth, 3)."""
        el = self.elevations()[:, None]
        az = self.azimuths()[None, :]
        ce = np.cos(el)
        return np.stack(
            [ce * np.cos(az), ce * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1
        )

    def to_json(self):
        return {
            "n_beams": self.n_beams, "n_azimuth": self.n_azimuth,
            "elevation_min_deg": self.elevation_min_deg,
            "elevation_max_deg": self.elevation_max_deg,
            "max_range": self.max_range,
        }

    @staticmethod
    def from_json(d):
        return LidarPattern(**d)


@dataclass
class RayBatch:
    """A bundle of rays of one modality plus optional supervision targets.

    ids carries per-ray integer coordinates back into the source raster
    ((row, col) pixels for cameras, (beam, azimuth) for scanners).
    """

    origins: np.ndarray  # (N, 3) float64
    dirs: np.ndarray     # (N, 3) float64, unit length
    t_near: np.ndarray   # (N,)
    t_far: np.ndarray    # (N,)
    modality: str
    ids: np.ndarray | None = None
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.origins)
        if n:
            norms = np.linalg.norm(self.dirs, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-9):
                raise ConfigError("ray directions must be unit length")
            if np.any(self.t_near < 0) or np.any(self.t_far <= self.t_near):
                raise ConfigError("rays need 0 <= t_near < t_far")

    def __len__(self):
        return len(self.origins)

    def take(self, index):
        """Sub-batch by integer index array (targets follow along)."""
        return RayBatch(
            origins=self.origins[index],
            dirs=self.dirs[index],
            t_near=self.t_near[index],
            t_far=self.t_far[index],
            modality=self.modality,
            ids=None if self.ids is None else self.ids[index],
            targets={k: v[index] for k, v in self.targets.items()},
        )


def ray_box_span(origins, dirs, bounds):
    """Slab test: entry/exit distances of rays against an AABB.

    Returns (t_enter, t_exit, valid); t_enter is clamped at 0 (origins
    inside the box start at the sensor).
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None, :] - origins) * inv
        t1 = (hi[None, :] - origins) * inv
    # Rays parallel to a slab (inv = inf) produce +-inf or NaN when the
    # origin sits exactly on a face; NaNs compare false so normalize them.
    tmin = np.nanmin(np.stack([t0, t1]), axis=0).max(axis=1)
    tmax = np.nanmax(np.stack([t0, t1]), axis=0).min(axis=1)
    t_enter = np.maximum(tmin, 0.0)
    valid = tmax > t_enter
    return t_enter, tmax, valid


def camera_rays(pose, intr, bounds, pixels=None):
    """Rays through pixel centers of a pinhole camera.

    pose: 4x4 camera-to-world (camera frame: x right, y down, z forward).
    pixels: optional (M, 2) integer (row, col) selection; default all
    pixels in row-major order.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pixels is None:
        rows, cols = np.meshgrid(
            np.arange(intr.height), np.arange(intr.width), indexing="ij"
        )
        pixels = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    pixels = np.asarray(pixels, dtype=np.int64)
    px = pixels[:, 1].astype(np.float64)
    py = pixels[:, 0].astype(np.float64)
    d_cam = np.stack(
        [(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, np.ones_like(px)], axis=1
    )
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], d_world.shape).copy()
    t_enter, t_exit, valid = ray_box_span(origins, d_world, bounds)
    if not np.all(valid):
        raise ConfigError("camera rays must intersect the scene box")
    return RayBatch(
        origins=origins, dirs=d_world, t_near=t_enter, t_far=t_exit,
        modality="camera", ids=pixels,
    )


def lidar_rays(pose, pattern, bounds):
    """Rays of one full scanner sweep, beam-major then azimuth."""
    pose = np.asarray(pose, dtype=np.float64)
    d_sensor = pattern.directions().reshape(-1, 3)
    d_world = d_sensor @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], d_world.shape).copy()
    beams, az = np.meshgrid(
        np.arange(pattern.n_beams), np.arange(pattern.n_azimuth), indexing="ij"
    )
    ids = np.stack([beams.reshape(-1), az.reshape(-1)], axis=1)
    t_enter, t_exit, valid = ray_box_span(origins, d_world, bounds)
    if not np.all(valid):
        raise ConfigError("lidar rays must intersect the scene box")
    t_far = np.minimum(t_exit, pattern.max_range)
    return RayBatch(
        origins=origins, dirs=d_world, t_near=t_enter, t_far=t_far,
        modality="lidar", ids=ids,
    )


def stratified_samples(t_near, t_far, n, rng=None):
    """One sample per uniform bin of [t_near, t_far]; midpoints when rng is None.

    Returns (N, n) float64, strictly increasing along each row.
    """
    if n < 1:
        raise ConfigError("need at least one sample per ray")
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    if rng is None:
        u = np.full((len(t_near), n), 0.5)
    else:
        u = rng.random((len(t_near), n))
    steps = (np.arange(n, dtype=np.float64)[None, :] + u) / n
    return t_near + (t_far - t_near) * steps


def _dedupe_increasing(t):
    """Nudge any non-increasing entries up by one ulp until strict."""
    for _ in range(8):
        bad = np.diff(t, axis=1) <= 0
        if not bad.any():
            return t
        rows, cols = np.nonzero(bad)
        t[rows, cols + 1] = np.nextafter(t[rows, cols], np.inf)
    return t


def importance_resample(t_coarse, weights, t_near, t_far, n_fine, rng=None):
    """Draw n_fine extra samples from the coarse weight histogram and merge.

    Weight i owns the interval [t_i, t_{i+1}) (the last one runs to
    t_far). Rows with no weight mass fall back to a uniform draw. Returns
    the sorted union, shape (N, n_coarse + n_fine), strictly increasing.
    """
    t_coarse = np.asarray(t_coarse, dtype=np.float64)
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    N, nc = t_coarse.shape
    t_far = np.asarray(t_far, dtype=np.float64)
    edges = np.concatenate([t_coarse, t_far[:, None]], axis=1)  # (N, nc+1)

    total = w.sum(axis=1, keepdims=True)
    flat_rows = total[:, 0] <= 1e-12
    pdf = np.where(flat_rows[:, None], 1.0 / nc, w / np.where(total > 0, total, 1.0))
    cdf = np.concatenate([np.zeros((N, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = (np.arange(n_fine, dtype=np.float64)[None, :] + 0.5) / n_fine
        u = np.broadcast_to(u, (N, n_fine)).copy()
    else:
        u = (np.arange(n_fine)[None, :] + rng.random((N, n_fine))) / n_fine

    # Inverse-CDF: bin k(u) = last bin whose left edge is <= u.
    k = (u[:, :, None] >= cdf[:, None, :-1]).sum(axis=2) - 1
    k = np.clip(k, 0, nc - 1)
    rows = np.arange(N)[:, None]
    c0 = cdf[rows, k]
    c1 = cdf[rows, k + 1]
    denom = np.where(c1 - c0 > 1e-12, c1 - c0, 1.0)
    frac = np.clip((u - c0) / denom, 0.0, 1.0)
    t_fine = edges[rows, k] + frac * (edges[rows, k + 1] - edges[rows, k])

    merged = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    return _dedupe_increasing(merged)


@dataclass
class RenderOutput:
    """Per-ray compositing products.

    outputs holds the composited per-sample attributes (weighted sums,
    no normalization); weights / trans_residual expose the quadrature so
    callers can blend backgrounds or account for unabsorbed mass.
    """

    t: torch.Tensor               # (N, S) sample distances
    weights: torch.Tensor         # (N, S)
    trans_residual: torch.Tensor  # (N,) transmittance past the last sample
    depth: torch.Tensor           # (N,) sum w_i t_i
    outputs: dict                 # name -> (N,) or (N, C)

    @property
    def opacity(self):
        return self.weights.sum(dim=-1)

    @property
    def color(self):
        return self.outputs.get("color")

    @property
    def intensity(self):
        return self.outputs.get("intensity")

    @property
    def drop_prob(self):
        return self.outputs.get("drop")


def composite(t, sigma, attrs, t_far, ray_ids=None):
    """Volumetric quadrature along rays.

    t: (N, S) strictly increasing sample distances (torch).
    sigma: (N, S) non-negative densities.
    attrs: dict of per-sample values, (N, S) or (N, S, C).
    t_far: (N,) far clip; the last interval is t_far - t_S (clamped >= 0).
    ray_ids: optional (N,) ids used to name the offender on bad density.

    Transmittance is computed in log space (exclusive cumsum of sigma*delta)
    so that sum(weights) + trans_residual telescopes to 1 exactly up to
    rounding.
    """
    finite = torch.isfinite(sigma)
    if not bool(finite.all()):
        row = int(torch.nonzero((~finite).any(dim=1))[0, 0])
        if ray_ids is None:
            rid = row
        else:
            cell = np.asarray(ray_ids[row]).reshape(-1)
            rid = int(cell[0]) if cell.size == 1 else tuple(int(v) for v in cell)
        raise TrainingDiverged(f"non-finite density on ray {rid}")
    delta = torch.cat(
        [t[:, 1:] - t[:, :-1], (t_far[:, None] - t[:, -1:]).clamp_min(0.0)], dim=1
    )
    sd = sigma * delta
    csum = torch.cumsum(sd, dim=1)
    trans_incl = torch.exp(-csum)
    trans_excl = torch.cat([torch.ones_like(csum[:, :1]), trans_incl[:, :-1]], dim=1)
    weights = trans_excl - trans_incl
    residual = trans_incl[:, -1]
    depth = (weights * t).sum(dim=1)
    outputs = {}
    for name, val in attrs.items():
        if val.dim() == 3:
            outputs[name] = (weights[:, :, None] * val).sum(dim=1)
        else:
            outputs[name] = (weights * val).sum(dim=1)
    return RenderOutput(
        t=t, weights=weights, trans_residual=residual, depth=depth, outputs=outputs
    )


@dataclass(frozen=True)
class SamplingConfig:
    """How many quadrature points to place per ray."""

    n_coarse: int = 128
    n_fine: int = 32

    def to_json(self):
        return {"n_coarse": self.n_coarse, "n_fine": self.n_fine}

    @staticmethod
    def from_json(d):
        return SamplingConfig(**d)


EVAL_SAMPLING = SamplingConfig(n_coarse=64, n_fine=32)


def sample_distances(field, batch, sampling, rng_strat=None, rng_imp=None):
    """Place quadrature points, using a density-only proposal pass when
    n_fine > 0. Returns (N, S) float64 numpy distances."""
    t_c = stratified_samples(batch.t_near, batch.t_far, sampling.n_coarse, rng_strat)
    if sampling.n_fine <= 0:
        return t_c
    with torch.no_grad():
        pos = batch.origins[:, None, :] + t_c[:, :, None] * batch.dirs[:, None, :]
        sigma = field.query_density(pos.reshape(-1, 3), batch.modality)
        sigma = sigma.reshape(t_c.shape)
        quad = composite(
            torch.from_numpy(t_c).to(sigma.dtype),
            sigma,
            {},
            torch.from_numpy(batch.t_far).to(sigma.dtype),
        )
        w = quad.weights.numpy()
    return importance_resample(t_c, w, batch.t_near, batch.t_far, sampling.n_fine, rng_imp)


def render_rays(field, batch, sampling, rng_strat=None, rng_imp=None):
    """Full differentiable render of a RayBatch through a field.

    Returns (RenderOutput, extras) where extras carries any per-sample
    side channels the field reports (e.g. density disagreement).
    """
    t_np = sample_distances(field, batch, sampling, rng_strat, rng_imp)
    N, S = t_np.shape
    pos = batch.origins[:, None, :] + t_np[:, :, None] * batch.dirs[:, None, :]
    dirs = np.broadcast_to(batch.dirs[:, None, :], pos.shape)
    raw = field.query(pos.reshape(-1, 3), dirs.reshape(-1, 3), batch.modality)
    sigma = raw["sigma"].reshape(N, S)
    dtype = sigma.dtype
    attrs = {}
    extras = {}
    for name, val in raw.items():
        if name == "sigma":
            continue
        if name.startswith("aux_"):
            extras[name] = val
        elif val.dim() == 2:
            attrs[name] = val.reshape(N, S, val.shape[-1])
        else:
            attrs[name] = val.reshape(N, S)
    out = composite(
        torch.from_numpy(t_np).to(dtype), sigma, attrs,
        torch.from_numpy(batch.t_far).to(dtype), ray_ids=batch.ids,
    )
    return out, extras


def drop_total(out):
    """Probability of no return: composited drop mass + unabsorbed mass."""
    return out.outputs["drop"] + out.trans_residual


def blend_background(out, background):
    """Camera color against a constant background via the residual mass."""
    bg = torch.as_tensor(background, dtype=out.depth.dtype)
    return out.outputs["color"] + out.trans_residual[:, None] * bg[None, :]


def render_frame(field, batch, sampling=EVAL_SAMPLING, chunk=8192, threads=1):
    """Deterministic no-grad render of a full frame, chunked.

    Returns per-ray numpy arrays. Chunks write into preallocated slots,
    so results are independent of the number of worker threads.
    """
    n = len(batch)
    res = {
        "depth": np.zeros(n, np.float32),
        "opacity": np.zeros(n, np.float32),
        "trans_residual": np.zeros(n, np.float32),
    }
    extra_keys = {}

    def run_chunk(start):
        stop = min(start + chunk, n)
        sub = batch.take(np.arange(start, stop))
        with torch.no_grad():
            out, _ = render_rays(field, sub, sampling)
        res["depth"][start:stop] = out.depth.numpy()
        res["opacity"][start:stop] = out.opacity.numpy()
        res["trans_residual"][start:stop] = out.trans_residual.numpy()
        for name, val in out.outputs.items():
            if name not in extra_keys:
                shape = (n,) if val.dim() == 1 else (n, val.shape[-1])
                extra_keys[name] = np.zeros(shape, np.float32)
                res[name] = extra_keys[name]
            extra_keys[name][start:stop] = val.numpy()

    starts = list(range(0, n, chunk))
    if threads > 1:
        # First chunk runs alone so output arrays exist before racing.
        run_chunk(starts[0])
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, starts[1:]))
    else:
        for s in starts:
            run_chunk(s)
    return res
