"""Multi-resolution hash-grid position encoding.

Each grid holds L levels of feature tables. A level is stored densely
(injective corner indexing) when its corner lattice fits the table,
otherwise corners are hashed with the usual XOR-of-primes scheme. The
encoding of a point is the concatenation over levels of trilinearly
interpolated features, optionally scaled per level by a smooth
progressive mask so coarse levels can be kept while fine levels fade out.

Feature tables live inside a ParamStore segment (see nets.py); this
module only defines the geometry/indexing math and the fused
encode kernel. The numba kernel is the fast path; a vectorized
numpy+torch reference path implements the same arithmetic and is used
to cross-check the kernel in tests (switchable via ``FAST_ENCODE``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numba
import numpy as np
import torch

from .errors import ConfigError

# Spatial-hash multipliers; first coordinate is left unmixed on purpose.
HASH_PRIMES = (1, 2654435761, 805459861)

# Module-level switch so tests can force the reference implementation.
FAST_ENCODE = True

DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class GridConfig:
    """Geometry of one multi-resolution hash grid.

    ``growth_factor`` may be given explicitly; when None it is derived so
    that level ``levels`` lands on ``finest_resolution``.
    """

    levels: int = 16
    feature_dim: int = 2
    table_size_log2: int = 15
    base_resolution: int = 16
    finest_resolution: int = 2048
    growth_factor: float | None = None
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not (1 <= self.table_size_log2 <= 26):
            raise ConfigError(f"table_size_log2 out of range: {self.table_size_log2}")
        if self.base_resolution < 2:
            raise ConfigError(f"base_resolution must be >= 2, got {self.base_resolution}")
        if self.growth() < 1.0:
            raise ConfigError("per-level growth factor must be >= 1")
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if not np.all(hi > lo):
            raise ConfigError(f"degenerate bounds {self.bounds}")

    @property
    def table_size(self):
        return 1 << self.table_size_log2

    def growth(self):
        if self.growth_factor is not None:
            return float(self.growth_factor)
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )

    def resolution(self, level):
        """Lattice resolution of a 1-based level (number of cells per axis)."""
        if not (1 <= level <= self.levels):
            raise ConfigError(f"level {level} outside 1..{self.levels}")
        return int(math.floor(self.base_resolution * self.growth() ** (level - 1)))

    def is_dense(self, level):
        """True when the (res+1)^3 corner lattice fits the table injectively."""
        r = self.resolution(level)
        return (r + 1) ** 3 <= self.table_size

    def to_json(self):
        d = asdict(self)
        d["bounds"] = [list(self.bounds[0]), list(self.bounds[1])]
        return d

    @staticmethod
    def from_json(d):
        d = dict(d)
        d["bounds"] = (tuple(d["bounds"][0]), tuple(d["bounds"][1]))
        return GridConfig(**d)


def level_mask(beta, levels):
    """Smooth progressive level weights w_l(beta), shape (levels,).

    w_l = (1 - cos(pi * clamp(beta - l + 1, 0, 1))) / 2 with 1-based l.
    beta = 0 masks everything; beta = levels passes everything; fractional
    beta fades the transition level smoothly.
    """
    l = np.arange(1, levels + 1, dtype=np.float64)
    t = np.clip(float(beta) - l + 1.0, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def hash_index(cell, level, config):
    """Table index of one integer corner coordinate at a 1-based level.

    Dense levels use row-major strides over the (res+1)^3 corner lattice;
    hashed levels XOR the prime-multiplied coordinates and mask to the
    table size (a power of two).
    """
    cx, cy, cz = (int(c) for c in cell)
    r = config.resolution(level)
    if not (0 <= cx <= r and 0 <= cy <= r and 0 <= cz <= r):
        raise ConfigError(f"corner {cell} outside lattice 0..{r}")
    if config.is_dense(level):
        return (cx * (r + 1) + cy) * (r + 1) + cz
    h = (cx * HASH_PRIMES[0]) ^ (cy * HASH_PRIMES[1]) ^ (cz * HASH_PRIMES[2])
    return h & (config.table_size - 1)


def init_tables(config, rng):
    """Fresh feature tables, uniform in [-1e-4, 1e-4], shape (L, T, d)."""
    shape = (config.levels, config.table_size, config.feature_dim)
    return rng.uniform(-1e-4, 1e-4, size=shape).astype(np.float32)


def _level_constants(config):
    """Per-level integer constants used by both encode paths."""
    L = config.levels
    res = np.empty(L, dtype=np.int64)
    mult = np.empty((L, 3), dtype=np.int64)
    dense = np.empty(L, dtype=np.bool_)
    for i in range(L):
        r = config.resolution(i + 1)
        res[i] = r
        if config.is_dense(i + 1):
            dense[i] = True
            mult[i] = ((r + 1) * (r + 1), r + 1, 1)
        else:
            dense[i] = False
            mult[i] = HASH_PRIMES
    return res, mult, dense


@numba.njit(cache=True)
def _encode_fwd_kernel(u, tables, res, mult, dense, mask_w, out, idx_out, w_out):
    """Fused normalize/corner/hash/trilinear forward.

    u: (B, 3) coordinates already normalized to [0, 1].
    tables: (L, T, d). out: (B, L*d). idx_out/w_out: (B, L, 8) corner
    indices and trilinear weights saved for the backward pass.
    """
    B = u.shape[0]
    L = res.shape[0]
    d = tables.shape[2]
    Tm = tables.shape[1] - 1
    for b in range(B):
        px = u[b, 0]
        py = u[b, 1]
        pz = u[b, 2]
        for l in range(L):
            r = res[l]
            ux = px * r
            uy = py * r
            uz = pz * r
            cx = int(np.floor(ux))
            cy = int(np.floor(uy))
            cz = int(np.floor(uz))
            if cx > r - 1:
                cx = r - 1
            if cy > r - 1:
                cy = r - 1
            if cz > r - 1:
                cz = r - 1
            if cx < 0:
                cx = 0
            if cy < 0:
                cy = 0
            if cz < 0:
                cz = 0
            fx = ux - cx
            fy = uy - cy
            fz = uz - cz
            if fx < 0.0:
                fx = 0.0
            if fy < 0.0:
                fy = 0.0
            if fz < 0.0:
                fz = 0.0
            if fx > 1.0:
                fx = 1.0
            if fy > 1.0:
                fy = 1.0
            if fz > 1.0:
                fz = 1.0
            m0 = mult[l, 0]
            m1 = mult[l, 1]
            m2 = mult[l, 2]
            mw = mask_w[l]
            k = 0
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                ax = (cx + dx) * m0
                for dy in range(2):
                    wy = fy if dy == 1 else 1.0 - fy
                    ay = (cy + dy) * m1
                    for dz in range(2):
                        wz = fz if dz == 1 else 1.0 - fz
                        az = (cz + dz) * m2
                        if dense[l]:
                            idx = ax + ay + az
                        else:
                            idx = (ax ^ ay ^ az) & Tm
                        w = wx * wy * wz
                        idx_out[b, l, k] = idx
                        w_out[b, l, k] = w
                        if mw != 0.0:
                            for j in range(d):
                                out[b, l * d + j] += mw * w * tables[l, idx, j]
                        k += 1


@numba.njit(cache=True)
def _encode_bwd_kernel(gout, idx, w, mask_w, gtab):
    """Scatter-accumulate table gradients (sequential, deterministic)."""
    B, L, K = idx.shape
    d = gtab.shape[2]
    for b in range(B):
        for l in range(L):
            mw = mask_w[l]
            if mw == 0.0:
                continue
            for k in range(K):
                i = idx[b, l, k]
                ww = w[b, l, k] * mw
                for j in range(d):
                    gtab[l, i, j] += ww * gout[b, l * d + j]


class _HashEncodeFn(torch.autograd.Function):
    """Autograd wrapper around the fused numba kernels.

    Positions are treated as constants (ray geometry is data here), so the
    only gradient produced is with respect to the feature tables.
    """

    @staticmethod
    def forward(ctx, tables, u_np, consts, mask_w):
        res, mult, dense = consts
        tab_np = tables.detach().numpy()
        B = u_np.shape[0]
        L, T, d = tab_np.shape
        out = np.zeros((B, L * d), dtype=tab_np.dtype)
        idx = np.empty((B, L, 8), dtype=np.int64)
        w = np.empty((B, L, 8), dtype=tab_np.dtype)
        _encode_fwd_kernel(u_np, tab_np, res, mult, dense, mask_w, out, idx, w)
        ctx.mmf_saved = (idx, w, mask_w, (L, T, d))
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, gout):
        idx, w, mask_w, (L, T, d) = ctx.mmf_saved
        g = np.zeros((L, T, d), dtype=w.dtype)
        gout_np = np.ascontiguousarray(gout.detach().numpy())
        _encode_bwd_kernel(gout_np, idx, w, mask_w, g)
        return torch.from_numpy(g), None, None, None


def corner_indices_and_weights(u, config):
    """Vectorized reference corner/index/weight computation.

    u: (B, 3) float64 normalized coordinates. Returns idx (B, L, 8) int64
    and w (B, L, 8) float64, corner order lexicographic in (dx, dy, dz).
    """
    res, mult, dense = _level_constants(config)
    u = np.asarray(u, dtype=np.float64)
    pos = u[:, None, :] * res[None, :, None].astype(np.float64)  # (B, L, 3)
    cell = np.floor(pos)
    cell = np.clip(cell, 0.0, (res[None, :, None] - 1).astype(np.float64))
    frac = np.clip(pos - cell, 0.0, 1.0)
    cell = cell.astype(np.int64)

    offsets = np.array(
        [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
        dtype=np.int64,
    )  # (8, 3)
    corner = cell[:, :, None, :] + offsets[None, None, :, :]  # (B, L, 8, 3)
    a = corner * mult[None, :, None, :]  # (B, L, 8, 3)
    idx_hash = (a[..., 0] ^ a[..., 1] ^ a[..., 2]) & (config.table_size - 1)
    idx_dense = a[..., 0] + a[..., 1] + a[..., 2]
    idx = np.where(dense[None, :, None], idx_dense, idx_hash)

    # Weight of corner (dx,dy,dz) = prod over axes of (frac if bit else 1-frac).
    w_axis = np.stack([1.0 - frac, frac], axis=2)  # (B, L, 2, 3)
    wx = w_axis[:, :, offsets[:, 0], 0]  # (B, L, 8)
    wy = w_axis[:, :, offsets[:, 1], 1]
    wz = w_axis[:, :, offsets[:, 2], 2]
    w = wx * wy * wz
    return idx, w


class HashGrid:
    """One named grid bound to a (L, T, d) feature-table tensor.

    The tensor is typically a ParamStore segment view so that encoding
    participates in the flat parameter vector's autograd graph.
    """

    def __init__(self, config, tables):
        """``tables`` is either a (L, T, d) tensor or a zero-arg callable
        returning one (a ParamStore segment accessor, so each encode call
        slices a fresh autograd view)."""
        self.config = config
        self._tables = tables
        r, m, dn = _level_constants(config)
        self._res, self._mult, self._dense = r, m, dn
        lo = np.asarray(config.bounds[0], dtype=np.float64)
        hi = np.asarray(config.bounds[1], dtype=np.float64)
        self._lo = lo
        self._inv_extent = 1.0 / (hi - lo)
        self._ones = np.ones(config.levels, dtype=np.float64)

    @property
    def tables(self):
        return self._tables() if callable(self._tables) else self._tables

    @property
    def feature_width(self):
        return self.config.levels * self.config.feature_dim

    def _normalize(self, x):
        """World positions -> [0,1]^3, clipped to the box."""
        if isinstance(x, torch.Tensor):
            x = x.detach().numpy()
        u = (np.asarray(x, dtype=np.float64) - self._lo) * self._inv_extent
        return np.clip(u, 0.0, 1.0)

    def encode(self, x, level_weights=None):
        """Encode positions to (B, L*d) features on the tables' graph.

        ``level_weights`` is an optional (L,) array (see ``level_mask``)
        scaling each level's contribution; None means all-ones.
        """
        tab = self.tables
        u = self._normalize(x)
        mask = self._ones if level_weights is None else np.asarray(level_weights, np.float64)
        if mask.shape != (self.config.levels,):
            raise ConfigError(f"level_weights must have shape ({self.config.levels},)")
        if FAST_ENCODE:
            np_dt = np.float64 if tab.dtype == torch.float64 else np.float32
            u_c = np.ascontiguousarray(u, dtype=np_dt)
            consts = (self._res, self._mult, self._dense)
            return _HashEncodeFn.apply(tab, u_c, consts, mask.astype(np_dt))
        return self._encode_reference(tab, u, mask)

    def _encode_reference(self, tab, u, mask):
        """Same arithmetic as the kernel, via numpy indices + torch gather."""
        cfg = self.config
        L, T, d = cfg.levels, cfg.table_size, cfg.feature_dim
        idx, w = corner_indices_and_weights(u, cfg)
        B = idx.shape[0]
        flat = tab.reshape(L * T, d)
        level_off = (np.arange(L, dtype=np.int64) * T)[None, :, None]
        gather_idx = torch.from_numpy((idx + level_off).reshape(-1))
        feats = flat[gather_idx].reshape(B, L, 8, d)
        w_t = torch.from_numpy(w).to(tab.dtype)
        lvl = (feats * w_t[..., None]).sum(dim=2)  # (B, L, d)
        m_t = torch.from_numpy(mask).to(tab.dtype)
        lvl = lvl * m_t[None, :, None]
        return lvl.reshape(B, L * d)

    def level_features(self, x, level_weights=None):
        """Per-level features, shape (B, L, d)."""
        B = np.asarray(x).shape[0] if not isinstance(x, torch.Tensor) else x.shape[0]
        return self.encode(x, level_weights).reshape(B, self.config.levels, self.config.feature_dim)

    def interpolate(self, x, level):
        """Trilinear features of a single 1-based level, shape (B, d)."""
        if not (1 <= level <= self.config.levels):
            raise ConfigError(f"level {level} outside 1..{self.config.levels}")
        return self.level_features(x)[:, level - 1, :]


def grid_header(config):
    """JSON header describing a serialized grid."""
    return {
        "levels": config.levels,
        "feature_dim": config.feature_dim,
        "table_size_log2": config.table_size_log2,
        "base_resolution": config.base_resolution,
        "growth_factor": config.growth(),
        "bounds": [list(config.bounds[0]), list(config.bounds[1])],
    }


def write_grid(path, config, tables):
    """Serialize one grid: u32 header length + JSON header + f32 level blobs."""
    from .fileio import canonical_json_bytes

    header = canonical_json_bytes(grid_header(config))
    tab = np.asarray(tables, dtype="<f4")
    if tab.shape != (config.levels, config.table_size, config.feature_dim):
        raise ConfigError(f"table shape {tab.shape} does not match config")
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        for l in range(config.levels):
            f.write(tab[l].tobytes())


def read_grid(path):
    """Inverse of write_grid; returns (header dict, tables (L, T, d) f32)."""
    import json as _json

    with open(path, "rb") as f:
        hlen = int.from_bytes(f.read(4), "little")
        header = _json.loads(f.read(hlen).decode("utf-8"))
        L = header["levels"]
        T = 1 << header["table_size_log2"]
        d = header["feature_dim"]
        tables = np.frombuffer(f.read(L * T * d * 4), dtype="<f4").reshape(L, T, d)
    return header, tables.copy()
