"""The field-architecture zoo.

One implicit scene field per model, queryable by modality. Every
architecture shares the same decoder anatomy -- a geometry MLP emitting
density + a feature, and per-modality heads consuming that feature plus
a direction encoding -- and differs only in how positions are encoded:

single_lidar / single_camera
    one hash grid, one geometry MLP, one head; the clean upper bound.
shared_fusion
    both modalities share one grid and one geometry MLP (classic joint
    fusion; misalignment makes the modalities fight here).
decomp_geometry
    shared grid, per-modality geometry MLPs.
decomp_density
    shared grid and trunk, but two density outputs (one per modality)
    over a shared feature.
decomp_hash
    fully decomposed: per-modality grids and geometry MLPs under one
    optimizer. Reduces to the two single models exactly.
hard_constraint
    decomp_hash plus a penalty |sigma_l - sigma_c| tying the geometries.
gaa
    per-modality grids, one shared geometry MLP; each query fuses its
    own full-resolution encoding with the OTHER modality's encoding
    masked to the first beta levels (coarse geometry is shared, fine
    detail stays private).
sgi
    a shared base grid initialized from a pretrained single_lidar
    checkpoint plus per-modality residual grids (variants below).
alignmif
    sgi-style base + residuals, fused gaa-style across modalities.

SGI variants: "residual" (base + per-modality residual grids),
"load_only" (just the loaded base, trainable), "load_frozen" (loaded
base, frozen), "detach_camera_density" (residual topology, camera
queries do not backprop into density).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch

from .checkpoints import extract_segment, load_state
from .errors import CheckpointError, ConfigError, ModalityError
from .grids import GridConfig, HashGrid, init_tables, level_mask
from .nets import (
    MlpSpec,
    ParamStore,
    density_activation,
    encode_direction,
    mlp_forward,
    register_mlp,
    stream_rng,
)

ARCHITECTURES = (
    "single_lidar",
    "single_camera",
    "shared_fusion",
    "decomp_geometry",
    "decomp_density",
    "decomp_hash",
    "hard_constraint",
    "gaa",
    "sgi",
    "alignmif",
)

FUSIONS = ("concat", "add", "gated")
SGI_VARIANTS = ("residual", "load_only", "load_frozen", "detach_camera_density")

_SGI_ARCHS = ("sgi", "alignmif")
_FUSED_ARCHS = ("gaa", "alignmif")
_DECOMPOSED = ("decomp_hash", "hard_constraint")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    beta: float | None = None
    fusion: str = "concat"
    sgi_init: str | None = None
    sgi_trainable: bool = True
    sgi_variant: str = "residual"
    hard_constraint_weight: float = 1.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.sgi_variant not in SGI_VARIANTS:
            raise ConfigError(f"unknown sgi variant {self.sgi_variant!r}")
        if self.hard_constraint_weight < 0:
            raise ConfigError("hard_constraint_weight must be >= 0")

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return ModelSpec(**d)


@dataclass(frozen=True)
class MlpConfig:
    geo_hidden: int = 64
    geo_layers: int = 2
    geo_feature_dim: int = 15
    head_hidden: int = 64
    head_layers: int = 2
    dir_octaves: int = 4

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return MlpConfig(**d)


def _modalities_of(arch):
    if arch == "single_lidar":
        return ("lidar",)
    if arch == "single_camera":
        return ("camera",)
    return ("lidar", "camera")


def _fusion_width(fusion, ld):
    return ld if fusion == "add" else 2 * ld


def _plan(spec, grid_config, mlp_config):
    """Which segments exist and how wide the geometry inputs are."""
    ld = grid_config.levels * grid_config.feature_dim
    arch = spec.architecture
    grids = []
    geo = {}  # prefix -> MlpSpec
    sigma_cols = 1
    feat = mlp_config.geo_feature_dim
    hidden = [mlp_config.geo_hidden] * mlp_config.geo_layers

    def geo_spec(width_in, n_sigma=1):
        return MlpSpec(tuple([width_in] + hidden + [n_sigma + feat]))

    if arch in ("single_lidar", "single_camera"):
        m = _modalities_of(arch)[0]
        grids = [f"grid_{m}"]
        geo[f"geo_{m}"] = geo_spec(ld)
    elif arch == "shared_fusion":
        grids = ["grid_shared"]
        geo["geo_shared"] = geo_spec(ld)
    elif arch == "decomp_geometry":
        grids = ["grid_shared"]
        geo["geo_lidar"] = geo_spec(ld)
        geo["geo_camera"] = geo_spec(ld)
    elif arch == "decomp_density":
        grids = ["grid_shared"]
        sigma_cols = 2
        geo["geo_shared"] = geo_spec(ld, n_sigma=2)
    elif arch in _DECOMPOSED:
        grids = ["grid_lidar", "grid_camera"]
        geo["geo_lidar"] = geo_spec(ld)
        geo["geo_camera"] = geo_spec(ld)
    elif arch == "gaa":
        grids = ["grid_lidar", "grid_camera"]
        geo["geo_shared"] = geo_spec(_fusion_width(spec.fusion, ld))
    elif arch == "sgi":
        if spec.sgi_variant in ("load_only", "load_frozen"):
            grids = ["grid_init"]
        else:
            grids = ["grid_init", "grid_lidar", "grid_camera"]
        geo["geo_shared"] = geo_spec(ld)
    elif arch == "alignmif":
        grids = ["grid_init", "grid_lidar", "grid_camera"]
        geo["geo_shared"] = geo_spec(_fusion_width(spec.fusion, ld))

    head_w = [mlp_config.head_hidden] * mlp_config.head_layers
    head_in = feat + 6 * mlp_config.dir_octaves
    heads = {}
    if "camera" in _modalities_of(arch):
        heads["head_camera"] = MlpSpec(tuple([head_in] + head_w + [3]), output_activation="sigmoid")
    if "lidar" in _modalities_of(arch):
        heads["head_lidar"] = MlpSpec(tuple([head_in] + head_w + [2]), output_activation="sigmoid")
    return grids, geo, heads, sigma_cols


def gaa_fuse(x, modality, grids, beta, fusion="concat"):
    """Cross-modality feature fusion: own encoding joined with the other
    modality's coarse (beta-masked) encoding.

    grids: {"lidar": HashGrid, "camera": HashGrid} sharing domain bounds.
    Ordering is own-modality-first so one geometry MLP can consume both
    branches with consistent slot semantics. fusion: concat | add | gated.
    """
    if modality not in grids:
        raise ModalityError(f"no grid for modality {modality!r}")
    if fusion not in FUSIONS:
        raise ConfigError(f"unknown fusion {fusion!r}")
    cross_mod = "camera" if modality == "lidar" else "lidar"
    own_grid, cross_grid = grids[modality], grids[cross_mod]
    if own_grid.config.bounds != cross_grid.config.bounds:
        raise ConfigError("gaa_fuse requires grids with identical domain bounds")
    mask = None if beta is None else level_mask(beta, cross_grid.config.levels)
    own = own_grid.encode(x)
    cross = cross_grid.encode(x, mask)
    if fusion == "add":
        return own + cross
    if fusion == "gated":
        return torch.cat([own, torch.sigmoid(own) * cross], dim=-1)
    return torch.cat([own, cross], dim=-1)


def sgi_encode(x, modality, init_grid, modality_grid, mask=None):
    """Shared-base encoding: gamma_init(x) + gamma_modality(x).

    The optional level mask applies to the modality residual ONLY; the
    base encoding always enters at full strength.
    """
    del modality  # both branches share the formula; tag kept for symmetry
    ca, cb = init_grid.config, modality_grid.config
    if (ca.levels, ca.feature_dim, ca.bounds) != (cb.levels, cb.feature_dim, cb.bounds):
        raise ConfigError("sgi_encode requires grids with matching levels/width/bounds")
    return init_grid.encode(x) + modality_grid.encode(x, mask)


def load_sgi_tables(path, grid_config):
    """Read the pretrained grid out of a checkpoint for SGI initialization."""
    header, blobs = load_state(path)
    want = grid_config.to_json()
    have = header.get("grid_config")
    if have != want:
        raise CheckpointError(
            f"SGI checkpoint grid config {have} does not match model grid config {want}"
        )
    params = blobs["params"]
    for name in ("grid_lidar", "grid_init", "grid_shared"):
        try:
            return extract_segment(header, params, name).astype(np.float32)
        except CheckpointError:
            continue
    raise CheckpointError(f"{path}: no grid segment usable for SGI initialization")


class Model:
    """A built field: ParamStore + grids + decoder, queryable by modality."""

    def __init__(self, spec, grid_config, mlp_config, store, grids, geo_specs,
                 head_specs, sigma_cols):
        self.spec = spec
        self.grid_config = grid_config
        self.mlp_config = mlp_config
        self.store = store
        self.grids = grids
        self.geo_specs = geo_specs
        self.head_specs = head_specs
        self._sigma_cols = sigma_cols
        self.modalities = _modalities_of(spec.architecture)
        beta = spec.beta
        self._beta_mask = None if beta is None else level_mask(beta, grid_config.levels)

    @property
    def dtype(self):
        return self.store.dtype

    def _geo_prefix(self, modality):
        return f"geo_{modality}" if f"geo_{modality}" in self.geo_specs else "geo_shared"

    def _fuse(self, own, cross):
        fusion = self.spec.fusion
        if fusion == "add":
            return own + cross
        if fusion == "gated":
            return torch.cat([own, torch.sigmoid(own) * cross], dim=-1)
        return torch.cat([own, cross], dim=-1)

    def encoder_features(self, x, modality):
        """Position encoding fed to the modality's geometry MLP."""
        arch = self.spec.architecture
        if arch in ("single_lidar", "single_camera", "shared_fusion",
                    "decomp_geometry", "decomp_density"):
            name = f"grid_{modality}" if f"grid_{modality}" in self.grids else "grid_shared"
            return self.grids[name].encode(x)
        if arch in _DECOMPOSED:
            return self.grids[f"grid_{modality}"].encode(x)
        cross_mod = "camera" if modality == "lidar" else "lidar"
        if arch == "gaa":
            own = self.grids[f"grid_{modality}"].encode(x)
            cross = self.grids[f"grid_{cross_mod}"].encode(x, self._beta_mask)
            return self._fuse(own, cross)
        if arch == "sgi":
            base = self.grids["grid_init"].encode(x)
            if self.spec.sgi_variant in ("load_only", "load_frozen"):
                return base
            return base + self.grids[f"grid_{modality}"].encode(x)
        if arch == "alignmif":
            base = self.grids["grid_init"].encode(x)
            own = base + self.grids[f"grid_{modality}"].encode(x)
            cross = base + self.grids[f"grid_{cross_mod}"].encode(x, self._beta_mask)
            return self._fuse(own, cross)
        raise ConfigError(f"unhandled architecture {arch!r}")

    def _geo(self, x, modality):
        """Run encoder + geometry MLP; returns (sigma, feature)."""
        feats = self.encoder_features(x, modality)
        prefix = self._geo_prefix(modality)
        out = mlp_forward(self.store, prefix, self.geo_specs[prefix], feats)
        if self._sigma_cols == 2:
            col = 0 if modality == "lidar" else 1
            raw = out[:, col]
            feat = out[:, 2:]
        else:
            raw = out[:, 0]
            feat = out[:, 1:]
        sigma = density_activation(raw)
        if (
            self.spec.architecture == "sgi"
            and self.spec.sgi_variant == "detach_camera_density"
            and modality == "camera"
        ):
            sigma = sigma.detach()
        return sigma, feat

    def query_density(self, x, modality):
        """Density-only forward (proposal pass)."""
        if modality not in self.modalities:
            raise ModalityError(f"{self.spec.architecture} has no {modality!r} branch")
        sigma, _ = self._geo(x, modality)
        return sigma

    def query(self, x, dirs, modality):
        """Full forward: density plus the modality's radiometric heads.

        x, dirs: (B, 3) numpy in world coordinates. Returns a dict of
        torch tensors on the parameter graph; keys prefixed aux_ are
        per-sample side channels (not composited).
        """
        if modality not in self.modalities:
            raise ModalityError(f"{self.spec.architecture} has no {modality!r} branch")
        sigma, feat = self._geo(x, modality)
        out = {"sigma": sigma}
        if self.spec.architecture == "hard_constraint":
            other = "camera" if modality == "lidar" else "lidar"
            sigma_other, _ = self._geo(x, other)
            out["aux_hc"] = (sigma - sigma_other).abs()
        d_t = torch.from_numpy(np.ascontiguousarray(dirs)).to(feat.dtype)
        d_enc = encode_direction(d_t, self.mlp_config.dir_octaves)
        head_in = torch.cat([feat, d_enc], dim=-1)
        if modality == "camera":
            out["color"] = mlp_forward(
                self.store, "head_camera", self.head_specs["head_camera"], head_in
            )
        else:
            li = mlp_forward(self.store, "head_lidar", self.head_specs["head_lidar"], head_in)
            out["intensity"] = li[:, 0]
            out["drop"] = li[:, 1]
        return out

    def hard_constraint_penalty(self, x):
        """weight * mean |sigma_l - sigma_c| at the given positions."""
        if self.spec.architecture != "hard_constraint":
            raise ConfigError("hard_constraint_penalty needs the hard_constraint architecture")
        sl, _ = self._geo(x, "lidar")
        sc, _ = self._geo(x, "camera")
        return self.spec.hard_constraint_weight * (sl - sc).abs().mean()


def build_model(spec, grid_config=None, mlp_config=None, seed=0,
                dtype=torch.float32, sgi_tables=None):
    """Construct a Model with per-segment deterministic initialization.

    Each component draws from its own (seed, name) RNG stream, so a
    segment shared by two architectures initializes identically in both.
    SGI-style architectures need either ``spec.sgi_init`` (a checkpoint
    path) or preloaded ``sgi_tables``.
    """
    grid_config = grid_config or GridConfig()
    mlp_config = mlp_config or MlpConfig()
    if spec.beta is not None and not (0 <= spec.beta <= grid_config.levels):
        raise ConfigError(f"beta {spec.beta} outside 0..{grid_config.levels}")
    if spec.sgi_init is not None and spec.architecture not in _SGI_ARCHS:
        raise ConfigError(
            f"sgi_init is only meaningful for {_SGI_ARCHS}, not {spec.architecture!r}"
        )

    grids, geo_specs, head_specs, sigma_cols = _plan(spec, grid_config, mlp_config)

    if spec.architecture in _SGI_ARCHS and sgi_tables is None:
        if spec.sgi_init is None:
            raise ConfigError(
                f"{spec.architecture} requires a pretrained grid (sgi_init checkpoint)"
            )
        sgi_tables = load_sgi_tables(spec.sgi_init, grid_config)

    store = ParamStore(dtype)
    for name in grids:
        if name == "grid_init":
            want = (grid_config.levels, grid_config.table_size, grid_config.feature_dim)
            if tuple(sgi_tables.shape) != want:
                raise CheckpointError(
                    f"SGI tables shape {sgi_tables.shape} != grid shape {want}"
                )
            store.register(name, sgi_tables)
        else:
            store.register(name, init_tables(grid_config, stream_rng(seed, f"init/{name}")))
    for prefix in sorted(geo_specs):
        register_mlp(store, prefix, geo_specs[prefix], stream_rng(seed, f"init/{prefix}"))
    for prefix in sorted(head_specs):
        register_mlp(store, prefix, head_specs[prefix], stream_rng(seed, f"init/{prefix}"))
    store.finalize()

    if "grid_init" in grids and (not spec.sgi_trainable or spec.sgi_variant == "load_frozen"):
        store.freeze("grid_init")

    grid_objs = {
        name: HashGrid(grid_config, (lambda n: (lambda: store.segment(n)))(name))
        for name in grids
    }
    return Model(spec, grid_config, mlp_config, store, grid_objs,
                 geo_specs, head_specs, sigma_cols)
