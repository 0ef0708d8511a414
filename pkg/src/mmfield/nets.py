"""Flat parameter store, small MLPs, Adam, and finite-difference checking.

All trainable state of a model lives in ONE flat tensor so the optimizer
is a handful of vectorized ops and checkpoints are a single blob. Named
segments are views into the flat vector; modules pull their segments by
name at forward time so everything stays on one autograd graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, TrainingDiverged

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-10

# Raw density is exponentiated with the pre-activation clamped here.
DENSITY_CLAMP = 15.0


def seed_for(seed, name):
    """Deterministic per-name RNG seed material (order-independent init)."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return [int(seed), int.from_bytes(digest, "little")]


def stream_rng(seed, name):
    """Named PCG64 stream; same (seed, name) always gives the same stream."""
    return np.random.default_rng(seed_for(seed, name))


class ParamStore:
    """Named segments inside a single flat trainable tensor plus Adam state."""

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype
        self._pending = []
        self._segments = {}  # name -> (offset, shape)
        self.flat = None
        self.adam_m = None
        self.adam_v = None
        self.adam_t = 0
        self.frozen = set()

    def register(self, name, values):
        """Queue a named segment (numpy array) before finalize()."""
        if self.flat is not None:
            raise ConfigError("cannot register segments after finalize()")
        if name in (n for n, _ in self._pending):
            raise ConfigError(f"duplicate segment name {name!r}")
        self._pending.append((name, np.asarray(values)))

    def finalize(self):
        if self.flat is not None:
            raise ConfigError("finalize() called twice")
        if not self._pending:
            raise ConfigError("no segments registered")
        offset = 0
        chunks = []
        np_dtype = np.float64 if self.dtype == torch.float64 else np.float32
        for name, arr in self._pending:
            self._segments[name] = (offset, tuple(arr.shape))
            chunks.append(arr.astype(np_dtype).reshape(-1))
            offset += arr.size
        self._pending = None
        flat_np = np.concatenate(chunks)
        self.flat = torch.from_numpy(flat_np)
        self.flat.requires_grad_(True)
        self.adam_m = torch.zeros_like(self.flat)
        self.adam_v = torch.zeros_like(self.flat)
        self.adam_t = 0

    @property
    def size(self):
        return 0 if self.flat is None else self.flat.numel()

    def segment_names(self):
        return list(self._segments.keys())

    def _slice(self, name):
        if name not in self._segments:
            raise ConfigError(f"unknown segment {name!r}")
        offset, shape = self._segments[name]
        n = int(np.prod(shape)) if shape else 1
        return offset, n, shape

    def segment(self, name):
        """Autograd view of a named segment (fresh slice each call)."""
        offset, n, shape = self._slice(name)
        return self.flat[offset : offset + n].view(shape)

    def segment_array(self, name):
        """Detached numpy copy of a segment's current values."""
        offset, n, shape = self._slice(name)
        return self.flat.detach()[offset : offset + n].view(shape).numpy().copy()

    def set_segment(self, name, values):
        """Overwrite a segment's values in place (no autograd)."""
        offset, n, shape = self._slice(name)
        arr = np.asarray(values)
        if tuple(arr.shape) != shape:
            raise ConfigError(f"segment {name!r} expects shape {shape}, got {arr.shape}")
        with torch.no_grad():
            src = np.ascontiguousarray(arr.reshape(-1), dtype=np.float64)
            self.flat[offset : offset + n] = torch.from_numpy(src).to(self.flat.dtype)

    def freeze(self, name):
        self._slice(name)  # validates
        self.frozen.add(name)

    def zero_grad(self):
        self.flat.grad = None

    def _worst_segment(self, bad_mask):
        worst, worst_count = None, -1
        for name in self._segments:
            offset, n, _ = self._slice(name)
            count = int(bad_mask[offset : offset + n].sum())
            if count > worst_count:
                worst, worst_count = name, count
        return worst, worst_count

    def adam_step(self, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        """One Adam update on the flat vector; frozen segments stay put."""
        g = self.flat.grad
        if g is None:
            raise ConfigError("adam_step() called with no gradient populated")
        with torch.no_grad():
            for name in self.frozen:
                offset, n, _ = self._slice(name)
                g[offset : offset + n] = 0.0
            finite = torch.isfinite(g)
            if not bool(finite.all()):
                worst, count = self._worst_segment(~finite)
                raise TrainingDiverged(
                    f"non-finite gradient ({count} entries) in segment {worst!r}",
                    segment=worst,
                )
            self.adam_t += 1
            t = self.adam_t
            self.adam_m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            self.adam_v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (self.adam_v / (1.0 - beta2**t)).sqrt_().add_(eps)
            self.flat.data.addcdiv_(self.adam_m, denom, value=-lr / (1.0 - beta1**t))
            if not bool(torch.isfinite(self.flat).all()):
                bad = ~torch.isfinite(self.flat)
                worst, count = self._worst_segment(bad)
                raise TrainingDiverged(
                    f"non-finite parameters ({count} entries) in segment {worst!r}",
                    segment=worst,
                )
        self.flat.grad = None

    def state_blobs(self):
        """(params, m, v) as float32 numpy copies for checkpointing."""
        return (
            self.flat.detach().numpy().astype("<f4"),
            self.adam_m.numpy().astype("<f4"),
            self.adam_v.numpy().astype("<f4"),
        )

    def load_state_blobs(self, params, m, v, adam_t):
        with torch.no_grad():
            self.flat.copy_(torch.from_numpy(np.asarray(params)).to(self.flat.dtype))
            self.adam_m.copy_(torch.from_numpy(np.asarray(m)).to(self.flat.dtype))
            self.adam_v.copy_(torch.from_numpy(np.asarray(v)).to(self.flat.dtype))
        self.adam_t = int(adam_t)

    def segment_table(self):
        """Serializable [(name, offset, shape)] in layout order."""
        return [
            {"name": n, "offset": off, "shape": list(shape)}
            for n, (off, shape) in self._segments.items()
        ]


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected stack; widths includes input and output."""

    widths: tuple
    hidden_activation: str = "relu"
    output_activation: str = "none"  # none | sigmoid

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("MlpSpec needs at least input and output widths")
        if self.hidden_activation not in ("relu", "softplus"):
            raise ConfigError(f"unknown activation {self.hidden_activation!r}")
        if self.output_activation not in ("none", "sigmoid"):
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1


def register_mlp(store, prefix, spec, rng):
    """Register weight/bias segments for an MLP (Kaiming-uniform W, zero b)."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = float(np.sqrt(6.0 / fan_in))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        store.register(f"{prefix}.w{i}", w)
        store.register(f"{prefix}.b{i}", np.zeros(fan_out, dtype=np.float32))


def mlp_forward(store, prefix, spec, x):
    if x.shape[-1] != spec.widths[0]:
        raise ConfigError(
            f"{prefix}: input width {x.shape[-1]} != expected {spec.widths[0]}"
        )
    h = x
    for i in range(spec.n_layers):
        w = store.segment(f"{prefix}.w{i}")
        b = store.segment(f"{prefix}.b{i}")
        h = h @ w + b
        if i < spec.n_layers - 1:
            if spec.hidden_activation == "relu":
                h = torch.relu(h)
            else:
                h = torch.nn.functional.softplus(h)
    if spec.output_activation == "sigmoid":
        h = torch.sigmoid(h)
    return h


def density_activation(raw):
    """Non-negative density: exp of the clamped raw value."""
    return torch.exp(torch.clamp(raw, max=DENSITY_CLAMP))


def encode_direction(d, octaves=4):
    """Frequency encoding of unit direction vectors -> (B, 3*2*octaves)."""
    parts = []
    for k in range(octaves):
        ang = d * (np.pi * (2.0**k))
        parts.append(torch.sin(ang))
        parts.append(torch.cos(ang))
    return torch.cat(parts, dim=-1)


@dataclass
class FiniteDiffReport:
    n_probes: int
    max_rel_err: float
    max_abs_err_zero_grad: float
    failures: list
    n_resampled: int = 0

    @property
    def ok(self):
        return not self.failures


def finite_diff_check(loss_fn, store, n_probes=64, eps=1e-4, rng=None,
                      rel_tol=1e-3, abs_tol=1e-5):
    """Compare autograd against central finite differences on random probes.

    ``loss_fn`` must be a deterministic closure returning a scalar tensor
    from the store's current parameters. Probes where both sides are
    essentially zero use the absolute criterion instead of the relative
    one. Intended for float64 stores; float32 probes drown in rounding.

    A probe fails only when the mismatch exceeds both ``abs_tol`` and
    ``rel_tol`` times the gradient magnitude (the atol/rtol rule of
    torch.autograd.gradcheck, whose default atol is also 1e-5). The
    absolute floor covers coordinates whose gradient terms nearly cancel:
    there the central-difference truncation error f'''*eps^2/6 is fixed
    while the gradient is arbitrarily small, so no relative tolerance is
    attainable at a fixed step size.

    The loss is only piecewise smooth (ReLU), so a probe can land where the
    one-sided slopes genuinely differ at scale ``eps``; there the central
    difference estimates nothing comparable to autograd. A failing probe
    whose forward/backward differences disagree strongly is therefore
    resampled onto another coordinate, within a bounded retry budget so a
    non-deterministic loss still surfaces as a failure.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    grad = store.flat.grad.detach().clone()
    store.zero_grad()

    pool_size = min(4 * n_probes, store.size)
    pool = [int(i) for i in rng.choice(store.size, size=pool_size, replace=False)]
    retries_left = pool_size - min(n_probes, store.size)
    max_rel, max_abs_zero = 0.0, 0.0
    failures = []
    kept = 0
    n_resampled = 0
    with torch.no_grad():
        l0 = float(loss_fn())
        for i in pool:
            if kept >= min(n_probes, store.size):
                break
            orig = float(store.flat[i])
            store.flat[i] = orig + eps
            lp = float(loss_fn())
            store.flat[i] = orig - eps
            lm = float(loss_fn())
            store.flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            an = float(grad[i])
            err_abs = abs(fd - an)
            if min(abs(an), abs(fd)) < 1e-8:
                err = err_abs
            else:
                err = err_abs / max(abs(an), abs(fd))
            bad = err_abs > abs_tol and err_abs > rel_tol * max(abs(an), abs(fd))
            if bad and retries_left > 0:
                # Kinks inside (-eps, +eps) make the one-sided slopes
                # disagree: by at least the mismatch when one interval is
                # clean, or by a visible fraction of the slope when both are
                # straddled. Either way the central difference estimates no
                # derivative, so the probe moves elsewhere. A wrong gradient
                # on a smooth loss leaves fwd ~= bwd and still fails.
                fwd = (lp - l0) / eps
                bwd = (l0 - lm) / eps
                jump = abs(fwd - bwd)
                if jump > abs(fd - an) or jump > 0.05 * max(abs(fwd), abs(bwd)):
                    retries_left -= 1
                    n_resampled += 1
                    continue
            kept += 1
            if min(abs(an), abs(fd)) < 1e-8:
                max_abs_zero = max(max_abs_zero, err)
            else:
                max_rel = max(max_rel, err)
            if bad:
                failures.append((i, an, fd, err))
    return FiniteDiffReport(
        n_probes=kept,
        max_rel_err=max_rel,
        max_abs_err_zero_grad=max_abs_zero,
        failures=failures,
        n_resampled=n_resampled,
    )
