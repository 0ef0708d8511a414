"""Operator surface: every experiment is a subcommand.

Each run writes a resolved_config.json next to its outputs and echoes the
same JSON to stderr, so any result can be reproduced from its artifacts
alone. No environment variables are consulted; flags and config files are
the only inputs. Exit code 0 only on success.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .diagnostics import dump_bev_features, dump_ray_density
from .errors import ConfigError, MMFieldError
from .evaluation import evaluate_model, write_eval_outputs
from .fileio import dump_json, ensure_dir, write_f32, write_ppm
from .grids import GridConfig
from .models import MlpConfig, ModelSpec, build_model
from .rendering import EVAL_SAMPLING, render_frame
from .scene import Dataset, MisalignmentSpec, generate_dataset, preset
from .training import (
    TrainConfig,
    load_checkpoint,
    run_training,
    wlambda_sweep,
)

_KNOBS = (
    "rot_x", "rot_y", "rot_z",
    "trans_x", "trans_y", "trans_z",
    "lidar_dilation", "temporal_offset",
)


def _log(msg):
    print(msg, file=sys.stderr)


def _echo_config(resolved, where):
    """Write resolved_config.json next to the outputs and echo to stderr."""
    target = where if os.path.isdir(where) or not os.path.splitext(where)[1] else os.path.dirname(os.path.abspath(where))
    ensure_dir(target)
    path = os.path.join(target, "resolved_config.json")
    dump_json(path, resolved)
    _log(json.dumps(resolved, indent=2, sort_keys=True))
    return path


def _parse_knobs(pairs):
    knobs = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--knob expects k=v, got {pair!r}")
        key, val = pair.split("=", 1)
        if key not in _KNOBS:
            raise ConfigError(f"unknown knob {key!r}; valid: {', '.join(_KNOBS)}")
        try:
            knobs[key] = float(val)
        except ValueError:
            raise ConfigError(f"knob {key} needs a number, got {val!r}") from None
    return knobs


def _apply_knobs(mis, knobs):
    rot = list(mis.rotation)
    trans = list(mis.translation)
    for axis, name in enumerate(("rot_x", "rot_y", "rot_z")):
        if name in knobs:
            rot[axis] = knobs[name]
    for axis, name in enumerate(("trans_x", "trans_y", "trans_z")):
        if name in knobs:
            trans[axis] = knobs[name]
    return MisalignmentSpec(
        rotation=tuple(rot),
        translation=tuple(trans),
        lidar_dilation=knobs.get("lidar_dilation", mis.lidar_dilation),
        temporal_offset=knobs.get("temporal_offset", mis.temporal_offset),
    )


def _grid_config(d, bounds=None):
    d = dict(d or {})
    if "bounds" in d:
        d["bounds"] = (tuple(d["bounds"][0]), tuple(d["bounds"][1]))
    elif bounds is not None:
        d["bounds"] = bounds
    return GridConfig(**d)


def _load_json_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")
    with open(path) as f:
        return json.load(f)


def cmd_gen_scene(args):
    scene = preset(args.preset)
    knobs = _parse_knobs(args.knob)
    if knobs:
        scene = replace(scene, misalignment=_apply_knobs(scene.misalignment, knobs))
    ensure_dir(args.out)
    # No --out echo here: two generations with the same preset/knobs/seed
    # must produce byte-identical directories wherever they land.
    _echo_config(
        {
            "command": "gen-scene",
            "version": __version__,
            "preset": args.preset,
            "knobs": knobs,
            "seed": args.seed,
            "misalignment": scene.misalignment.to_json(),
        },
        args.out,
    )
    generate_dataset(scene, args.out, seed=args.seed)
    _log(f"dataset written to {args.out}")
    return 0


def _resolve_train_config(cfg, out_dir):
    """Turn a train config document into (dataset, dataset_path, spec, tc, gc, mc)."""
    if "dataset" in cfg:
        data_path = cfg["dataset"]
    elif "scene" in cfg:
        sc = cfg["scene"]
        scene = preset(sc["preset"])
        knobs = sc.get("knobs", {})
        bad = set(knobs) - set(_KNOBS)
        if bad:
            raise ConfigError(f"unknown knobs in config: {sorted(bad)}")
        if knobs:
            scene = replace(scene, misalignment=_apply_knobs(scene.misalignment, knobs))
        data_path = os.path.join(out_dir, "dataset")
        generate_dataset(scene, data_path, seed=sc.get("seed", 0))
    else:
        raise ConfigError("train config needs a 'dataset' path or a 'scene' block")
    dataset = Dataset(data_path)
    spec = ModelSpec.from_json(cfg.get("model", {"architecture": "shared_fusion"}))
    tc = TrainConfig(**cfg.get("train", {}))
    gc = _grid_config(cfg.get("grid"), bounds=dataset.bounds)
    mc = MlpConfig(**cfg.get("mlp", {}))
    return dataset, data_path, spec, tc, gc, mc


def cmd_train(args):
    cfg = _load_json_file(args.config)
    ensure_dir(args.out)
    dataset, data_path, spec, tc, gc, mc = _resolve_train_config(cfg, args.out)
    _echo_config(
        {
            "command": "train",
            "version": __version__,
            "config_file": os.path.abspath(args.config),
            "dataset": os.path.abspath(data_path),
            "model": spec.to_json(),
            "train": tc.to_json(),
            "grid": gc.to_json(),
            "mlp": mc.to_json(),
            "out": args.out,
        },
        args.out,
    )
    _, final = run_training(
        spec, dataset, tc, args.out, grid_config=gc, mlp_config=mc,
        quiet=False, dataset_path=os.path.abspath(data_path),
    )
    _log(f"final checkpoint: {final}")
    return 0


def cmd_eval(args):
    model, _, header, _ = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.data)
    result = evaluate_model(model, dataset, split=args.split, threads=args.threads)
    out = args.out
    if not out.endswith(".json"):
        out = os.path.join(out, "metrics.json")
    _echo_config(
        {
            "command": "eval",
            "version": __version__,
            "checkpoint": os.path.abspath(args.checkpoint),
            "data": os.path.abspath(args.data),
            "split": args.split,
            "step": header.get("step"),
            "out": os.path.abspath(out),
            "threads": args.threads,
        },
        out,
    )
    write_eval_outputs(result, out)
    _log(json.dumps(result["summary"], indent=2, sort_keys=True))
    _log(f"metrics written to {out}")
    return 0


def _to_u8_plane(plane, scale):
    return np.repeat((plane / scale if scale > 0 else plane)[:, :, None], 3, axis=2)


def cmd_render(args):
    model, _, header, _ = load_checkpoint(args.checkpoint)
    data_path = args.data or header.get("dataset")
    if not data_path:
        raise ConfigError("checkpoint records no dataset path; pass --data DIR")
    dataset = Dataset(data_path)
    frames = dataset.frames()
    if not (0 <= args.pose < len(frames)):
        raise ConfigError(f"--pose {args.pose} outside 0..{len(frames) - 1}")
    ensure_dir(args.out)
    _echo_config(
        {
            "command": "render",
            "version": __version__,
            "checkpoint": os.path.abspath(args.checkpoint),
            "data": os.path.abspath(data_path),
            "pose": args.pose,
            "out": args.out,
            "threads": args.threads,
        },
        args.out,
    )
    frame = frames[args.pose]
    if "camera" in model.modalities:
        batch = dataset.camera_batch(frame)
        res = render_frame(model, batch, EVAL_SAMPLING, threads=args.threads)
        h, w = dataset.camera.height, dataset.camera.width
        bg = np.asarray(dataset.background, dtype=np.float32)
        img = (res["color"] + res["trans_residual"][:, None] * bg[None, :]).reshape(h, w, 3)
        write_ppm(os.path.join(args.out, "camera.ppm"), img)
        write_f32(os.path.join(args.out, "camera.f32"), img)
    if "lidar" in model.modalities:
        batch = dataset.lidar_batch(frame)
        res = render_frame(model, batch, EVAL_SAMPLING, threads=args.threads)
        shape = (dataset.lidar.n_beams, dataset.lidar.n_azimuth)
        rng_plane = res["depth"].reshape(shape)
        int_plane = res["intensity"].reshape(shape)
        drop_plane = (res["drop"] + res["trans_residual"]).reshape(shape)
        for name, plane, scale in (
            ("lidar_range", rng_plane, dataset.lidar.max_range),
            ("lidar_intensity", int_plane, 1.0),
            ("lidar_drop", drop_plane, 1.0),
        ):
            write_f32(os.path.join(args.out, name + ".f32"), plane.astype(np.float32))
            write_ppm(os.path.join(args.out, name + ".ppm"),
                      np.clip(_to_u8_plane(plane, scale), 0.0, 1.0))
    _log(f"renders written to {args.out}")
    return 0


_ABLATE_SUITES = ("arch", "gaa", "sgi", "levels", "wlambda")


def _suite_rows(suite, levels_total):
    beta_mid = levels_total // 2
    if suite == "arch":
        return [
            ("shared_fusion", ModelSpec("shared_fusion")),
            ("decomp_geometry", ModelSpec("decomp_geometry")),
            ("decomp_density", ModelSpec("decomp_density")),
            ("decomp_hash", ModelSpec("decomp_hash")),
            ("hard_constraint", ModelSpec("hard_constraint")),
        ]
    if suite == "gaa":
        return [
            (fusion, ModelSpec("gaa", beta=beta_mid, fusion=fusion))
            for fusion in ("add", "concat", "gated")
        ]
    if suite == "sgi":
        return [
            (variant, ModelSpec("sgi", sgi_variant=variant,
                                sgi_trainable=variant != "load_frozen"))
            for variant in ("residual", "load_only", "load_frozen", "detach_camera_density")
        ]
    if suite == "levels":
        return [
            (f"beta_{b}", ModelSpec("gaa", beta=b))
            for b in (2, 4, 8, 12, 16)
        ]
    raise ConfigError(f"unknown suite; valid: {', '.join(_ABLATE_SUITES)}")


def cmd_ablate(args):
    cfg = _load_json_file(args.config) if args.config else {}
    dataset = Dataset(args.data)
    tc = TrainConfig(**cfg.get("train", {}))
    gc = _grid_config(cfg.get("grid"), bounds=dataset.bounds)
    mc = MlpConfig(**cfg.get("mlp", {}))
    ensure_dir(args.out)
    _echo_config(
        {
            "command": "ablate",
            "version": __version__,
            "suite": args.suite,
            "data": os.path.abspath(args.data),
            "train": tc.to_json(),
            "grid": gc.to_json(),
            "mlp": mc.to_json(),
            "out": args.out,
        },
        args.out,
    )

    if args.suite == "wlambda":
        values = cfg.get("values", [0.1, 0.5, 1.0, 2.0, 5.0])
        rows = wlambda_sweep(dataset, values, tc, args.out, quiet=False,
                             dataset_path=os.path.abspath(args.data))
        _log(f"{len(rows)} rows -> {os.path.join(args.out, 'wlambda.csv')}")
        return 0

    rows_spec = _suite_rows(args.suite, gc.levels)
    if args.suite == "levels":
        bad = [b for _, spec in rows_spec for b in [spec.beta] if b > gc.levels]
        if bad:
            raise ConfigError(f"beta values {bad} exceed grid levels {gc.levels}")

    sgi_init = None
    if args.suite == "sgi":
        # One shared pretraining run feeds every variant.
        pre_spec = ModelSpec("single_lidar")
        pre_cfg = replace(tc, lambda_l=1.0, lambda_c=0.0,
                          iterations=tc.pretrain_iterations or tc.iterations)
        _, sgi_init = run_training(
            pre_spec, dataset, pre_cfg, os.path.join(args.out, "sgi_pretrain"),
            grid_config=gc, mlp_config=mc, quiet=False,
            dataset_path=os.path.abspath(args.data),
        )

    table = []
    for label, spec in rows_spec:
        if args.suite == "sgi":
            spec = replace(spec, sgi_init=sgi_init)
        run_dir = os.path.join(args.out, label)
        _log(f"[{args.suite}] training {label}")
        model, _ = run_training(spec, dataset, tc, run_dir, grid_config=gc,
                                mlp_config=mc, quiet=False,
                                dataset_path=os.path.abspath(args.data))
        result = evaluate_model(model, dataset, threads=args.threads)
        dump_json(os.path.join(run_dir, "metrics.json"), result["summary"])
        row = {"name": label}
        if args.suite == "levels":
            row["beta"] = spec.beta
        row.update(result["summary"])
        table.append(row)

    csv_path = os.path.join(args.out, f"{args.suite}.csv")
    keys = sorted({k for r in table for k in r}, key=lambda k: (k != "name", k != "beta", k))
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in table:
            writer.writerow(row)
    _log(f"{len(table)} rows -> {csv_path}")
    return 0


def _parse_vec(text, name):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{name} needs x,y,z")
    return tuple(float(p) for p in parts)


def cmd_dump_features(args):
    model, _, _, _ = load_checkpoint(args.checkpoint)
    grid_name = args.grid or sorted(model.grids)[0]
    levels = [int(v) for v in args.levels.split(",")] if args.levels else [1, 2, 3, 4]
    ensure_dir(args.out)
    _echo_config(
        {
            "command": "dump-features",
            "version": __version__,
            "checkpoint": os.path.abspath(args.checkpoint),
            "grid": grid_name,
            "levels": levels,
            "z": args.z,
            "resolution": args.resolution,
            "beta": args.beta,
            "out": args.out,
        },
        args.out,
    )
    written = dump_bev_features(model, grid_name, levels, args.z, args.resolution,
                                args.out, beta=args.beta)
    _log(f"wrote {', '.join(written)} under {args.out}")
    return 0


def cmd_dump_density(args):
    named = []
    for item in args.checkpoint:
        if "=" in item:
            label, path = item.split("=", 1)
        else:
            label, path = os.path.splitext(os.path.basename(item))[0], item
        model, _, _, _ = load_checkpoint(path)
        modality = "lidar" if "lidar" in model.modalities else "camera"
        named.append((label, model, modality))
    origin = _parse_vec(args.origin, "--origin")
    direction = _parse_vec(args.direction, "--direction")
    _echo_config(
        {
            "command": "dump-density",
            "version": __version__,
            "checkpoints": list(args.checkpoint),
            "origin": list(origin),
            "direction": list(direction),
            "n": args.n,
            "out": os.path.abspath(args.out),
        },
        args.out,
    )
    dump_ray_density(named, origin, direction, args.n, args.out)
    _log(f"density profile -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmfield",
        description="desk-scale multimodal neural-field laboratory",
    )
    parser.add_argument("--version", action="version", version=f"mmfield {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker cap for read-only renders (default: cores)")

    p = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    p.add_argument("--preset", required=True,
                   choices=("aligned-street", "misaligned-street"))
    p.add_argument("--knob", action="append", metavar="K=V",
                   help=f"override a misalignment knob ({', '.join(_KNOBS)})")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train a field from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    add_threads(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True, help="metrics.json path")
    add_threads(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one trajectory pose")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", type=int, required=True, help="frame index")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None,
                   help="dataset dir (default: recorded in the checkpoint)")
    add_threads(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=_ABLATE_SUITES)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None,
                   help="optional JSON with train/grid/mlp/values overrides")
    add_threads(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="BEV hash-feature magnitude maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", default=None)
    p.add_argument("--levels", default=None, help="comma list, 1-based (default 1,2,3,4)")
    p.add_argument("--z", type=float, default=0.1)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("dump-density", help="density along one ray, per model")
    p.add_argument("--checkpoint", action="append", required=True,
                   metavar="[LABEL=]PATH")
    p.add_argument("--origin", required=True, help="x,y,z")
    p.add_argument("--direction", required=True, help="x,y,z")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_dump_density)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MMFieldError as exc:
        _log(f"error: {exc}")
        return 2
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
