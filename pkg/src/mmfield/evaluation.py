"""Held-out evaluation: render test frames and score both modalities.

Protocol: the field is rendered at the DECLARED poses from the manifest
(the only calibration a consumer would have); targets are the stored
planes, which came from the true sensors. Point clouds on both sides are
reconstructed through the declared calibration; predicted returns with
drop probability above 0.5 are excluded before chamfer/f-score.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from . import metrics
from .fileio import dump_json
from .rendering import EVAL_SAMPLING, render_frame


def eval_camera_frame(model, dataset, frame, sampling=EVAL_SAMPLING, threads=1):
    batch = dataset.camera_batch(frame)
    res = render_frame(model, batch, sampling, threads=threads)
    h, w = dataset.camera.height, dataset.camera.width
    bg = np.asarray(dataset.background, dtype=np.float32)
    pred = res["color"] + res["trans_residual"][:, None] * bg[None, :]
    pred_img = pred.reshape(h, w, 3)
    gt_img = batch.targets["rgb"].reshape(h, w, 3)
    return {
        "psnr": metrics.psnr(pred_img, gt_img),
        "ssim": metrics.ssim_rgb(pred_img, gt_img),
        "pred_image": pred_img,
        "gt_image": gt_img,
        "depth": res["depth"].reshape(h, w),
    }


def eval_lidar_frame(model, dataset, frame, sampling=EVAL_SAMPLING, threads=1):
    batch = dataset.lidar_batch(frame)
    res = render_frame(model, batch, sampling, threads=threads)
    drop_total = res["drop"] + res["trans_residual"]
    gt_valid = batch.targets["drop"] < 0.5
    pred_keep = drop_total <= 0.5

    pred_pts = (batch.origins + res["depth"][:, None].astype(np.float64) * batch.dirs)[pred_keep]
    gt_pts = (batch.origins + batch.targets["range"][:, None].astype(np.float64) * batch.dirs)[gt_valid]

    row = {
        "depth_rmse": metrics.depth_rmse(res["depth"], batch.targets["range"], gt_valid),
        "intensity_mae": metrics.intensity_mae(
            res["intensity"], batch.targets["intensity"], gt_valid
        ),
        "drop_accuracy": metrics.drop_accuracy(drop_total, batch.targets["drop"]),
        "pred_points": pred_pts,
        "gt_points": gt_pts,
    }
    if len(pred_pts) and len(gt_pts):
        row["chamfer"] = metrics.chamfer(pred_pts, gt_pts)
        row["fscore"] = metrics.fscore(pred_pts, gt_pts)
    else:
        # A field that predicts everything as drop has no cloud; score the
        # failure as the scene diameter rather than crashing the sweep.
        row["chamfer"] = float(np.linalg.norm(
            np.asarray(dataset.bounds[1]) - np.asarray(dataset.bounds[0])
        ))
        row["fscore"] = 0.0
    return row


_CAMERA_KEYS = ("psnr", "ssim")
_LIDAR_KEYS = ("chamfer", "fscore", "depth_rmse", "intensity_mae", "drop_accuracy")


def evaluate_model(model, dataset, split="test", sampling=EVAL_SAMPLING, threads=1):
    """Aggregate metrics over a split; returns {summary, per_frame list}."""
    per_frame = []
    for frame in dataset.frames(split):
        row = {"frame": frame["index"], "time": frame["time"]}
        if "camera" in model.modalities:
            cam = eval_camera_frame(model, dataset, frame, sampling, threads)
            row.update({k: cam[k] for k in _CAMERA_KEYS})
        if "lidar" in model.modalities:
            lid = eval_lidar_frame(model, dataset, frame, sampling, threads)
            row.update({k: lid[k] for k in _LIDAR_KEYS})
        per_frame.append(row)
    summary = {}
    for key in _CAMERA_KEYS + _LIDAR_KEYS:
        vals = [r[key] for r in per_frame if key in r]
        if vals:
            summary[key] = float(np.mean(vals))
    return {"summary": summary, "per_frame": per_frame}


def write_eval_outputs(result, out_path):
    """Write the summary to ``out_path`` (a .json file) plus a per-frame
    CSV sibling named per_frame.csv."""
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    dump_json(out_path, result["summary"])
    rows = result["per_frame"]
    if rows:
        keys = list(rows[0].keys())
        with open(os.path.join(out_dir, "per_frame.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            for r in rows:
                writer.writerow({k: r[k] for k in keys})
    return out_path
