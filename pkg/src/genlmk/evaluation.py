"""Landmark accuracy against ground truth and temporal jitter of predicted tracks."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import list_frames, read_gt
from .errors import AlignError, DataError, ShapeError, ShortTrackError


@dataclass
class LandmarkTrack:
    frames: np.ndarray  # (T,) strictly increasing frame ids
    points: np.ndarray  # (T, N, 2) pixel positions

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 2 or len(self.points) != len(self.frames):
            raise ShapeError(f"track points must be (T, N, 2) with T = {len(self.frames)}, got {self.points.shape}")
        if np.any(np.diff(self.frames) <= 0):
            raise AlignError("frame ids must be strictly increasing")

    @property
    def n_landmarks(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_jsonl(cls, path) -> "LandmarkTrack":
        frames, points = read_gt(path)
        return cls(frames, points)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for k, p in zip(self.frames, self.points):
                f.write(json.dumps({"frame": int(k), "points_px": p.tolist()}) + "\n")


def landmark_error(pred: LandmarkTrack, gt: LandmarkTrack, image_width: float | None = None) -> dict:
    """Mean Euclidean landmark distance per frame, summarized over frames.

    With ``image_width`` the summary is also given as a fraction of the width.
    """
    if pred.n_landmarks != gt.n_landmarks:
        raise ShapeError(f"landmark counts differ: {pred.n_landmarks} vs {gt.n_landmarks}")
    if len(pred.frames) != len(gt.frames) or np.any(pred.frames != gt.frames):
        raise AlignError("predicted and ground-truth frame ids differ")
    dist = np.linalg.norm(pred.points - gt.points, axis=-1)  # (T, N)
    per_frame = dist.mean(axis=1)
    out = {
        "per_frame_px": per_frame.tolist(),
        "per_landmark_px": dist.mean(axis=0).tolist() if len(dist) else [],
        "mean_px": float(per_frame.mean()) if len(per_frame) else 0.0,
        "median_px": float(np.median(per_frame)) if len(per_frame) else 0.0,
    }
    if image_width:
        out["mean_norm"] = out["mean_px"] / image_width
        out["median_norm"] = out["median_px"] / image_width
    return out


def moving_average(points: np.ndarray, window: int = 5) -> np.ndarray:
    """Centered moving average over time; the window shrinks symmetrically at the ends,
    so linear motion passes through unchanged."""
    half = window // 2
    n = len(points)
    out = np.empty_like(points)
    for t in range(n):
        r = min(half, t, n - 1 - t)
        # averaging offsets from the center frame keeps a still track exactly still
        out[t] = points[t] + (points[t - r : t + r + 1] - points[t]).mean(axis=0)
    return out


def temporal_jitter(track: LandmarkTrack, window: int = 5) -> dict:
    """Mean frame-to-frame landmark displacement, raw and after removing the smooth trend."""
    if len(track.frames) < 2:
        raise ShortTrackError(f"need at least 2 frames, got {len(track.frames)}")
    pts = track.points
    raw = np.linalg.norm(np.diff(pts, axis=0), axis=-1).mean(axis=0)  # (N,)
    resid = pts - moving_average(pts, window)
    detrended = np.linalg.norm(np.diff(resid, axis=0), axis=-1).mean(axis=0)
    return {
        "raw_px": float(raw.mean()),
        "detrended_px": float(detrended.mean()),
        "per_landmark_raw_px": raw.tolist(),
        "per_landmark_detrended_px": detrended.tolist(),
        "window": window,
    }


def run_eval(checkpoint, data_dir, out_path=None) -> dict:
    """Evaluate a checkpoint on ``data_dir`` (``unmarked/`` frames + ``gt/landmarks.jsonl``).

    Sequences (manifest ``kind: sequence``) also get jitter statistics for both the
    prediction and the ground-truth track.
    """
    from .training import Predictor

    data_dir = Path(data_dir)
    frames = list_frames(data_dir / "unmarked")
    if not frames:
        raise DataError(f"no frames in {data_dir / 'unmarked'}")
    gt = LandmarkTrack.from_jsonl(data_dir / "gt" / "landmarks.jsonl")
    predictor = Predictor.from_checkpoint(checkpoint)
    points, sizes = predictor.predict_frames(frames)
    pred = LandmarkTrack(gt.frames if len(gt.frames) == len(frames) else np.arange(len(frames)), points)
    width = sizes[0][1]
    err = landmark_error(pred, gt, image_width=width)
    report = {
        "checkpoint": str(checkpoint),
        "step": predictor.step,
        "data": str(data_dir),
        "n_frames": len(frames),
        "image_width": width,
        "error": {k: err[k] for k in ("mean_px", "median_px", "mean_norm", "median_norm", "per_landmark_px")},
        "per_frame_error_px": err["per_frame_px"],
    }
    manifest_path = data_dir / "manifest.json"
    kind = json.loads(manifest_path.read_text()).get("kind") if manifest_path.is_file() else None
    if kind == "sequence" and len(frames) >= 2:
        report["jitter"] = temporal_jitter(pred)
        report["gt_jitter"] = temporal_jitter(gt)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2) + "\n")
    return report


def summary(report: dict) -> str:
    e = report["error"]
    lines = [
        f"frames: {report['n_frames']}  (checkpoint step {report['step']})",
        f"landmark error: mean {e['mean_px']:.3f} px ({100 * e['mean_norm']:.2f}% of width), "
        f"median {e['median_px']:.3f} px",
    ]
    if "jitter" in report:
        j, g = report["jitter"], report["gt_jitter"]
        lines.append(f"jitter: raw {j['raw_px']:.3f} px, detrended {j['detrended_px']:.3f} px "
                     f"(ground truth raw {g['raw_px']:.3f} px)")
    return "\n".join(lines)
