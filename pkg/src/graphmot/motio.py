"""Readers and writers for the MOTChallenge-style text formats.

Track / detection / ground-truth rows (one per line, comma separated):

    frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z

frame is a 1-based integer; id is -1 for raw detections; the trailing
x,y,z world coordinates are unused and written as -1. Boxes and
confidences are written with two decimals.

Per-detection appearance features live in a companion file:

    frame,det_index,f_1,...,f_d

det_index is the 0-based position of the detection within its frame, in
detection-file order. Features are written with eight decimals and
renormalized to unit length on read.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .core import BoundingBox, Detection


class TrackRow(NamedTuple):
    frame: int
    track_id: int
    x: float
    y: float
    w: float
    h: float
    conf: float


def parse_track_rows(lines, source: str = "<input>") -> list[TrackRow]:
    """Parse track-format lines; malformed input reports its line number."""
    rows = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        parts = stripped.split(",")
        if len(parts) < 7:
            raise ValueError(f"{source}:{lineno}: expected at least 7 fields, got {len(parts)}")
        try:
            frame = int(float(parts[0]))
            track_id = int(float(parts[1]))
            x, y, w, h, conf = (float(v) for v in parts[2:7])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
        if frame < 1:
            raise ValueError(f"{source}:{lineno}: frame must be >= 1, got {frame}")
        if w <= 0 or h <= 0:
            raise ValueError(f"{source}:{lineno}: non-positive box size {w}x{h}")
        rows.append(TrackRow(frame, track_id, x, y, w, h, conf))
    return rows


def read_track_rows(path) -> list[TrackRow]:
    with open(path) as fh:
        return parse_track_rows(fh, source=str(path))


def format_track_row(row: TrackRow) -> str:
    return (
        f"{row.frame},{row.track_id},{row.x:.2f},{row.y:.2f},"
        f"{row.w:.2f},{row.h:.2f},{row.conf:.2f},-1,-1,-1"
    )


def write_track_rows(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(format_track_row(row) + "\n")


def write_features(path, feature_rows) -> None:
    """feature_rows: iterable of (frame, det_index, vector)."""
    with open(path, "w") as fh:
        for frame, det_index, vec in feature_rows:
            values = ",".join(f"{v:.8f}" for v in vec)
            fh.write(f"{frame},{det_index},{values}\n")


def read_features(path) -> dict[tuple[int, int], np.ndarray]:
    """Returns {(frame, det_index): unit feature vector}."""
    feats: dict[tuple[int, int], np.ndarray] = {}
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split(",")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected frame,det_index,f_1,...")
            try:
                frame = int(float(parts[0]))
                det_index = int(float(parts[1]))
                vec = np.array([float(v) for v in parts[2:]], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: feature dimension {vec.size} != {dim}")
            norm = np.linalg.norm(vec)
            if norm <= 0:
                raise ValueError(f"{path}:{lineno}: zero feature vector")
            feats[(frame, det_index)] = vec / norm
    return feats


def read_detections(det_path, feature_path) -> dict[int, list[Detection]]:
    """Join a detection file with its feature file into per-frame Detections."""
    rows = read_track_rows(det_path)
    feats = read_features(feature_path)
    frames: dict[int, list[Detection]] = {}
    indices: dict[int, int] = {}
    for row in rows:
        det_index = indices.get(row.frame, 0)
        indices[row.frame] = det_index + 1
        key = (row.frame, det_index)
        if key not in feats:
            raise ValueError(f"missing feature for frame {row.frame} detection {det_index}")
        conf = min(max(row.conf, 0.0), 1.0)
        det = Detection(row.frame, BoundingBox(row.x, row.y, row.w, row.h), conf, feats[key])
        frames.setdefault(row.frame, []).append(det)
    return frames


def rows_by_frame(rows: list[TrackRow]) -> dict[int, list[TrackRow]]:
    frames: dict[int, list[TrackRow]] = {}
    for row in rows:
        frames.setdefault(row.frame, []).append(row)
    return frames


def label_detections(
    frames: dict[int, list[Detection]],
    gt_rows: list[TrackRow],
    iou_threshold: float = 0.5,
) -> dict[int, list[Detection]]:
    """Attach ground-truth identities to detections by per-frame IoU matching.

    Uses optimal assignment on IoU; detections without a counterpart at or
    above the threshold keep gt_id None (clutter). Returns new Detection
    instances; the input is not modified.
    """
    gt_frames = rows_by_frame(gt_rows)
    labeled: dict[int, list[Detection]] = {}
    for frame, dets in frames.items():
        gts = gt_frames.get(frame, [])
        out = [None] * len(dets)
        if gts and dets:
            det_boxes = np.array([d.box.as_xywh() for d in dets])
            gt_boxes = np.array([[g.x, g.y, g.w, g.h] for g in gts])
            overlap = kernels.iou_matrix(det_boxes, gt_boxes)
            di, gi = linear_sum_assignment(overlap, maximize=True)
            assigned = {
                int(d): gts[int(g)].track_id
                for d, g in zip(di, gi)
                if overlap[d, g] >= iou_threshold
            }
        else:
            assigned = {}
        for idx, det in enumerate(dets):
            gt_id = assigned.get(idx)
            out[idx] = Detection(det.frame, det.box, det.confidence, det.feature, gt_id)
        labeled[frame] = out
    return labeled
