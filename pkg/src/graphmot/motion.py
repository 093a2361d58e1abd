"""Constant-velocity Kalman filtering and gated forecasting for lost targets.

The filter state is an 8-vector (cx, cy, w, h, vcx, vcy, vw, vh) in pixels
and pixels/frame. Process and measurement noise scale with the current box
height, so the same weights work across target sizes. The initial velocity
prior is a fixed fraction of the height and deliberately independent of the
noise weights: with zero noise the filter then locks onto the exact
velocity after the second observation.

A lost trajectory's predicted box passes three gates, in order, before it
is emitted as a tracked position:
  1. at least half of the box must be inside the image,
  2. a pluggable box verifier must accept it (the default is a geometric
     stand-in: reject boxes touching the image border band or whose area
     drifted more than 50% from the last observation; a learned verifier
     can be dropped in through the same callable interface),
  3. if an appearance source is available, the feature at the predicted
     box must stay within a distance threshold of the trajectory feature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import BoundingBox, Trajectory, feature_distance

STOP_OUT_OF_VIEW = "out_of_view"
STOP_VERIFIER = "verifier_reject"
STOP_APPEARANCE = "appearance_drift"

VERIFIER_NAMES = ("default", "always_keep", "always_stop")

# Fraction of box height: per-frame process noise on positions/velocities,
# measurement noise, and the fixed initial velocity prior.
POS_NOISE_WEIGHT = 1.0 / 20.0
VEL_NOISE_WEIGHT = 1.0 / 160.0
MEAS_NOISE_WEIGHT = 1.0 / 20.0
INIT_VEL_STD = 1.0 / 8.0

_MIN_SIZE = 1e-3

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)


@dataclass(frozen=True)
class KalmanParams:
    pos_weight: float = POS_NOISE_WEIGHT
    vel_weight: float = VEL_NOISE_WEIGHT
    meas_weight: float = MEAS_NOISE_WEIGHT


DEFAULT_KALMAN = KalmanParams()


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray  # (8,)
    cov: np.ndarray  # (8, 8)


def _measurement(box: BoundingBox) -> np.ndarray:
    return np.array([box.cx, box.cy, box.w, box.h], dtype=np.float64)


def state_to_box(state: KalmanState) -> BoundingBox:
    cx, cy, w, h = state.mean[:4]
    w = max(w, _MIN_SIZE)
    h = max(h, _MIN_SIZE)
    return BoundingBox(cx - 0.5 * w, cy - 0.5 * h, w, h)


def kf_init(box: BoundingBox, params: KalmanParams = DEFAULT_KALMAN) -> KalmanState:
    mean = np.zeros(8)
    mean[:4] = _measurement(box)
    h = box.h
    stds = np.array(
        [2 * params.meas_weight * h] * 4 + [INIT_VEL_STD * h] * 4, dtype=np.float64
    )
    return KalmanState(mean, np.diag(stds**2))


def kf_predict(state: KalmanState, params: KalmanParams = DEFAULT_KALMAN) -> KalmanState:
    h = max(state.mean[3], _MIN_SIZE)
    q = np.array(
        [params.pos_weight * h] * 4 + [params.vel_weight * h] * 4, dtype=np.float64
    )
    mean = _F @ state.mean
    cov = _F @ state.cov @ _F.T + np.diag(q**2)
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean, cov)


def kf_update(
    state: KalmanState, box: BoundingBox, params: KalmanParams = DEFAULT_KALMAN
) -> KalmanState:
    h = max(state.mean[3], _MIN_SIZE)
    r = np.diag(np.full(4, (params.meas_weight * h) ** 2))
    innovation = _measurement(box) - _H @ state.mean
    s = _H @ state.cov @ _H.T + r
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise ValueError("innovation covariance is not positive definite") from exc
    # Gain via two triangular solves: K = P H^T S^-1.
    pht = state.cov @ _H.T
    k = np.linalg.solve(chol.T, np.linalg.solve(chol, pht.T)).T
    mean = state.mean + k @ innovation
    ikh = np.eye(8) - k @ _H
    cov = ikh @ state.cov @ ikh.T + k @ r @ k.T  # Joseph form keeps PSD
    cov = 0.5 * (cov + cov.T)
    mean[2] = max(mean[2], _MIN_SIZE)
    mean[3] = max(mean[3], _MIN_SIZE)
    return KalmanState(mean, cov)


def visible_fraction(box: BoundingBox, image_size: tuple[int, int]) -> float:
    """Fraction of the box area inside the image."""
    width, height = image_size
    ix = min(box.x + box.w, width) - max(box.x, 0.0)
    iy = min(box.y + box.h, height) - max(box.y, 0.0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    return (ix * iy) / box.area


@dataclass
class FrameContext:
    """Per-frame inputs for the forecast gates.

    feature_at(frame, box) returns the appearance feature observed at a
    box, or None when no appearance source covers it; the appearance gate
    is skipped in that case.
    """

    image_size: tuple[int, int]
    frame: int
    feature_at: Optional[Callable[[int, BoundingBox], Optional[np.ndarray]]] = None


@dataclass(frozen=True)
class ForecastDecision:
    keep: bool
    box: Optional[BoundingBox]
    reason: Optional[str] = None
    appearance_checked: bool = True


def default_verifier(box: BoundingBox, last_box: BoundingBox, image_size) -> bool:
    """Geometric stand-in for a learned box verifier.

    Rejects boxes that touch the image border band (2% of the smaller
    image side) or whose area changed by more than 50% since the last
    observation.
    """
    width, height = image_size
    band = 0.02 * min(width, height)
    if box.x < band or box.y < band:
        return False
    if box.x + box.w > width - band or box.y + box.h > height - band:
        return False
    return abs(box.area - last_box.area) <= 0.5 * last_box.area


def make_verifier(name: str):
    if name == "default":
        return default_verifier
    if name == "always_keep":
        return lambda box, last_box, image_size: True
    if name == "always_stop":
        return lambda box, last_box, image_size: False
    raise ValueError(f"unknown verifier {name!r}; expected one of {VERIFIER_NAMES}")


def forecast_lost(
    traj: Trajectory,
    ctx: FrameContext,
    theta_app: float = 0.6,
    verifier=default_verifier,
) -> ForecastDecision:
    """Gate the lost trajectory's current predicted box.

    The caller must already have advanced traj.motion to the context
    frame. Gates run strictly in the order out-of-view, verifier,
    appearance; the first failing gate determines the stop reason.
    """
    if traj.is_active:
        raise ValueError("forecast_lost expects a lost trajectory")
    box = state_to_box(traj.motion)
    if visible_fraction(box, ctx.image_size) < 0.5:
        return ForecastDecision(False, None, STOP_OUT_OF_VIEW)
    if not verifier(box, traj.last_box, ctx.image_size):
        return ForecastDecision(False, None, STOP_VERIFIER)
    checked = False
    if ctx.feature_at is not None:
        feature = ctx.feature_at(ctx.frame, box)
        if feature is not None:
            checked = True
            if feature_distance(traj.integrated_feature, feature) > theta_app:
                return ForecastDecision(False, None, STOP_APPEARANCE)
    return ForecastDecision(True, box, None, appearance_checked=checked)
