"""Split conformalized quantile regression, calibrated separately per regression head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import EncodedData
from .model import MultiTaskDelayModel, QuantilePrediction, predict


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    q_hat_delayed: float
    q_hat_ontime: float
    n_delayed: int
    n_ontime: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise CalibrationError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.n_delayed < 1 or self.n_ontime < 1:
            raise CalibrationError("both calibration subsets need at least one sample")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> CalibrationResult:
        return cls(
            float(raw["alpha"]),
            float(raw["q_hat_delayed"]),
            float(raw["q_hat_ontime"]),
            int(raw["n_delayed"]),
            int(raw["n_ontime"]),
        )


def conformity_score(y, lower, upper):
    """``max(lower - y, y - upper)``: positive iff y falls outside [lower, upper]."""
    out = np.maximum(np.asarray(lower, dtype=np.float64) - y, np.asarray(y, dtype=np.float64) - upper)
    return float(out) if out.ndim == 0 else out


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """The ceil((1-alpha)(n+1))-th smallest score, clamped to the largest when the rank exceeds n."""
    scores = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    n = scores.size
    if n == 0:
        raise CalibrationError("no conformity scores")
    # the small offset keeps exact products such as 0.8*5 from rounding up
    rank = math.ceil((1.0 - alpha) * (n + 1) - 1e-9)
    rank = min(max(rank, 1), n)
    return float(scores[rank - 1])


def calibrate_from_predictions(
    pred: QuantilePrediction, y: np.ndarray, d: np.ndarray, alpha: float
) -> CalibrationResult:
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d).astype(bool)
    q_hats = {}
    for name, mask, quantiles in (
        ("delayed", d, pred.delayed_quantiles),
        ("on-time", ~d, pred.ontime_quantiles),
    ):
        if not mask.any():
            raise CalibrationError(f"calibration set has no {name} samples")
        scores = conformity_score(y[mask], quantiles[mask, 0], quantiles[mask, -1])
        q_hats[name] = conformal_quantile(scores, alpha)
    return CalibrationResult(alpha, q_hats["delayed"], q_hats["on-time"], int(d.sum()), int((~d).sum()))


def calibrate(model: MultiTaskDelayModel, calib: EncodedData, alpha: float = 0.2) -> CalibrationResult:
    """Score each ground-truth subset against its own head and take the conformal quantile."""
    if calib.y is None:
        raise CalibrationError("calibration data needs labels")
    return calibrate_from_predictions(predict(model, calib.cat, calib.num), calib.y, calib.d, alpha)


@dataclass(frozen=True)
class Intervals:
    low: np.ndarray
    high: np.ndarray
    collapsed: np.ndarray


def adjust_interval(low, high, q_hat) -> Intervals:
    """Widen (or shrink) by ``q_hat`` on both sides; inverted results collapse to the midpoint."""
    low = np.asarray(low, dtype=np.float64) - q_hat
    high = np.asarray(high, dtype=np.float64) + q_hat
    collapsed = high < low
    mid = 0.5 * (low + high)
    return Intervals(np.where(collapsed, mid, low), np.where(collapsed, mid, high), collapsed)


def routed_interval(pred: QuantilePrediction, result: CalibrationResult | None, delayed: np.ndarray) -> Intervals:
    """Per-row head and correction chosen by the boolean ``delayed`` mask (no correction if ``result`` is None)."""
    delayed = np.asarray(delayed).astype(bool)
    q = np.where(delayed[:, None], pred.delayed_quantiles, pred.ontime_quantiles)
    q_hat = 0.0 if result is None else np.where(delayed, result.q_hat_delayed, result.q_hat_ontime)
    return adjust_interval(q[:, 0], q[:, -1], q_hat)


def calibrated_interval(pred: QuantilePrediction, result: CalibrationResult) -> Intervals:
    """Deployment intervals: head and correction picked by the classifier (p > 0.5 means delayed)."""
    return routed_interval(pred, result, pred.predicted_delayed)


def head_intervals(pred: QuantilePrediction, result: CalibrationResult | None, delayed: bool) -> Intervals:
    """Intervals from one head for every row, calibrated with that head's correction if given."""
    q = pred.delayed_quantiles if delayed else pred.ontime_quantiles
    q_hat = 0.0 if result is None else (result.q_hat_delayed if delayed else result.q_hat_ontime)
    return adjust_interval(q[:, 0], q[:, -1], q_hat)
