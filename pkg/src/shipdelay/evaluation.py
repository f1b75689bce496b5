"""Point and interval metrics, overall and on delayed shipments, before and after calibration."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .conformal import CalibrationResult, head_intervals, routed_interval
from .data import EncodedData
from .losses import pinball
from .model import MultiTaskDelayModel, QuantilePrediction, predict

ROUTINGS = ("classifier", "label")
REPORT_FIELDS = ("subset", "routing", "calibrated", "n", "mae", "avg_ql", "coverage", "aiw", "winkler")


def mae(y, median_pred) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(np.abs(y - np.asarray(median_pred, dtype=np.float64))))


def avg_ql(y, quantile_preds, levels=(0.1, 0.5, 0.9)) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    q = np.asarray(quantile_preds, dtype=np.float64).reshape(y.shape[0], -1)
    total = sum(pinball(y[:, 0] - q[:, j], a).sum() for j, a in enumerate(levels))
    return float(total / (len(levels) * y.shape[0]))


def coverage_aiw(y, low, high) -> tuple[float, float]:
    y = np.asarray(y, dtype=np.float64)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    return float(np.mean((low <= y) & (y <= high))), float(np.mean(high - low))


def winkler(y, low, high, alpha: float):
    """Interval width plus ``2/alpha`` times the distance of a miss."""
    y = np.asarray(y, dtype=np.float64)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    score = (high - low) + (2.0 / alpha) * (np.where(y < low, low - y, 0.0) + np.where(y > high, y - high, 0.0))
    return float(score) if score.ndim == 0 else score


@dataclass(frozen=True)
class MetricReport:
    subset: str
    # "classifier": rows routed by the predicted class (deployment);
    # "label": rows routed by their true class (what per-head calibration targets)
    routing: str
    calibrated: bool
    n: int
    mae: float | None
    avg_ql: float | None
    coverage: float | None
    aiw: float | None
    winkler: float | None


def metric_row(subset, routing, calibrated, y, quantiles, low, high, alpha, levels) -> MetricReport:
    if len(y) == 0:
        return MetricReport(subset, routing, calibrated, 0, None, None, None, None, None)
    cov, aiw = coverage_aiw(y, low, high)
    return MetricReport(
        subset,
        routing,
        calibrated,
        len(y),
        mae(y, quantiles[:, 1]),
        avg_ql(y, quantiles, levels),
        cov,
        aiw,
        float(np.mean(winkler(y, low, high, alpha))),
    )


def classification_metrics(pred_delayed, d) -> dict:
    pred_delayed = np.asarray(pred_delayed).astype(bool)
    d = np.asarray(d).astype(bool)
    tp = int(np.sum(pred_delayed & d))
    fp = int(np.sum(pred_delayed & ~d))
    fn = int(np.sum(~pred_delayed & d))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return {"f1": f1, "precision": precision, "recall": recall, "tp": tp, "fp": fp, "fn": fn}


@dataclass
class EvaluationResult:
    rows: list[MetricReport]
    classification: dict
    # coverage of each ground-truth class under its own head (the conformal target),
    # next to the classifier-routed coverage used in the main rows
    head_coverage: list[dict]

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "classification": self.classification,
            "head_coverage": self.head_coverage,
        }


def evaluate_predictions(
    pred: QuantilePrediction,
    y: np.ndarray,
    d: np.ndarray,
    calibration: CalibrationResult | None,
    alpha: float = 0.2,
    levels=(0.1, 0.5, 0.9),
) -> EvaluationResult:
    """Eight rows: {overall, delayed} x {classifier, label routing} x {pre, post} calibration.

    The delayed subset is chosen by ground truth. Without a calibration the
    post rows carry n but null metrics.
    """
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d).astype(bool)
    rows = []
    for subset, mask in (("overall", np.ones_like(d)), ("delayed", d)):
        for routing, route in (("classifier", pred.predicted_delayed.astype(bool)), ("label", d)):
            q = np.where(route[:, None], pred.delayed_quantiles, pred.ontime_quantiles)[mask]
            pre = routed_interval(pred, None, route)
            rows.append(metric_row(subset, routing, False, y[mask], q, pre.low[mask], pre.high[mask], alpha, levels))
            if calibration is None:
                rows.append(MetricReport(subset, routing, True, int(mask.sum()), None, None, None, None, None))
                continue
            post = routed_interval(pred, calibration, route)
            rows.append(metric_row(subset, routing, True, y[mask], q, post.low[mask], post.high[mask], alpha, levels))
    head_cov = []
    for name, mask, is_delayed_head in (("delayed", d, True), ("ontime", ~d, False)):
        entry = {"head": name, "n": int(mask.sum())}
        for tag, cal in (("pre", None), ("post", calibration)):
            if tag == "post" and calibration is None or not mask.any():
                entry[f"coverage_{tag}"] = None
                continue
            iv = head_intervals(pred, cal, is_delayed_head)
            entry[f"coverage_{tag}"] = coverage_aiw(y[mask], iv.low[mask], iv.high[mask])[0]
        head_cov.append(entry)
    return EvaluationResult(rows, classification_metrics(pred.predicted_delayed, d), head_cov)


def full_report(
    model: MultiTaskDelayModel,
    calibration: CalibrationResult | None,
    test: EncodedData,
    alpha: float = 0.2,
) -> EvaluationResult:
    pred = predict(model, test.cat, test.num)
    return evaluate_predictions(pred, test.y, test.d, calibration, alpha, model.arch.quantile_levels)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(path: str | Path, result: EvaluationResult, header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in result.rows:
            writer.writerow([_fmt(getattr(row, f)) for f in REPORT_FIELDS])


def write_report_json(path: str | Path, result: EvaluationResult, config_echo: dict | None = None) -> None:
    payload = result.to_dict()
    if config_echo is not None:
        payload["config"] = config_echo
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_table(result: EvaluationResult) -> str:
    head = f"{'subset':<8} {'routing':<10} {'calib':<5} {'n':>7} {'MAE':>8} {'Avg-QL':>8} {'Cov':>7} {'AIW':>8} {'WS':>9}"
    lines = [head, "-" * len(head)]
    for r in result.rows:
        def f(v, w, p=3):
            return f"{'-':>{w}}" if v is None else f"{v:>{w}.{p}f}"

        lines.append(
            f"{r.subset:<8} {r.routing:<10} {'post' if r.calibrated else 'pre':<5} {r.n:>7} {f(r.mae, 8)} {f(r.avg_ql, 8)} "
            f"{f(r.coverage, 7)} {f(r.aiw, 8)} {f(r.winkler, 9)}"
        )
    c = result.classification
    lines.append(f"classifier: F1 {c['f1']:.3f}  precision {c['precision']:.3f}  recall {c['recall']:.3f}")
    for h in result.head_coverage:
        pre = "-" if h["coverage_pre"] is None else f"{h['coverage_pre']:.3f}"
        post = "-" if h["coverage_post"] is None else f"{h['coverage_post']:.3f}"
        lines.append(f"{h['head']} head on its own class (n={h['n']}): coverage pre {pre}  post {post}")
    return "\n".join(lines)
