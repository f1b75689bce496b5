"""Classification and quantile losses with hand-written gradients."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, make_op, record_kink

F1_EPS = 1e-8


def pinball(u, alpha: float):
    """Quantile loss ``alpha*u`` for u >= 0, ``(alpha-1)*u`` otherwise. Works elementwise."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u >= 0, alpha * u, (alpha - 1.0) * u)
    return float(out) if out.ndim == 0 else out


def soft_confusion(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    tp = float(np.sum(probs * labels))
    fp = float(np.sum(probs * (1.0 - labels)))
    fn = float(np.sum((1.0 - probs) * labels))
    return tp, fp, fn


def sigmoid_f1_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-level ``1 - soft F1`` over predicted delay probabilities."""
    shape = probs.shape
    p = probs.data.reshape(-1)
    d = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != d.shape:
        raise ValueError(f"probs {probs.shape} and labels {d.shape} disagree")
    tp, fp, fn = soft_confusion(p, d)
    # 2tp+fp+fn = sum(p) + sum(d) >= 1 once the batch holds a positive,
    # so the guard is only needed (and only added) for all-negative batches
    denom = 2.0 * tp + fp + fn + (F1_EPS if not d.any() else 0.0)
    loss = 1.0 - 2.0 * tp / denom

    def backward(g):
        # d tp/dp = d, d(fp+fn+2tp)/dp = 1  (since 2tp+fp+fn = sum p + sum d)
        dF = 2.0 * d / denom - 2.0 * tp / denom**2
        return ((-g * dF).reshape(shape),)

    return make_op(np.array(loss), (probs,), backward)


def regression_loss(
    delayed_q: Tensor,
    ontime_q: Tensor,
    y: np.ndarray,
    d: np.ndarray,
    levels=(0.1, 0.5, 0.9),
) -> Tensor:
    """Mean pinball loss, each row scored only against the head matching its label.

    Rows with ``d == 1`` use ``delayed_q``; the other head receives exactly
    zero gradient for that row.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 1)
    alphas = np.asarray(levels, dtype=np.float64)[None, :]
    n = y.shape[0]
    if delayed_q.shape != (n, alphas.shape[1]) or ontime_q.shape != delayed_q.shape:
        raise ValueError("quantile outputs must be [B, n_levels]")
    routed = np.where(d == 1, delayed_q.data, ontime_q.data)
    u = y - routed
    record_kink(u)
    scale = 1.0 / (alphas.shape[1] * n)
    loss = scale * np.sum(np.where(u >= 0, alphas * u, (alphas - 1.0) * u))
    # d rho / d q = -alpha on u >= 0 and (1 - alpha) on u < 0
    dq = scale * np.where(u >= 0, -alphas, 1.0 - alphas)

    def backward(g):
        return g * dq * d, g * dq * (1.0 - d)

    return make_op(np.array(loss), (delayed_q, ontime_q), backward)
