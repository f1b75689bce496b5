"""Small reverse-mode autodiff core on float64 numpy arrays.

Only the layers the delay model needs are provided. Every op records its
parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# When not None, ops with a non-differentiable point append their arguments here
# (shifted so that the kink sits at 0). Used by check_gradients.
_kink_trace: list[np.ndarray] | None = None
_grad_enabled = True


def record_kink(values: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append(np.array(values, dtype=DTYPE).ravel())


@contextmanager
def trace_kinks():
    global _kink_trace
    previous, _kink_trace = _kink_trace, []
    try:
        yield _kink_trace
    finally:
        _kink_trace = previous


@contextmanager
def no_grad():
    """Skip graph recording inside the block."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.retain_grad = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retain_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; ``backward(g)`` must return one gradient per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` with x [B, in], W [out, in], b [out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: shape mismatch x{x.shape} W{weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    record_kink(x.data)
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def sin_cos_features(x: Tensor, freqs: Tensor) -> Tensor:
    """Periodic features for each scalar column.

    x is [B, M] and freqs is [M, L]; the result is [B, M, 2L] holding
    ``sin(2*pi*c*x)`` followed by ``cos(2*pi*c*x)``.
    """
    if x.data.ndim != 2 or freqs.data.ndim != 2 or x.shape[1] != freqs.shape[0]:
        raise ValueError(f"sin_cos_features: shape mismatch x{x.shape} c{freqs.shape}")
    n_freq = freqs.shape[1]
    angle = 2.0 * math.pi * x.data[:, :, None] * freqs.data[None, :, :]
    s, c = np.sin(angle), np.cos(angle)

    def backward(g):
        g_angle = g[:, :, :n_freq] * c - g[:, :, n_freq:] * s
        gx = (g_angle * freqs.data[None]).sum(axis=2) * 2.0 * math.pi if x.requires_grad else None
        gc = (g_angle * x.data[:, :, None]).sum(axis=0) * 2.0 * math.pi if freqs.requires_grad else None
        return gx, gc

    return make_op(np.concatenate([s, c], axis=2), (x, freqs), backward)


def feature_linear(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Independent linear map per feature: f [B, M, F], W [M, D, F], b [M, D] -> [B, M, D]."""
    if f.data.ndim != 3 or weight.data.ndim != 3 or f.shape[1:] != (weight.shape[0], weight.shape[2]):
        raise ValueError(f"feature_linear: shape mismatch f{f.shape} W{weight.shape}")
    fm = f.data.transpose(1, 0, 2)  # [M, B, F]
    out = np.matmul(fm, weight.data.transpose(0, 2, 1)).transpose(1, 0, 2) + bias.data[None]

    def backward(g):
        gm = g.transpose(1, 0, 2)  # [M, B, D]
        gf = np.matmul(gm, weight.data).transpose(1, 0, 2) if f.requires_grad else None
        gw = np.matmul(gm.transpose(0, 2, 1), fm) if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gf, gw, gb

    return make_op(out, (f, weight, bias), backward)


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``."""
    index = np.asarray(index, dtype=np.intp)
    n_rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"embedding index out of range [0, {n_rows})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return make_op(table.data[index], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def square_sum(x: Tensor) -> Tensor:
    """``sum(x**2)``; a smooth scalar loss for tests and gradient checks."""
    return make_op(np.array((x.data**2).sum()), (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# initialisation


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# optimisation


def lr_multiplier(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to 1 at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    warm = step / warmup_steps if warmup_steps > 0 else 1.0
    span = total_steps - warmup_steps
    decay = (total_steps - step) / span if span > 0 else (1.0 if step <= total_steps else 0.0)
    return float(min(1.0, max(0.0, min(warm, decay))))


def global_grad_norm(grads: Iterable[np.ndarray | None]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))


def clip_gradients(grads: list[np.ndarray | None], clip_norm: float) -> tuple[list[np.ndarray | None], float]:
    """Rescale so the global norm is at most ``clip_norm``; returns (grads, pre-clip norm)."""
    norm = global_grad_norm(grads)
    if norm <= clip_norm or norm == 0.0:
        return grads, norm
    scale = clip_norm / norm
    return [None if g is None else g * scale for g in grads], norm


@dataclass
class OptimizerState:
    base_lr: float
    warmup_steps: int
    total_steps: int
    weight_decay: float = 0.0
    clip_norm: float | None = None
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.base_lr * lr_multiplier(self.step, self.warmup_steps, self.total_steps)


def adamw_step(params: dict[str, Tensor], state: OptimizerState) -> float:
    """One decoupled-weight-decay Adam update from ``param.grad``; returns the lr used.

    Parameters whose grad is None are treated as having zero gradient.
    """
    names = list(params)
    grads = [params[n].grad for n in names]
    if state.clip_norm is not None:
        grads, _ = clip_gradients(grads, state.clip_norm)
    lr = state.current_lr()
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    for name, g in zip(names, grads):
        p = params[name]
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        if lr == 0.0:
            continue
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    state.step += 1
    return lr


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_coords: int = 50,
    rng: np.random.Generator | None = None,
    h: float = 1e-4,
    kink_tol: float = 1e-3,
    abs_floor: float = 1e-6,
    max_attempts_factor: int = 20,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    return a scalar. A sampled coordinate is resampled when some ReLU or
    pinball argument that depends on it has its kink closer than ``kink_tol``
    in parameter space (argument / local slope), since the difference
    stencil is unreliable there.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}

    names = list(params)
    sizes = np.array([params[n].data.size for n in names], dtype=float)
    weights = sizes / sizes.sum()
    worst = 0.0
    accepted = attempts = 0
    while accepted < n_coords and attempts < n_coords * max_attempts_factor:
        attempts += 1
        name = names[rng.choice(len(names), p=weights)]
        flat = params[name].data.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        with trace_kinks() as base_trace:
            loss_fn()
        flat[j] = orig + h
        with trace_kinks() as plus_trace:
            f_plus = float(loss_fn().data)
        flat[j] = orig - h
        with trace_kinks() as minus_trace:
            f_minus = float(loss_fn().data)
        flat[j] = orig
        if _near_kink(base_trace, plus_trace, minus_trace, h, kink_tol):
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name].reshape(-1)[j])
        denom = max(abs(a), abs(numeric), abs_floor)
        err = abs(a - numeric) / denom
        if not math.isfinite(err):
            err = 0.0 if a == numeric else math.inf
        worst = max(worst, err)
        accepted += 1
    if accepted < n_coords:
        raise RuntimeError(f"only {accepted} of {n_coords} coordinates were away from kinks")
    return worst


def _near_kink(base, plus, minus, h, kink_tol) -> bool:
    for v0, vp, vm in zip(base, plus, minus):
        slope = np.abs(vp - vm) / (2.0 * h)
        moved = slope > 0
        if not moved.any():
            continue
        # distance to the kink along the perturbed coordinate
        if np.any(np.abs(v0[moved]) < kink_tol * slope[moved]):
            return True
        if np.any(np.sign(vp[moved]) != np.sign(vm[moved])):
            return True
    return False
