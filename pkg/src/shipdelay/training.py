"""Two-stage training: joint classification + regression, then head-only fine-tuning."""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import EncodedData
from .losses import regression_loss, sigmoid_f1_loss
from .model import MultiTaskDelayModel

log = logging.getLogger(__name__)

HEAD_GROUPS = ("head_delayed", "head_ontime")
ALL_GROUPS = ("embedding", "backbone", "classifier", *HEAD_GROUPS)
HISTORY_FIELDS = ("stage", "epoch", "train_lc", "train_lr", "val_lc", "val_lr", "lr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    max_epochs_stage1: int = 20
    max_epochs_stage2: int = 10
    patience: int = 5
    min_delta: float = 1e-4
    base_lr: float = 1e-3
    weight_decay: float = 1e-5
    clip_norm: float | None = 1.0
    warmup_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the F1 surrogate is batch-level)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    train_lc: float
    train_lr: float
    val_lc: float
    val_lr: float
    lr: float


@dataclass
class StageResult:
    history: list[EpochRecord]
    best_epoch: int
    best_value: float
    steps: int
    optimizer: nx.OptimizerState
    # largest global grad norm seen on parameters outside the trainable groups
    max_frozen_grad_norm: float = 0.0
    stopped_early: bool = False
    rng_state: dict | None = None


class EarlyStopping:
    """Patience counter on a loss to minimise.

    The best snapshot follows the true minimum; only improvements larger than
    ``min_delta`` reset the patience counter.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self._reference = np.inf
        self.wait = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True when ``value`` is a new best."""
        is_best = value < self.best
        if is_best:
            self.best = value
        if value < self._reference - self.min_delta:
            self._reference = value
            self.wait = 0
        else:
            self.wait += 1
        return is_best

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch of one row is dropped."""
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) == 1:
        log.debug("dropping a size-1 trailing batch")
        batches.pop()
    return batches


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def validation_losses(model: MultiTaskDelayModel, data: EncodedData) -> tuple[float, float]:
    """Full-split classification and regression losses without dropout."""
    with nx.no_grad():
        out = model.forward(data.cat, data.num, mode="infer")
        lc = float(sigmoid_f1_loss(out.delay_prob, data.d).data)
        lr = float(
            regression_loss(out.delayed_quantiles, out.ontime_quantiles, data.y, data.d, model.arch.quantile_levels).data
        )
    return lc, lr


def _run_stage(
    stage: int,
    model: MultiTaskDelayModel,
    train: EncodedData,
    val: EncodedData,
    cfg: TrainConfig,
    trainable: tuple[str, ...],
    max_epochs: int,
    monitor: str,
    callback: Callable[[dict], None] | None,
) -> StageResult:
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.y is None or val.y is None:
        raise ValueError("training and validation data need labels")
    rng = np.random.default_rng([cfg.seed, stage])
    n_steps = steps_per_epoch(len(train), cfg.batch_size)
    total = max(1, max_epochs * n_steps)
    opt = nx.OptimizerState(
        base_lr=cfg.base_lr,
        warmup_steps=int(round(cfg.warmup_fraction * total)),
        total_steps=total,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
    )
    model.set_trainable(trainable)
    params = model.group_params(*trainable)
    frozen = [p for n, p in model.params.items() if n not in params]
    levels = model.arch.quantile_levels

    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_arrays = model.state_arrays()
    best_epoch = 0
    history: list[EpochRecord] = []
    max_frozen = 0.0
    lr = 0.0
    stopped = False
    try:
        for epoch in range(1, max_epochs + 1):
            sum_lc = sum_lr = 0.0
            batches = make_batches(len(train), cfg.batch_size, rng)
            for idx in batches:
                b = train.take(idx)
                out = model.forward(b.cat, b.num, mode="train", labels=b.d, rng=rng)
                if not np.array_equal(out.routed_head, b.d):
                    raise AssertionError("training routing must follow ground-truth labels")
                l_r = regression_loss(out.delayed_quantiles, out.ontime_quantiles, b.y, b.d, levels)
                l_c = sigmoid_f1_loss(out.delay_prob, b.d)
                # stage 2 tracks L_c for the history only; the classifier is frozen
                total_loss = l_c + l_r if stage == 1 else l_r
                sum_lc += float(l_c.data)
                sum_lr += float(l_r.data)
                model.zero_grad()
                if callback is not None:
                    out.delayed_quantiles.retain_grad = True
                    out.ontime_quantiles.retain_grad = True
                total_loss.backward()
                max_frozen = max(max_frozen, nx.global_grad_norm(p.grad for p in frozen))
                if callback is not None:
                    callback({"stage": stage, "epoch": epoch, "batch": b, "output": out, "model": model})
                lr = nx.adamw_step(params, opt)
            val_lc, val_lr = validation_losses(model, val)
            nb = max(len(batches), 1)
            rec = EpochRecord(stage, epoch, sum_lc / nb, sum_lr / nb, val_lc, val_lr, lr)
            history.append(rec)
            log.info(
                "stage %d epoch %d: train Lc %.5f Lr %.5f | val Lc %.5f Lr %.5f | lr %.2e",
                stage, epoch, rec.train_lc, rec.train_lr, val_lc, val_lr, lr,
            )
            value = val_lc if monitor == "lc" else val_lr
            if stopper.update(value):
                best_arrays = model.state_arrays()
                best_epoch = epoch
            if stopper.should_stop:
                stopped = True
                break
    finally:
        model.set_trainable(ALL_GROUPS)
    model.load_arrays(best_arrays)
    return StageResult(
        history, best_epoch, float(stopper.best), opt.step, opt, max_frozen, stopped, rng.bit_generator.state
    )


def train_stage1(
    model: MultiTaskDelayModel,
    train: EncodedData,
    val: EncodedData,
    cfg: TrainConfig,
    callback: Callable[[dict], None] | None = None,
) -> StageResult:
    """Minimise L_c + L_r over all parameters; early-stop on validation L_c."""
    return _run_stage(1, model, train, val, cfg, ALL_GROUPS, cfg.max_epochs_stage1, "lc", callback)


def train_stage2(
    model: MultiTaskDelayModel,
    train: EncodedData,
    val: EncodedData,
    cfg: TrainConfig,
    callback: Callable[[dict], None] | None = None,
) -> StageResult:
    """Fine-tune only the regression heads on L_r with a fresh warmup/decay schedule."""
    return _run_stage(2, model, train, val, cfg, HEAD_GROUPS, cfg.max_epochs_stage2, "lr", callback)


@dataclass
class TrainingRun:
    stage1: StageResult
    stage2: StageResult
    history: list[EpochRecord] = field(default_factory=list)


def train_two_stage(model, train: EncodedData, val: EncodedData, cfg: TrainConfig) -> TrainingRun:
    s1 = train_stage1(model, train, val, cfg)
    s2 = train_stage2(model, train, val, cfg)
    return TrainingRun(s1, s2, s1.history + s2.history)


def write_history(path: str | Path, history: list[EpochRecord], header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([rec.stage, rec.epoch, *(repr(float(getattr(rec, f))) for f in HISTORY_FIELDS[2:])])
