"""Shared-backbone model with a delay classifier and two quantile regression heads."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

QUANTILE_LEVELS = (0.1, 0.5, 0.9)
PARAM_GROUPS = ("embedding", "backbone", "classifier", "head_delayed", "head_ontime")


def embed_dim(cardinality: int, cap: int = 50) -> int:
    """Categorical embedding width ``min(cap, floor(log2 C) + 1)``."""
    if cardinality < 1:
        raise ValueError("cardinality must be >= 1")
    # bit_length avoids float log2 rounding at exact powers of two
    return min(cap, int(cardinality).bit_length())


@dataclass(frozen=True)
class ArchitectureConfig:
    n_blocks: int = 2
    d_hidden: int = 128
    dropout: float = 0.1
    d_cat_max: int = 50
    plr_frequencies: int = 8
    d_num: int = 24
    head_hidden: int | None = None
    quantile_levels: tuple[float, ...] = QUANTILE_LEVELS
    freq_sigma: float = 0.5

    def __post_init__(self):
        levels = tuple(float(q) for q in self.quantile_levels)
        object.__setattr__(self, "quantile_levels", levels)
        if any(b <= a for a, b in zip(levels, levels[1:])) or not all(0 < q < 1 for q in levels) or 0.5 not in levels:
            raise ValueError(f"quantile_levels must be strictly ascending in (0,1) and contain 0.5, got {levels}")
        if len(levels) != 3:
            raise ValueError("exactly three quantile levels (lower, median, upper) are supported")
        if self.n_blocks < 1 or self.d_hidden < 1:
            raise ValueError("n_blocks and d_hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_width(self) -> int:
        return self.head_hidden if self.head_hidden is not None else max(1, self.d_hidden // 2)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["quantile_levels"] = list(self.quantile_levels)
        return out


@dataclass
class ForwardOutput:
    hidden: Tensor
    delay_prob: Tensor  # [B, 1]
    delayed_quantiles: Tensor
    ontime_quantiles: Tensor
    routed_head: np.ndarray
    routed_quantiles: np.ndarray = field(init=False)

    def __post_init__(self):
        pick = self.routed_head.astype(bool)[:, None]
        self.routed_quantiles = np.where(pick, self.delayed_quantiles.data, self.ontime_quantiles.data)

    @property
    def prob(self) -> np.ndarray:
        return self.delay_prob.data.reshape(-1)


class MultiTaskDelayModel:
    """Parameters live in ``self.params`` keyed ``<group>.<name>``."""

    def __init__(self, cardinalities, n_numerical: int, arch: ArchitectureConfig, seed: int = 0):
        self.cardinalities = [int(c) for c in cardinalities]
        self.n_numerical = int(n_numerical)
        self.arch = arch
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        a = self.arch
        for k, card in enumerate(self.cardinalities):
            self._add(f"embedding.cat{k}", rng.normal(0.0, 0.1, size=(card, embed_dim(card, a.d_cat_max))))
        m, ell, dn = self.n_numerical, a.plr_frequencies, a.d_num
        if m:
            self._add("embedding.plr_freq", rng.normal(0.0, a.freq_sigma, size=(m, ell)))
            bound = math.sqrt(6.0 / (2 * ell))
            self._add("embedding.plr_weight", rng.uniform(-bound, bound, size=(m, dn, 2 * ell)))
            self._add("embedding.plr_bias", np.zeros((m, dn)))
        width = self.d_z
        for i in range(a.n_blocks):
            self._add(f"backbone.w{i}", nx.kaiming_uniform(rng, a.d_hidden, width))
            self._add(f"backbone.b{i}", np.zeros(a.d_hidden))
            width = a.d_hidden
        self._add("classifier.w", nx.kaiming_uniform(rng, 1, a.d_hidden) / math.sqrt(6.0))
        self._add("classifier.b", np.zeros(1))
        for head in ("head_delayed", "head_ontime"):
            self._add(f"{head}.w0", nx.kaiming_uniform(rng, a.head_width, a.d_hidden + 1))
            self._add(f"{head}.b0", np.zeros(a.head_width))
            self._add(f"{head}.w1", nx.kaiming_uniform(rng, len(a.quantile_levels), a.head_width) / math.sqrt(6.0))
            self._add(f"{head}.b1", np.zeros(len(a.quantile_levels)))

    @property
    def d_z(self) -> int:
        return sum(embed_dim(c, self.arch.d_cat_max) for c in self.cardinalities) + self.n_numerical * self.arch.d_num

    def group_params(self, *groups: str) -> OrderedDict[str, Tensor]:
        return OrderedDict((n, p) for n, p in self.params.items() if n.split(".", 1)[0] in groups)

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for name, p in self.params.items():
            p.requires_grad = name.split(".", 1)[0] in groups
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_arrays(self, arrays) -> None:
        for name, p in self.params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        cat: np.ndarray,
        num: np.ndarray,
        mode: str = "infer",
        labels: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> ForwardOutput:
        """Run the network.

        In ``train`` mode dropout is active and rows are routed by the given
        ground-truth labels; in ``infer`` mode a row goes to the delayed head
        only when its delay probability is strictly above 0.5.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        training = mode == "train"
        a, p = self.arch, self.params
        cat = np.asarray(cat)
        num = np.asarray(num, dtype=np.float64)
        batch = cat.shape[0]
        if cat.shape != (batch, len(self.cardinalities)) or num.shape != (batch, self.n_numerical):
            raise ValueError(f"expected cat [B,{len(self.cardinalities)}] and num [B,{self.n_numerical}]")

        parts = [nx.embedding(p[f"embedding.cat{k}"], cat[:, k]) for k in range(len(self.cardinalities))]
        if self.n_numerical:
            feats = nx.sin_cos_features(Tensor(num), p["embedding.plr_freq"])
            plr = nx.relu(nx.feature_linear(feats, p["embedding.plr_weight"], p["embedding.plr_bias"]))
            parts.append(nx.reshape(plr, (batch, self.n_numerical * a.d_num)))
        x = nx.concat(parts, axis=1)
        for i in range(a.n_blocks):
            x = nx.relu(nx.linear(x, p[f"backbone.w{i}"], p[f"backbone.b{i}"]))
            x = nx.dropout(x, a.dropout, rng, training)
        hidden = x
        prob = nx.sigmoid(nx.linear(hidden, p["classifier.w"], p["classifier.b"]))
        r = nx.concat([hidden, prob], axis=1)
        delayed_q = self._head("head_delayed", r)
        ontime_q = self._head("head_ontime", r)

        if training:
            if labels is None:
                raise ValueError("train mode routes by ground truth; labels are required")
            routed = np.asarray(labels, dtype=np.int64).reshape(-1)
        else:
            routed = (prob.data.reshape(-1) > 0.5).astype(np.int64)
        return ForwardOutput(hidden, prob, delayed_q, ontime_q, routed)

    def _head(self, head: str, r: Tensor) -> Tensor:
        p = self.params
        z = nx.relu(nx.linear(r, p[f"{head}.w0"], p[f"{head}.b0"]))
        return nx.linear(z, p[f"{head}.w1"], p[f"{head}.b1"])


def sort_quantiles(q: np.ndarray) -> np.ndarray:
    """Sort the last axis ascending (quantile-crossing repair, inference only)."""
    return np.sort(np.asarray(q, dtype=np.float64), axis=-1)


@dataclass
class QuantilePrediction:
    """Inference output for a batch; all quantile arrays are sorted [N, 3]."""

    delay_prob: np.ndarray
    predicted_delayed: np.ndarray
    delayed_quantiles: np.ndarray
    ontime_quantiles: np.ndarray

    @property
    def routed_quantiles(self) -> np.ndarray:
        return np.where(self.predicted_delayed.astype(bool)[:, None], self.delayed_quantiles, self.ontime_quantiles)

    def __len__(self) -> int:
        return self.delay_prob.shape[0]


def predict(model: MultiTaskDelayModel, cat: np.ndarray, num: np.ndarray, batch_size: int = 4096) -> QuantilePrediction:
    probs, dq, oq = [], [], []
    with nx.no_grad():
        for lo in range(0, cat.shape[0], batch_size):
            out = model.forward(cat[lo : lo + batch_size], num[lo : lo + batch_size], mode="infer")
            probs.append(out.prob)
            dq.append(out.delayed_quantiles.data)
            oq.append(out.ontime_quantiles.data)
    n_levels = len(model.arch.quantile_levels)
    prob = np.concatenate(probs) if probs else np.zeros(0)
    return QuantilePrediction(
        prob,
        (prob > 0.5).astype(np.int64),
        sort_quantiles(np.concatenate(dq) if dq else np.zeros((0, n_levels))),
        sort_quantiles(np.concatenate(oq) if oq else np.zeros((0, n_levels))),
    )
