"""Synthetic shipment generator with zero-inflated, heavy-tailed delays.

A latent risk score (sparse linear terms plus two interactions) drives a
logistic delay gate. The gate intercept is found by bisection on the
realized delay fraction, so the target rate is hit up to 1/n. Delayed
shipments get ``1 + floor(delay_scale * lognormal * exp(0.3 * risk))`` days;
on-time shipments get a non-positive integer delay concentrated at 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import (
    ColumnMap,
    Dataset,
    ShipmentRecord,
    date_to_day,
    day_to_date,
    derive_label,
)

ORIGIN_LAT, ORIGIN_LON = 51.0, 9.0
_BISECT_LO, _BISECT_HI = -60.0, 60.0


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_records: int = 20_000
    delay_rate_target: float = 0.10
    n_destinations: int = 2000
    n_carriers: int = 20
    n_shipment_types: int = 12
    n_countries: int = 15
    seed: int = 0
    delay_scale: float = 2.0
    ontime_spread: float = 1.0
    # logistic slope on the unit-variance risk score
    signal_strength: float = 4.0
    # logit shift from the first to the last planned date, and the matching
    # log-scale change of delay durations; 0 keeps the process stationary
    drift: float = 0.0
    shuffle_time: bool = False
    start_date: str = "2022-01-01"
    span_days: int = 730

    def validate(self) -> None:
        if self.n_records < 0:
            raise GeneratorConfigError("n_records must be non-negative")
        if not 0.01 <= self.delay_rate_target <= 0.5:
            raise GeneratorConfigError(f"delay_rate_target must be in [0.01, 0.5], got {self.delay_rate_target}")
        for name in ("n_destinations", "n_carriers", "n_shipment_types", "n_countries"):
            if getattr(self, name) < 2:
                raise GeneratorConfigError(f"{name} must be >= 2")
        for name in ("delay_scale", "ontime_spread", "span_days"):
            if not getattr(self, name) > 0:
                raise GeneratorConfigError(f"{name} must be positive")
        if self.signal_strength < 0:
            raise GeneratorConfigError("signal_strength must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def solve_intercept(logit: np.ndarray, u: np.ndarray, target: float, tol_rel: float = 0.10) -> float:
    """Bisect the gate intercept so that ``mean(u < sigmoid(logit + b))`` meets ``target``."""

    def rate(b: float) -> float:
        return float(np.mean(u < _sigmoid(logit + b)))

    lo, hi = _BISECT_LO, _BISECT_HI
    if not rate(lo) <= target <= rate(hi):
        raise GeneratorConfigError(f"cannot bracket delay rate {target} (range {rate(lo)}..{rate(hi)})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    b = hi
    if abs(rate(b) - target) > tol_rel * target:
        raise GeneratorConfigError(f"realized delay rate {rate(b):.4f} misses target {target} by >10%")
    return b


def generate(config: GeneratorConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_records

    # per-category tables, drawn first so they do not depend on n
    dest_country = rng.integers(config.n_countries, size=config.n_destinations)
    country_lat = rng.uniform(36.0, 62.0, size=config.n_countries)
    country_lon = rng.uniform(-9.0, 28.0, size=config.n_countries)
    dest_lat = np.clip(country_lat[dest_country] + rng.normal(0, 1.5, config.n_destinations), -90, 90)
    dest_lon = country_lon[dest_country] + rng.normal(0, 2.0, config.n_destinations)
    carrier_effect = rng.normal(0, 1.0, config.n_carriers)
    type_effect = rng.normal(0, 0.7, config.n_shipment_types)
    country_effect = rng.normal(0, 0.8, config.n_countries)
    # only a few carriers are sensitive to long hauls
    carrier_distance = np.where(rng.random(config.n_carriers) < 0.3, 1.0, 0.0)
    dest_effect = np.where(rng.random(config.n_destinations) < 0.05, rng.normal(0, 1.5, config.n_destinations), 0.0)

    dest = rng.choice(config.n_destinations, size=n, p=_zipf_probs(config.n_destinations, 1.05))
    carrier = rng.choice(config.n_carriers, size=n, p=_zipf_probs(config.n_carriers, 0.8))
    stype = rng.choice(config.n_shipment_types, size=n, p=_zipf_probs(config.n_shipment_types, 1.0))
    dangerous = (rng.random(n) < 0.06).astype(np.int64)
    country = dest_country[dest]

    weight = np.round(rng.lognormal(3.0, 1.2, n), 2)
    volume = np.round(weight / 180.0 * rng.lognormal(0.0, 0.4, n), 3)
    items = 1 + rng.poisson(np.sqrt(weight) / 2.0)
    lat = np.round(dest_lat[dest], 4)
    lon = np.round(dest_lon[dest], 4)
    dist_km = np.hypot((lat - ORIGIN_LAT) * 111.0, (lon - ORIGIN_LON) * 111.0 * math.cos(math.radians(ORIGIN_LAT)))
    dist_km = np.round(dist_km * rng.uniform(1.05, 1.3, n) + 5.0, 1)

    log_dist = (np.log1p(dist_km) - 6.0) / 1.0
    log_weight = (np.log(weight) - 3.0) / 1.2
    risk = (
        carrier_effect[carrier]
        + type_effect[stype]
        + country_effect[country]
        + dest_effect[dest]
        + 0.6 * log_dist
        + 0.3 * log_weight
        + 1.2 * dangerous
        + 0.8 * carrier_distance[carrier] * log_dist
        + 0.5 * dangerous * log_weight
    )
    if n > 1 and risk.std() > 0:
        risk = (risk - risk.mean()) / risk.std()

    # planned dates increase with record index
    start = date_to_day(config.start_date)
    day_offset = np.floor(np.arange(n) * config.span_days / max(n, 1)).astype(np.int64)
    if config.shuffle_time:
        day_offset = rng.permutation(day_offset)
    planned = start + day_offset
    time_pos = day_offset / config.span_days - 0.5

    logit = config.signal_strength * risk + config.drift * time_pos
    u = rng.random(n)
    if n:
        logit = logit + solve_intercept(logit, u, config.delay_rate_target)
    delayed = u < _sigmoid(logit)

    tail = rng.lognormal(0.0, 0.75, n) * np.exp(0.3 * risk + 0.5 * config.drift * time_pos)
    delayed_days = 1 + np.floor(config.delay_scale * tail)
    ontime_raw = np.clip(rng.normal(0.0, 0.5 * config.ontime_spread, n), -2 * config.ontime_spread + 1e-9, 1 - 1e-9)
    # ceil keeps whole days strictly above the lower bound
    ontime_days = np.minimum(np.ceil(ontime_raw), 0.0)
    delay = np.where(delayed, delayed_days, ontime_days)
    actual = planned + delay

    records = []
    labels = []
    for i in range(n):
        cats = (
            f"D{dest[i]:06d}",
            f"C{country[i]:02d}",
            f"K{carrier[i]:03d}",
            f"T{stype[i]:02d}",
            str(int(dangerous[i])),
        )
        nums = (
            float(weight[i]),
            float(volume[i]),
            float(items[i]),
            float(lat[i]),
            float(lon[i]),
            float(dist_km[i]),
        )
        rec = ShipmentRecord(cats, nums, float(planned[i]), float(actual[i]))
        records.append(rec)
        labels.append(derive_label(rec.planned_arrival, rec.actual_arrival))
    return Dataset(tuple(records), tuple(labels), ColumnMap())


def latent_risk_features(data: Dataset) -> np.ndarray:
    """Design matrix (one-hot categoricals + log numericals) for a reference logistic fit."""
    cols = []
    for k in range(len(data.columns.categorical)):
        tokens = [r.categorical_values[k] for r in data.records]
        vocab = {t: i for i, t in enumerate(sorted(set(tokens)))}
        onehot = np.zeros((len(tokens), len(vocab)))
        onehot[np.arange(len(tokens)), [vocab[t] for t in tokens]] = 1.0
        cols.append(onehot)
    num = np.array([r.numerical_values for r in data.records], dtype=np.float64)
    cols.append(np.log1p(np.abs(num)))
    return np.hstack(cols)


def emit_csv(data: Dataset, path: str | Path) -> int:
    """Write ``data`` in the dialect ``ingest_csv`` reads; returns the number of data rows."""
    path = Path(path)
    cols = data.columns
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([*cols.categorical, *cols.numerical, cols.planned_arrival, cols.actual_arrival])
            for r in data.records:
                writer.writerow(
                    [
                        *r.categorical_values,
                        *(repr(v) for v in r.numerical_values),
                        day_to_date(r.planned_arrival),
                        "" if r.actual_arrival is None else day_to_date(r.actual_arrival),
                    ]
                )
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return len(data)
