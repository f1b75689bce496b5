"""Shipment records, labels, feature schema, CSV ingestion and chronological splits."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DELAY_THRESHOLD_DAYS = 1.0
UNKNOWN_INDEX = 0
SPLIT_TAGS = ("train", "val", "calib", "test", "unsplit")
_EPOCH = date(1970, 1, 1)

# Column set emitted by the generator: a subset of the industrial feature tables.
DEFAULT_CATEGORICAL = (
    "to_location_id",
    "to_country",
    "preferred_carrier_id",
    "shipment_type_id",
    "dangerous_goods",
)
DEFAULT_NUMERICAL = (
    "weight_kg",
    "volume_m3",
    "n_items",
    "dest_latitude",
    "dest_longitude",
    "distance_km",
)


class SchemaError(ValueError):
    """Input file does not match the expected column layout."""


@dataclass(frozen=True)
class ColumnMap:
    categorical: tuple[str, ...] = DEFAULT_CATEGORICAL
    numerical: tuple[str, ...] = DEFAULT_NUMERICAL
    planned_arrival: str = "planned_arrival"
    actual_arrival: str = "actual_arrival"

    @classmethod
    def from_dict(cls, raw: Mapping | None) -> ColumnMap:
        if not raw:
            return cls()
        kw = dict(raw)
        for key in ("categorical", "numerical"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "categorical": list(self.categorical),
            "numerical": list(self.numerical),
            "planned_arrival": self.planned_arrival,
            "actual_arrival": self.actual_arrival,
        }


@dataclass(frozen=True, slots=True)
class ShipmentRecord:
    """Raw features of one shipment. Timestamps are day numbers since 1970-01-01."""

    categorical_values: tuple[str, ...]
    numerical_values: tuple[float, ...]
    planned_arrival: float
    actual_arrival: float | None = None


@dataclass(frozen=True, slots=True)
class DelayLabel:
    delay_days: float
    is_delayed: int


def derive_label(planned: float, actual: float) -> DelayLabel:
    delay = float(actual) - float(planned)
    return DelayLabel(delay, int(delay >= DELAY_THRESHOLD_DAYS))


def date_to_day(text: str) -> int:
    """Parse an ISO date (a time part, if any, is dropped) to a day number."""
    text = text.strip()
    return (date.fromisoformat(text[:10]) - _EPOCH).days


def day_to_date(day: float) -> str:
    return date.fromordinal(_EPOCH.toordinal() + int(math.floor(day))).isoformat()


@dataclass(frozen=True)
class Dataset:
    records: tuple[ShipmentRecord, ...]
    labels: tuple[DelayLabel, ...] | None
    columns: ColumnMap = field(default_factory=ColumnMap)
    split_tag: str = "unsplit"

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.records):
            raise ValueError("records and labels must have equal length")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def delay_days(self) -> np.ndarray:
        return np.array([lab.delay_days for lab in self._require_labels()], dtype=np.float64)

    @property
    def is_delayed(self) -> np.ndarray:
        return np.array([lab.is_delayed for lab in self._require_labels()], dtype=np.int64)

    @property
    def planned(self) -> np.ndarray:
        return np.array([r.planned_arrival for r in self.records], dtype=np.float64)

    def subset(self, index: Sequence[int], split_tag: str | None = None) -> Dataset:
        labels = None if self.labels is None else tuple(self.labels[i] for i in index)
        return Dataset(
            tuple(self.records[i] for i in index), labels, self.columns, split_tag or self.split_tag
        )

    def _require_labels(self) -> tuple[DelayLabel, ...]:
        if self.labels is None:
            raise ValueError("dataset has no labels (actual arrivals missing)")
        return self.labels


@dataclass(frozen=True)
class IngestResult:
    dataset: Dataset
    n_skipped: int


def ingest_csv(path: str | Path, columns: ColumnMap | None = None, require_actual: bool = True) -> IngestResult:
    """Read shipments from a comma-separated UTF-8 file with a header row.

    Rows with non-numeric or non-finite numericals, or unparseable dates, are
    skipped and counted. Without ``require_actual`` the actual-arrival column
    may be absent or blank and the returned dataset carries no labels.
    """
    columns = columns or ColumnMap()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        pos = {name: i for i, name in enumerate(header)}
        required = [*columns.categorical, *columns.numerical, columns.planned_arrival]
        if require_actual:
            required.append(columns.actual_arrival)
        missing = [c for c in required if c not in pos]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        cat_pos = [pos[c] for c in columns.categorical]
        num_pos = [pos[c] for c in columns.numerical]
        planned_pos = pos[columns.planned_arrival]
        actual_pos = pos.get(columns.actual_arrival)

        records: list[ShipmentRecord] = []
        skipped = 0
        has_all_actual = True
        for row in reader:
            if not row:
                continue
            try:
                nums = tuple(float(row[i]) for i in num_pos)
                if not all(math.isfinite(v) for v in nums):
                    raise ValueError("non-finite numerical value")
                planned = float(date_to_day(row[planned_pos]))
                actual_text = row[actual_pos].strip() if actual_pos is not None else ""
                actual = float(date_to_day(actual_text)) if actual_text else None
                if actual is None and require_actual:
                    raise ValueError("missing actual arrival")
                cats = tuple(row[i] for i in cat_pos)
            except (ValueError, IndexError):
                skipped += 1
                continue
            has_all_actual &= actual is not None
            records.append(ShipmentRecord(cats, nums, planned, actual))

    if skipped:
        log.warning("%s: skipped %d malformed row(s)", path, skipped)
    labels = None
    if records and has_all_actual:
        labels = tuple(derive_label(r.planned_arrival, r.actual_arrival) for r in records)
    return IngestResult(Dataset(tuple(records), labels, columns), skipped)


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class CategoricalSpec:
    name: str
    vocabulary: Mapping[str, int]

    @property
    def cardinality(self) -> int:
        return len(self.vocabulary) + 1


@dataclass(frozen=True)
class NumericalSpec:
    name: str
    mean: float
    stddev: float


@dataclass(frozen=True)
class FeatureSchema:
    categorical_specs: tuple[CategoricalSpec, ...]
    numerical_specs: tuple[NumericalSpec, ...]

    @property
    def n_categorical(self) -> int:
        return len(self.categorical_specs)

    @property
    def n_numerical(self) -> int:
        return len(self.numerical_specs)

    @property
    def cardinalities(self) -> list[int]:
        return [s.cardinality for s in self.categorical_specs]

    def to_dict(self) -> dict:
        return {
            "categorical": [
                {"name": s.name, "tokens": sorted(s.vocabulary, key=s.vocabulary.__getitem__)}
                for s in self.categorical_specs
            ],
            "numerical": [{"name": s.name, "mean": s.mean, "stddev": s.stddev} for s in self.numerical_specs],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> FeatureSchema:
        cats = tuple(
            CategoricalSpec(c["name"], {tok: i + 1 for i, tok in enumerate(c["tokens"])}) for c in raw["categorical"]
        )
        nums = tuple(NumericalSpec(n["name"], float(n["mean"]), float(n["stddev"])) for n in raw["numerical"])
        return cls(cats, nums)


def fit_schema(train: Dataset) -> FeatureSchema:
    """Build vocabularies (index 0 = UNKNOWN, tokens in first-seen order) and z-score parameters."""
    if len(train) == 0:
        raise ValueError("cannot fit a schema on an empty dataset")
    cols = train.columns
    cat_specs = []
    for k, name in enumerate(cols.categorical):
        vocab: dict[str, int] = {}
        for r in train.records:
            tok = r.categorical_values[k]
            if tok not in vocab:
                vocab[tok] = len(vocab) + 1
        cat_specs.append(CategoricalSpec(name, vocab))
    values = np.array([r.numerical_values for r in train.records], dtype=np.float64).reshape(len(train), -1)
    num_specs = []
    for m, name in enumerate(cols.numerical):
        mean = float(values[:, m].mean())
        std = float(values[:, m].std())
        if not std > 0.0:
            log.warning("numerical column %r is constant; using stddev 1", name)
            std = 1.0
        num_specs.append(NumericalSpec(name, mean, std))
    return FeatureSchema(tuple(cat_specs), tuple(num_specs))


def encode(record: ShipmentRecord, schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    idx = np.array(
        [s.vocabulary.get(tok, UNKNOWN_INDEX) for s, tok in zip(schema.categorical_specs, record.categorical_values)],
        dtype=np.int64,
    )
    num = np.array(
        [(v - s.mean) / s.stddev for s, v in zip(schema.numerical_specs, record.numerical_values)], dtype=np.float64
    )
    return idx, num


@dataclass(frozen=True)
class EncodedData:
    """Model-ready arrays: category indices [N, K], standardized numericals [N, M], targets."""

    cat: np.ndarray
    num: np.ndarray
    y: np.ndarray | None = None
    d: np.ndarray | None = None

    def __len__(self) -> int:
        return self.cat.shape[0]

    def take(self, index: np.ndarray) -> EncodedData:
        return EncodedData(
            self.cat[index],
            self.num[index],
            None if self.y is None else self.y[index],
            None if self.d is None else self.d[index],
        )


def encode_dataset(data: Dataset, schema: FeatureSchema) -> EncodedData:
    n = len(data)
    cat = np.zeros((n, schema.n_categorical), dtype=np.int64)
    for k, spec in enumerate(schema.categorical_specs):
        vocab = spec.vocabulary
        cat[:, k] = [vocab.get(r.categorical_values[k], UNKNOWN_INDEX) for r in data.records]
    raw = np.array([r.numerical_values for r in data.records], dtype=np.float64).reshape(n, schema.n_numerical)
    mean = np.array([s.mean for s in schema.numerical_specs])
    std = np.array([s.stddev for s in schema.numerical_specs])
    num = (raw - mean) / std
    y = d = None
    if data.labels is not None:
        y = data.delay_days
        d = data.is_delayed
    return EncodedData(cat, num, y, d)


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share; the remainder goes to the first (train) split."""
    if len(ratios) != 4:
        raise ValueError("expected four split ratios")
    if any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    sizes = [math.floor(n * r) for r in ratios]
    sizes[0] += n - sum(sizes)
    return sizes


def chronological_split(
    data: Dataset, ratios: Sequence[float] = (0.7, 0.1, 0.1, 0.1)
) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    """Stable sort by planned arrival, then cut contiguously into train/val/calib/test."""
    if len(data) == 0:
        raise ValueError("cannot split an empty dataset")
    sizes = split_sizes(len(data), ratios)
    order = np.argsort(data.planned, kind="stable")
    bounds = np.cumsum([0] + sizes)
    tags = ("train", "val", "calib", "test")
    return tuple(data.subset(order[lo:hi].tolist(), tag) for tag, lo, hi in zip(tags, bounds[:-1], bounds[1:]))
