"""Versioned checkpoint files and the calibration sidecar.

A checkpoint is a zip archive with fixed member timestamps (so identical
runs give identical bytes) holding ``meta.json`` plus one ``.npy`` member
per parameter and optimizer moment.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import CalibrationResult
from .data import FeatureSchema
from .model import ArchitectureConfig, MultiTaskDelayModel
from .numerics import OptimizerState

CHECKPOINT_FORMAT = "shipdelay-checkpoint/1"
CALIBRATION_FORMAT = "shipdelay-calibration/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def schema_hash(schema: FeatureSchema) -> str:
    blob = json.dumps(schema.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _add(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


@dataclass
class Checkpoint:
    model: MultiTaskDelayModel
    schema: FeatureSchema
    meta: dict


def save_checkpoint(
    path: str | Path,
    model: MultiTaskDelayModel,
    schema: FeatureSchema,
    config_echo: dict | None = None,
    optimizer: OptimizerState | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    arrays = model.state_arrays()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "schema": schema.to_dict(),
        "schema_hash": schema_hash(schema),
        "architecture": model.arch.to_dict(),
        "cardinalities": model.cardinalities,
        "n_numerical": model.n_numerical,
        "parameters": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "optimizer": None,
        "rng_state": rng_state,
        "config": config_echo,
        "extra": extra or {},
    }
    if optimizer is not None:
        meta["optimizer"] = {
            "step": optimizer.step,
            "base_lr": optimizer.base_lr,
            "warmup_steps": optimizer.warmup_steps,
            "total_steps": optimizer.total_steps,
            "weight_decay": optimizer.weight_decay,
            "clip_norm": optimizer.clip_norm,
            "moments": sorted(optimizer.first_moment),
        }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _add(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, arr in arrays.items():
            _add(zf, f"params/{name}.npy", _npy_bytes(arr))
        if optimizer is not None:
            for name in sorted(optimizer.first_moment):
                _add(zf, f"optim/m/{name}.npy", _npy_bytes(optimizer.first_moment[name]))
                _add(zf, f"optim/v/{name}.npy", _npy_bytes(optimizer.second_moment[name]))
    atomic_write_bytes(path, buf.getvalue())


def _read_npy(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    with zf.open(name) as fh:
        return np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unsupported format {meta.get('format')!r}")
            arch_raw = dict(meta["architecture"])
            arch_raw["quantile_levels"] = tuple(arch_raw["quantile_levels"])
            model = MultiTaskDelayModel(meta["cardinalities"], meta["n_numerical"], ArchitectureConfig(**arch_raw))
            model.load_arrays({p["name"]: _read_npy(zf, f"params/{p['name']}.npy") for p in meta["parameters"]})
            if meta.get("optimizer"):
                names = meta["optimizer"]["moments"]
                meta["optimizer_moments"] = {
                    n: (_read_npy(zf, f"optim/m/{n}.npy"), _read_npy(zf, f"optim/v/{n}.npy")) for n in names
                }
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    schema = FeatureSchema.from_dict(meta["schema"])
    if schema_hash(schema) != meta["schema_hash"]:
        raise CheckpointError(f"{path}: schema hash mismatch")
    return Checkpoint(model, schema, meta)


def calibration_path(checkpoint_path: str | Path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".calibration.json")


def save_calibration(checkpoint_path: str | Path, result: CalibrationResult, config_echo: dict | None = None) -> Path:
    """Write the sidecar, bound to the checkpoint by content hash."""
    payload = {
        "format": CALIBRATION_FORMAT,
        "checkpoint_sha256": file_sha256(checkpoint_path),
        "calibration": result.to_dict(),
        "config": config_echo,
    }
    out = calibration_path(checkpoint_path)
    atomic_write_bytes(out, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
    return out


def load_calibration(checkpoint_path: str | Path) -> CalibrationResult | None:
    """The sidecar's calibration, or None when no sidecar exists."""
    side = calibration_path(checkpoint_path)
    if not side.exists():
        return None
    payload = json.loads(side.read_text(encoding="utf-8"))
    if payload.get("format") != CALIBRATION_FORMAT:
        raise CheckpointError(f"{side}: unsupported format {payload.get('format')!r}")
    if payload.get("checkpoint_sha256") != file_sha256(checkpoint_path):
        raise CheckpointError(f"{side}: calibration was made for a different checkpoint")
    return CalibrationResult.from_dict(payload["calibration"])
