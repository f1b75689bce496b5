import json
import os
import stat

import numpy as np
import pytest

from shipdelay.checkpoint import (
    CheckpointError,
    calibration_path,
    load_calibration,
    load_checkpoint,
    save_calibration,
    save_checkpoint,
)
from shipdelay.conformal import CalibrationResult
from shipdelay.data import CategoricalSpec, FeatureSchema, NumericalSpec
from shipdelay.model import ArchitectureConfig, MultiTaskDelayModel, predict
from shipdelay.numerics import OptimizerState

ARCH = ArchitectureConfig(n_blocks=1, d_hidden=8, dropout=0.0, plr_frequencies=2, d_num=3)


@pytest.fixture
def schema():
    return FeatureSchema(
        (CategoricalSpec("city", {"A": 1, "B": 2}),),
        (NumericalSpec("w", 1.5, 2.0), NumericalSpec("v", 0.0, 1.0)),
    )


@pytest.fixture
def model(schema):
    return MultiTaskDelayModel(schema.cardinalities, schema.n_numerical, ARCH, seed=3)


def test_round_trip(tmp_path, model, schema):
    path = tmp_path / "m.ckpt"
    opt = OptimizerState(base_lr=1e-3, warmup_steps=1, total_steps=5)
    opt.first_moment = {"classifier.b": np.array([0.25])}
    opt.second_moment = {"classifier.b": np.array([0.5])}
    save_checkpoint(path, model, schema, {"seed": 3}, opt, extra={"note": 1})
    ck = load_checkpoint(path)
    assert ck.schema == schema and ck.meta["config"] == {"seed": 3}
    assert ck.meta["optimizer_moments"]["classifier.b"][1][0] == 0.5
    cat, num = np.array([[0], [2]]), np.array([[0.1, 0.2], [1.0, -1.0]])
    np.testing.assert_array_equal(predict(ck.model, cat, num).delayed_quantiles, predict(model, cat, num).delayed_quantiles)
    assert stat.S_IMODE(os.stat(path).st_mode) == 0o644


def test_byte_identical(tmp_path, model, schema):
    save_checkpoint(tmp_path / "a", model, schema)
    save_checkpoint(tmp_path / "b", model, schema)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_missing_and_corrupt(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
    (tmp_path / "bad").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")


def test_calibration_bound_to_checkpoint(tmp_path, model, schema):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, schema)
    assert load_calibration(path) is None
    res = CalibrationResult(0.2, 0.4, -0.1, 3, 30)
    side = save_calibration(path, res)
    assert side == calibration_path(path) and side.name == "m.ckpt.calibration.json"
    assert load_calibration(path) == res
    model.params["classifier.b"].data += 1.0
    save_checkpoint(path, model, schema)
    with pytest.raises(CheckpointError, match="different checkpoint"):
        load_calibration(path)


def test_no_temp_files_left(tmp_path, model, schema):
    save_checkpoint(tmp_path / "m.ckpt", model, schema)
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
    meta = json.loads(__import__("zipfile").ZipFile(tmp_path / "m.ckpt").read("meta.json"))
    assert meta["format"].startswith("shipdelay-checkpoint/")
