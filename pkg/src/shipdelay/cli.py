"""``shipdelay`` command line: gen-data, train, calibrate, evaluate, predict.

Exit codes: 0 success, 1 config error, 2 missing artifact, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_calibration, load_checkpoint, save_calibration, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .conformal import calibrate, calibrated_interval
from .data import Dataset, chronological_split, encode_dataset, fit_schema, ingest_csv
from .evaluation import format_table, full_report, write_report_csv, write_report_json
from .model import MultiTaskDelayModel, predict
from .synthgen import emit_csv, generate
from .training import train_stage1, train_stage2, write_history

log = logging.getLogger("shipdelay")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

PREDICTION_FIELDS = (
    "row",
    "delay_probability",
    "predicted_is_delayed",
    "q10",
    "q50",
    "q90",
    "calibrated_low",
    "calibrated_high",
    "interval_collapsed",
    "routed_head",
)


class MissingArtifact(FileNotFoundError):
    pass


def config_comment(cfg: RunConfig) -> str:
    return "config " + json.dumps(cfg.echo(), sort_keys=True, separators=(",", ":"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    path = _require(cfg.resolve(cfg.data.path), "data file")
    result = ingest_csv(path, cfg.data.columns)
    if result.n_skipped:
        log.warning("skipped %d malformed row(s) in %s", result.n_skipped, path)
    if len(result.dataset) == 0:
        raise ValueError(f"{path}: no usable rows")
    return chronological_split(result.dataset, cfg.data.split_ratios)


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = cfg.resolve(cfg.data.path)
    n = emit_csv(generate(cfg.generator), out)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train, val, _, _ = load_splits(cfg)
    schema = fit_schema(train)
    tr, va = encode_dataset(train, schema), encode_dataset(val, schema)
    model = MultiTaskDelayModel(schema.cardinalities, schema.n_numerical, cfg.architecture, seed=cfg.training.seed)
    s1 = train_stage1(model, tr, va, cfg.training)
    s2 = train_stage2(model, tr, va, cfg.training)
    ckpt = cfg.resolve(cfg.output.checkpoint)
    save_checkpoint(
        ckpt,
        model,
        schema,
        config_echo=cfg.echo(),
        optimizer=s2.optimizer,
        rng_state=s2.rng_state,
        extra={
            "stage1": {"best_epoch": s1.best_epoch, "best_val_lc": s1.best_value, "steps": s1.steps},
            "stage2": {"best_epoch": s2.best_epoch, "best_val_lr": s2.best_value, "steps": s2.steps},
        },
    )
    write_history(cfg.resolve(cfg.output.history), s1.history + s2.history, config_comment(cfg))
    print(f"stage 1: {len(s1.history)} epoch(s), best val Lc {s1.best_value:.5f} at epoch {s1.best_epoch}")
    print(f"stage 2: {len(s2.history)} epoch(s), best val Lr {s2.best_value:.5f} at epoch {s2.best_epoch}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _load_model(cfg: RunConfig):
    return load_checkpoint(_require(cfg.resolve(cfg.output.checkpoint), "checkpoint"))


def cmd_calibrate(cfg: RunConfig, args) -> int:
    ckpt = _load_model(cfg)
    _, _, calib, _ = load_splits(cfg)
    result = calibrate(ckpt.model, encode_dataset(calib, ckpt.schema), cfg.conformal.alpha)
    side = save_calibration(cfg.resolve(cfg.output.checkpoint), result, cfg.echo())
    print(
        f"alpha {result.alpha}: q_hat delayed {result.q_hat_delayed:.6g} (n={result.n_delayed}), "
        f"on-time {result.q_hat_ontime:.6g} (n={result.n_ontime})"
    )
    print(f"calibration: {side}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ckpt_path = cfg.resolve(cfg.output.checkpoint)
    ckpt = _load_model(cfg)
    calibration = load_calibration(ckpt_path)
    if calibration is None:
        log.warning("no calibration sidecar; post-calibration rows will be empty")
    _, _, _, test = load_splits(cfg)
    result = full_report(ckpt.model, calibration, encode_dataset(test, ckpt.schema), cfg.conformal.alpha)
    write_report_csv(cfg.resolve(cfg.output.report_csv), result, config_comment(cfg))
    write_report_json(cfg.resolve(cfg.output.report_json), result, cfg.echo())
    if args.json:
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    else:
        print(format_table(result))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    ckpt_path = cfg.resolve(cfg.output.checkpoint)
    ckpt = _load_model(cfg)
    calibration = load_calibration(ckpt_path)
    src = _require(Path(args.input), "input file")
    ingested = ingest_csv(src, cfg.data.columns, require_actual=False)
    enc = encode_dataset(ingested.dataset, ckpt.schema)
    pred = predict(ckpt.model, enc.cat, enc.num)
    routed = pred.routed_quantiles
    iv = calibrated_interval(pred, calibration) if calibration is not None else None
    out = Path(args.output) if args.output else cfg.resolve(cfg.output.predictions)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {config_comment(cfg)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_FIELDS)
        for i in range(len(pred)):
            writer.writerow(
                [
                    i,
                    repr(float(pred.delay_prob[i])),
                    int(pred.predicted_delayed[i]),
                    *(repr(float(v)) for v in routed[i]),
                    "" if iv is None else repr(float(iv.low[i])),
                    "" if iv is None else repr(float(iv.high[i])),
                    "" if iv is None else int(iv.collapsed[i]),
                    "delayed" if pred.predicted_delayed[i] else "ontime",
                ]
            )
    print(f"wrote {len(pred)} prediction(s) to {out}" + (f"; skipped {ingested.n_skipped}" if ingested.n_skipped else ""))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shipdelay", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="run configuration (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override generator and training seeds")
        p.add_argument("--allow-out-of-range", action="store_true", help="skip tuning-range validation")
        if name == "evaluate":
            p.add_argument("--json", action="store_true", help="print the report as JSON")
        if name == "predict":
            p.add_argument("--input", "-i", required=True, help="CSV of shipments to score")
            p.add_argument("--output", "-o", default=None, help="defaults to output.predictions")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, seed=args.seed, allow_out_of_range=args.allow_out_of_range)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any failure as a runtime error
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
