"""Command-line entry point: ``sfdnet {gen-data,train,eval,ablate}``.

Failures print one line ``error code=<name> exit=<n> detail=<json string>``
to stderr. Outputs are written to temporary files and renamed into place only
once the command has succeeded.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, VersionMismatchError, atomic_write_bytes, load_checkpoint, to_bytes
from .config import ABLATIONS, ConfigError, TrainConfig, config_hash, load_config
from .data import DatasetError, export_dir, load_dir
from .experiment import ablation_verdict, prepare_data, run_ablation, run_training, with_seed
from .trainer import NonFiniteLossError, evaluate

logger = logging.getLogger("sfdnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5


class CliError(Exception):
    def __init__(self, code: str, exit_code: int, detail: str):
        super().__init__(detail)
        self.code, self.exit_code, self.detail = code, exit_code, detail


def _resolve_config(args) -> TrainConfig:
    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        if getattr(args, "seed", None) is not None:
            cfg = with_seed(cfg, args.seed)
        if getattr(args, "ablation", None):
            cfg = dataclasses.replace(cfg, ablation=args.ablation)
        cfg.validate()
    except ConfigError as exc:
        raise CliError("config_invalid", EXIT_CONFIG, str(exc)) from exc
    return cfg


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _confusion_csv(report, class_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, report.confusion):
        w.writerow([name, *row.tolist()])
    return buf.getvalue()


def _predictions_csv(report, sources) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "source", "label", "predicted"])
    for i, (src, y, p) in enumerate(zip(sources, report.labels, report.predictions)):
        w.writerow([i, src, int(y), int(p)])
    return buf.getvalue()


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    train, test = prepare_data(cfg)
    out = Path(args.out)
    export_dir(train, out / "train")
    export_dir(test, out / "test")
    print(json.dumps({"train": len(train), "test": len(test), "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    try:
        train, test = prepare_data(cfg, args.data)
    except DatasetError as exc:
        raise CliError("dataset_missing", EXIT_DATA, str(exc)) from exc
    try:
        res = run_training(cfg, train, test, on_epoch=lambda r: logger.info("epoch %s", json.dumps(r)))
    except NonFiniteLossError as exc:
        raise CliError("nonfinite_loss", EXIT_NONFINITE, str(exc)) from exc
    except DatasetError as exc:
        raise CliError("dataset_missing", EXIT_DATA, str(exc)) from exc
    out = Path(args.out)
    _write_text(out / "metrics.jsonl", res.metrics_jsonl())
    atomic_write_bytes(out / "checkpoint.bin", to_bytes(res.model, epoch=cfg.epochs, extra={"data_hash": res.data_hash}))
    _write_text(out / "confusion.csv", _confusion_csv(res.report, res.class_names))
    _write_text(out / "summary.json", res.summary_json())
    print(json.dumps({"final_accuracy": res.report.accuracy, "config_hash": config_hash(res.model.config)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.bin"
    if not ckpt.is_file():
        raise CliError("checkpoint_missing", EXIT_DATA, f"{ckpt}: no such checkpoint")
    try:
        model, meta = load_checkpoint(ckpt)
    except VersionMismatchError as exc:
        raise CliError("checkpoint_version", EXIT_CHECKPOINT, str(exc)) from exc
    except CheckpointError as exc:
        raise CliError("checkpoint_corrupt", EXIT_CHECKPOINT, str(exc)) from exc
    cfg = model.config
    try:
        if args.data is not None:
            ds = load_dir(args.data, cfg.extractor.input_size)
        else:
            _, ds = prepare_data(cfg)
    except DatasetError as exc:
        raise CliError("dataset_missing", EXIT_DATA, str(exc)) from exc
    if ds.num_classes != model.bank.num_classes:
        raise CliError("dataset_missing", EXIT_DATA,
                       f"dataset has {ds.num_classes} classes, model has {model.bank.num_classes}")
    report = evaluate(model, ds)
    doc = report.to_dict(ds.class_names)
    doc["config_hash"] = config_hash(cfg)
    out = Path(args.out)
    _write_text(out / "eval.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _write_text(out / "confusion.csv", _confusion_csv(report, ds.class_names))
    _write_text(out / "predictions.csv", _predictions_csv(report, ds.sources))
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


ABLATION_FIELDS = ["config", "seed", "status", "accuracy", "macro_accuracy", "data_hash"]


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    seeds = args.seeds if args.seeds else cfg.ablation_seeds
    out = Path(args.out)

    def on_run(row, res):
        logger.info("run %s", json.dumps(row, sort_keys=True))
        if res is not None:
            run_dir = out / f"{row['config']}_seed{row['seed']}"
            _write_text(run_dir / "metrics.jsonl", res.metrics_jsonl())
            _write_text(run_dir / "summary.json", res.summary_json())

    rows = run_ablation(cfg, seeds, on_run=on_run)
    recall_cols = sorted({k for r in rows for k in r if k.startswith("recall_")})
    fields = ABLATION_FIELDS + recall_cols
    means = {}
    agg_rows = []
    for abl in ABLATIONS:
        ok = [r for r in rows if r["config"] == abl and r["status"] == "ok"]
        if not ok:
            continue
        agg = {"config": abl, "seed": "mean", "status": f"{len(ok)}/{len(seeds)} ok", "data_hash": ""}
        for col in ["accuracy", "macro_accuracy", *recall_cols]:
            vals = [r[col] for r in ok if r.get(col) is not None]
            agg[col] = float(np.mean(vals)) if vals else None
        means[abl] = agg["accuracy"]
        agg_rows.append(agg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows + agg_rows:
        w.writerow(r)
    _write_text(out / "ablation.csv", buf.getvalue())
    passed, checks = ablation_verdict(means)
    verdict = {"verdict": "PASS" if passed else "FAIL", "checks": checks, "mean_accuracy": means, "seeds": list(seeds)}
    _write_text(out / "ablation_summary.json", json.dumps(verdict, sort_keys=True, indent=2) + "\n")
    print(f"verdict {verdict['verdict']} " + " ".join(f"{k}={'ok' if v else 'no'}" for k, v in checks.items())
          + " " + " ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfdnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="root seed override")
        if data:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--data", help="dataset root with one subdirectory per class")
            g.add_argument("--synth", action="store_true", help="use the synthetic generator (default)")

    sp = sub.add_parser("gen-data", help="export the synthetic train/test split as PNG directories")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint", help="defaults to OUT/checkpoint.bin")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--data")
    g.add_argument("--synth", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="V1/V2/V3/FULL over a seed list")
    common(sp, data=False)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error code={exc.code} exit={exc.exit_code} detail={json.dumps(exc.detail)}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
