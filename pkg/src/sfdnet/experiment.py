"""End-to-end runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ABLATIONS, TrainConfig, config_hash, config_to_dict
from .data import Dataset, load_dir, split_per_class, synth_generate
from .trainer import EvalReport, Model, build_model, evaluate, fit, prepare_train_set, subseed

__all__ = ["RunResult", "with_seed", "prepare_data", "run_training", "run_ablation", "ablation_verdict"]


@dataclass
class RunResult:
    model: Model
    records: list
    report: EvalReport
    data_hash: str
    class_names: list = field(default_factory=list)

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def summary(self) -> dict:
        cfg = self.model.config
        rep = self.report.to_dict(self.class_names)
        return {
            "final_accuracy": rep["accuracy"],
            "macro_accuracy": rep["macro_accuracy"],
            "per_class": rep["per_class"],
            "config_hash": config_hash(cfg),
            "config": config_to_dict(cfg),
            "seed": cfg.seed,
            "ablation": cfg.ablation,
            "data_hash": self.data_hash,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    """One root seed for model, training and synthetic data."""
    synth = dataclasses.replace(cfg.data.synth, seed=seed)
    return dataclasses.replace(cfg, seed=seed, data=dataclasses.replace(cfg.data, synth=synth))


def prepare_data(cfg: TrainConfig, data_path: Optional[str] = None):
    """Train/test split from a class directory tree, or from the synthetic generator."""
    if data_path is not None:
        full = load_dir(data_path, cfg.extractor.input_size)
    else:
        full = synth_generate(cfg.data.synth)
    train, test = split_per_class(full, cfg.data.train_per_class, subseed(cfg.seed, 6))
    return train, test


def data_hash(train: Dataset, test: Dataset) -> str:
    return f"{train.content_hash()}-{test.content_hash()}"


def run_training(cfg: TrainConfig, train: Dataset, test: Dataset, on_epoch=None) -> RunResult:
    model = build_model(cfg, train.num_classes)
    records = fit(model, prepare_train_set(train, model.config), test, on_epoch=on_epoch)
    report = evaluate(model, test)
    return RunResult(model, records, report, data_hash(train, test), list(test.class_names))


def ablation_verdict(mean_acc: dict) -> tuple:
    """Expected ordering: every mechanism beats the plain model."""
    checks = {
        "FULL>V1": mean_acc.get("FULL", np.nan) > mean_acc.get("V1", np.nan),
        "V2>V1": mean_acc.get("V2", np.nan) > mean_acc.get("V1", np.nan),
        "V3>V1": mean_acc.get("V3", np.nan) > mean_acc.get("V1", np.nan),
    }
    return all(checks.values()), checks


def run_ablation(cfg: TrainConfig, seeds, ablations=ABLATIONS, on_run=None) -> list:
    """Train every ablation on every seed; configs sharing a seed share the data.

    Returns one row dict per run. A failing run is recorded with its error and
    the sweep continues.
    """
    from .trainer import NonFiniteLossError

    rows = []
    for seed in seeds:
        seeded = with_seed(cfg, seed)
        train, test = prepare_data(seeded)
        for abl in ablations:
            run_cfg = dataclasses.replace(seeded, ablation=abl)
            row = {"config": abl, "seed": seed, "data_hash": data_hash(train, test)}
            try:
                res = run_training(run_cfg, train, test)
            except NonFiniteLossError as exc:
                row.update(status="nonfinite_loss", error=str(exc))
                result = None
            else:
                row.update(status="ok", accuracy=res.report.micro_accuracy, macro_accuracy=res.report.macro_accuracy)
                for name, r in zip(test.class_names, res.report.per_class_recall):
                    row[f"recall_{name}"] = r
                result = res
            rows.append(row)
            if on_run is not None:
                on_run(row, result)
    return rows

