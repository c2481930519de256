"""Run orchestration: data -> fit -> protocol -> artifact files.

A run directory is laid out as

    provenance.json          config echo, seed, code version, wall time
    trainlog.jsonl           one epoch per line
    checkpoint.bmck          best-validation parameters
    metrics/                 byte-deterministic for a fixed config+seed
        report_<modality>.json
        metrics.csv          per-class table across all modalities
        summary.csv          one row per regime: Acc/R/Pr per modality
        pr_<modality>.csv    PR-curve data points
        confusion_<modality>.csv
    plots/                   rendered images (exempt from byte identity)
"""

import dataclasses
import json
import os
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .backbones import JointModel
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import generate, load_manifest, load_mapping
from .errors import InvalidInputError
from .evaluation import (
    MODALITIES,
    run_protocol,
    write_confusion_csv,
    write_metrics_csv,
    write_pr_csv,
    write_report_json,
)
from .trainer import TrainLog, fit

SUMMARY_COLUMNS = tuple(
    f"{modality}_{metric}"
    for modality in MODALITIES
    for metric in ("accuracy", "recall", "precision")
)


def load_dataset(cfg: ExperimentConfig):
    if cfg.dataset_spec is not None:
        return generate(cfg.dataset_spec)
    return load_manifest(cfg.manifest, label_names=cfg.manifest_label_names)


def _check_dataset_fits(cfg, dataset):
    n = len(dataset.label_names)
    if n != cfg.image_branch.n_classes:
        raise InvalidInputError(
            f"dataset has {n} classes but branches declare {cfg.image_branch.n_classes}"
        )
    if dataset.val is None:
        raise InvalidInputError("dataset has no val split; training needs one")


def build_model(cfg: ExperimentConfig, seed) -> JointModel:
    return JointModel(
        cfg.image_branch, cfg.text_branch, seed=seed, gate_mode=cfg.training.gate_mode
    )


def _summary_values(reports):
    values = []
    for modality in MODALITIES:
        report = reports[modality]
        values += [report.accuracy, report.macro_recall, report.macro_precision]
    return values


def write_summary_csv(rows, path):
    """rows: list of (regime, [9 formatted cells])."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("regime," + ",".join(SUMMARY_COLUMNS) + "\n")
        for regime, cells in rows:
            fh.write(regime + "," + ",".join(cells) + "\n")
    return path


def _write_run_metrics(reports, metrics_dir):
    os.makedirs(metrics_dir, exist_ok=True)
    for modality, report in reports.items():
        write_report_json(report, os.path.join(metrics_dir, f"report_{modality}.json"))
        write_pr_csv(report, os.path.join(metrics_dir, f"pr_{modality}.csv"))
        write_confusion_csv(report, os.path.join(metrics_dir, f"confusion_{modality}.csv"))
    write_metrics_csv(reports, os.path.join(metrics_dir, "metrics.csv"))


def _write_plots(reports, plots_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(plots_dir, exist_ok=True)
    label_names = reports["fusion"].label_names
    for class_index, name in enumerate(label_names):
        fig, ax = plt.subplots(figsize=(4, 3))
        drew = False
        for modality in MODALITIES:
            by_class = {c.class_id: c for c in reports[modality].pr_curves}
            if class_index not in by_class:
                continue
            curve = by_class[class_index]
            ax.plot(curve.recall, curve.precision, label=modality)
            drew = True
        if not drew:
            plt.close(fig)
            continue
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(name)
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(os.path.join(plots_dir, f"pr_class_{class_index:02d}.png"), dpi=100)
        plt.close(fig)
    for modality, report in reports.items():
        fig, ax = plt.subplots(figsize=(4, 3.5))
        cm = np.asarray(report.confusion)
        ax.imshow(cm, cmap="Blues")
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(f"{modality} confusion")
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=6)
        fig.tight_layout()
        fig.savefig(os.path.join(plots_dir, f"confusion_{modality}.png"), dpi=100)
        plt.close(fig)


def _write_provenance(out_dir, cfg, seed, wall_seconds, extra=None):
    record = {
        "config": cfg.to_dict(),
        "seed": seed,
        "code_version": __version__,
        "wall_seconds": wall_seconds,
    }
    record.update(extra or {})
    path = os.path.join(out_dir, "provenance.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


@dataclasses.dataclass
class RunResult:
    out_dir: str
    reports: dict
    log: TrainLog


def _fit_and_evaluate(cfg, dataset, mapping, seed, regime, quiet):
    train_cfg = replace(cfg.training, seed=seed, regime=regime)
    model = JointModel(
        cfg.image_branch, cfg.text_branch, seed=seed, gate_mode=train_cfg.gate_mode
    )
    model, log = fit(model, dataset.train, dataset.val, train_cfg)
    reports = run_protocol(
        model,
        dataset.test,
        dataset.label_names,
        mapping=mapping,
        attention_enabled=train_cfg.attention_enabled,
    )
    if not quiet:
        accs = " ".join(f"{m}={reports[m].accuracy:.4f}" for m in MODALITIES)
        print(
            f"[{regime} seed={seed}] stopped epoch {log.stopped_epoch} "
            f"best val fusion {log.best_val_fusion:.4f} | test {accs}"
        )
    return model, log, reports


def run_experiment(cfg: ExperimentConfig, out_dir, seed=None, regime=None, quiet=False):
    """Single training run plus full artifact set. Returns RunResult."""
    started = time.monotonic()
    seed = cfg.training.seed if seed is None else seed
    regime = cfg.training.regime if regime is None else regime
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    _check_dataset_fits(cfg, dataset)
    mapping = load_mapping(cfg.mapping_path) if cfg.eval_mode == "inter" else None
    model, log, reports = _fit_and_evaluate(cfg, dataset, mapping, seed, regime, quiet)
    log.write_jsonl(os.path.join(out_dir, "trainlog.jsonl"))
    save_checkpoint(
        model,
        os.path.join(out_dir, "checkpoint.bmck"),
        extra={"regime": regime, "seed": seed},
    )
    metrics_dir = os.path.join(out_dir, "metrics")
    _write_run_metrics(reports, metrics_dir)
    cells = [f"{v:.6f}" for v in _summary_values(reports)]
    write_summary_csv([(regime, cells)], os.path.join(metrics_dir, "summary.csv"))
    _write_plots(reports, os.path.join(out_dir, "plots"))
    _write_provenance(
        out_dir,
        cfg,
        seed,
        time.monotonic() - started,
        {
            "regime": regime,
            "stopped_epoch": log.stopped_epoch,
            "best_epoch": log.best_epoch,
            "best_val_fusion": log.best_val_fusion,
        },
    )
    return RunResult(out_dir=out_dir, reports=reports, log=log)


@dataclasses.dataclass
class CompareResult:
    out_dir: str
    regimes: tuple
    seeds: tuple
    raw: dict  # regime -> column -> list of per-seed values


def run_compare(cfg: ExperimentConfig, out_dir, regimes=None, seeds=None, quiet=False):
    """Train every regime over the seed list; emit the comparison table."""
    started = time.monotonic()
    regimes = tuple(regimes) if regimes else cfg.compare_regimes
    seeds = tuple(seeds) if seeds else cfg.compare_seeds
    if len(regimes) < 2:
        raise InvalidInputError("compare needs at least 2 regimes")
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    _check_dataset_fits(cfg, dataset)
    mapping = load_mapping(cfg.mapping_path) if cfg.eval_mode == "inter" else None
    raw = {}
    for regime in regimes:
        columns = {name: [] for name in SUMMARY_COLUMNS}
        for seed in seeds:
            _, _, reports = _fit_and_evaluate(cfg, dataset, mapping, seed, regime, quiet)
            for name, value in zip(SUMMARY_COLUMNS, _summary_values(reports)):
                columns[name].append(value)
        raw[regime] = columns
    rows = []
    for regime in regimes:
        cells = []
        for name in SUMMARY_COLUMNS:
            values = np.asarray(raw[regime][name], dtype=np.float64)
            cells.append(f"{values.mean():.6f} ± {values.std():.6f}")
        rows.append((regime, cells))
    write_summary_csv(rows, os.path.join(out_dir, "compare.csv"))
    with open(os.path.join(out_dir, "compare_raw.json"), "w", encoding="utf-8") as fh:
        json.dump({"seeds": list(seeds), "metrics": raw}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_provenance(
        out_dir,
        cfg,
        list(seeds),
        time.monotonic() - started,
        {"regimes": list(regimes)},
    )
    return CompareResult(out_dir=out_dir, regimes=regimes, seeds=seeds, raw=raw)
