"""End-to-end synthetic benchmark: generate, train one desk-scale model, evaluate."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict
from pathlib import Path

from .config import RunConfig, desk_config
from .evaluation import VARIANTS, evaluate_model, write_metrics, write_predictions
from .synthdata import DatasetManifest, generate_dataset
from .training import build_model, load_store, train_model

log = logging.getLogger(__name__)

RESULT_FILE = "e2e_result.json"


def ensure_dataset(cfg: RunConfig, data_dir, workers: int = 1) -> tuple[DatasetManifest, float]:
    data_dir = Path(data_dir)
    if (data_dir / "manifest.json").exists():
        m = DatasetManifest.load(data_dir)
        if m.synth_spec == asdict(cfg.data):
            return m, 0.0
        log.warning("dataset at %s was generated with a different spec; regenerating", data_dir)
    t0 = time.time()
    m = generate_dataset(cfg.data, data_dir, workers)
    return m, time.time() - t0


def run_e2e(out_dir, data_dir, cfg: RunConfig | None = None, workers: int = 1) -> dict:
    """Train and evaluate one model; write and return the result summary."""
    cfg = cfg or desk_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved.json")
    manifest, gen_s = ensure_dataset(cfg, data_dir, workers)

    t0 = time.time()
    state = train_model(cfg, manifest, out / "train")
    train_s = time.time() - t0

    t0 = time.time()
    model = build_model(cfg)
    store = load_store(out / "train" / "best.ckpt", model)
    res = evaluate_model(model, store, manifest, "test", VARIANTS, seed=cfg.training.seed)
    eval_s = time.time() - t0
    metrics = write_metrics(out / "metrics.json", res)
    write_predictions(out / "predictions.csv", res)

    auc = metrics["auc"]
    loc = metrics["localization"]["malignant"]
    summary = {
        "malignant_auc": {v: auc[v]["malignant"] for v in VARIANTS},
        "benign_auc": {v: auc[v]["benign"] for v in VARIANTS},
        "malignant_recall": loc["recall"],
        "malignant_uniform_recall": loc["uniform_recall"],
        "malignant_localization": loc,
        "best_epoch": state.best_epoch,
        "best_validation_auc": state.best_metric,
        "seconds": {"generate": gen_s, "train": train_s, "evaluate": eval_s, "train_and_evaluate": train_s + eval_s},
        "cpu_cores": os.cpu_count(),
        "n_test_breasts": metrics["n_breasts"],
        "checkpoint": str(out / "train" / "best.ckpt"),
    }
    (out / RESULT_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def load_result(out_dir) -> dict | None:
    p = Path(out_dir) / RESULT_FILE
    return json.loads(p.read_text()) if p.exists() else None
