"""Joint training of both paths, balanced epoch sampling, random search, ensembling."""
from __future__ import annotations

import copy
import json
import logging
import math
import queue
import threading
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .aggregation import fuse, total_loss
from .config import RunConfig
from .diffcore import NonFiniteError, ParamStore, Tensor
from .evaluation import UndefinedMetricError, evaluate_model
from .model import GMIC
from .synthdata import SIDES, DatasetManifest, ExamRecord, load_view

log = logging.getLogger(__name__)

SELECTION_CLASS = "malignant"


class NumericFailure(RuntimeError):
    """Raised when the loss or a gradient goes non-finite; carries the dump path."""

    def __init__(self, message: str, dump: Path | None = None):
        super().__init__(message)
        self.dump = dump


# ---------------------------------------------------------------- hyperparameters

@dataclass
class HyperParams:
    lr: float
    lam: float
    beta: float
    t: float          # percent
    K: int
    h_c: int
    w_c: int
    L: int
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        for name in ("lr", "beta", "K", "h_c", "w_c", "L", "epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if not 0 < self.t <= 100:
            raise ValueError(f"t must be in (0, 100], got {self.t}")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "HyperParams":
        return cls(cfg.training.lr, cfg.loss.lam, cfg.loss.beta, cfg.loss.t, cfg.retrieval.K,
                   cfg.retrieval.h_c, cfg.retrieval.w_c, cfg.mil.L, cfg.training.epochs,
                   cfg.training.batch_size, cfg.training.seed)

    def apply(self, cfg: RunConfig) -> RunConfig:
        out = copy.deepcopy(cfg)
        out.training.lr, out.loss.lam, out.loss.beta, out.loss.t = self.lr, self.lam, self.beta, self.t
        out.retrieval.K, out.retrieval.h_c, out.retrieval.w_c = self.K, self.h_c, self.w_c
        out.mil.L = self.L
        out.training.epochs, out.training.batch_size, out.training.seed = self.epochs, self.batch_size, self.seed
        return out


def sample_hyperparams(search_seed: int, cfg: RunConfig | None = None) -> HyperParams:
    """Log-uniform draw of lr, lam, beta and t; everything else from ``cfg``."""
    cfg = cfg or RunConfig()
    sc = cfg.search
    rng = np.random.default_rng([search_seed, 0x5EA2C4])
    lr = 10.0 ** rng.uniform(*sc.lr_log10)
    lam = 10.0 ** rng.uniform(*sc.lam_log10)
    beta = math.exp(rng.uniform(*sc.beta_ln))
    t = math.exp(rng.uniform(*sc.t_ln))
    if sc.t_interpretation == "fraction":
        t *= 100.0
    base = HyperParams.from_config(cfg)
    return HyperParams(lr, lam, beta, t, base.K, base.h_c, base.w_c, base.L, base.epochs,
                       base.batch_size, int(search_seed))


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class BreastExample:
    exam_id: str
    side: str
    record: ExamRecord = field(compare=False, repr=False)


def epoch_sampler(manifest: DatasetManifest, epoch_seed, split: str = "train") -> list[BreastExample]:
    """All positive exams plus as many randomly drawn negatives, expanded to
    breasts and shuffled."""
    recs = manifest.split(split)
    if not recs:
        raise ValueError(f"split {split!r} is empty")
    pos = [r for r in recs if r.positive]
    neg = [r for r in recs if not r.positive]
    rng = np.random.default_rng(epoch_seed)
    if len(neg) < len(pos):
        warnings.warn(f"only {len(neg)} negative exams for {len(pos)} positives; using all of them")
        chosen = neg
    else:
        chosen = [neg[i] for i in np.sort(rng.choice(len(neg), size=len(pos), replace=False))]
    examples = [BreastExample(r.exam_id, side, r) for r in pos + chosen for side in SIDES]
    return [examples[i] for i in rng.permutation(len(examples))]


def load_breast(manifest: DatasetManifest, ex: BreastExample) -> tuple[np.ndarray, np.ndarray]:
    """Both views of one breast [2,1,H,W] with the breast label on each."""
    imgs = np.concatenate([load_view(manifest, ex.record, f"{ex.side}-{v}") for v in ("CC", "MLO")])
    lab = np.asarray(ex.record.labels[ex.side], dtype=np.float32)
    return imgs, np.stack([lab, lab])


def iter_batches(manifest: DatasetManifest, examples: list[BreastExample], batch_size: int):
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        parts = [load_breast(manifest, ex) for ex in chunk]
        yield (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
               [f"{ex.exam_id}_{ex.side}" for ex in chunk])


def prefetch(it, depth: int):
    """Run iterator ``it`` in a background thread with a bounded queue."""
    if depth <= 0:
        yield from it
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in it:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as e:  # surfaced in the consumer
            q.put(e)
        q.put(done)

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.05)


# ---------------------------------------------------------------- steps

def build_model(cfg: RunConfig) -> GMIC:
    return GMIC(cfg.model, cfg.retrieval, cfg.mil, cfg.loss.pooling_config())


def compute_loss(model: GMIC, store: ParamStore, images: np.ndarray, labels: np.ndarray, cfg: RunConfig,
                 training: bool = True) -> Tensor:
    loc, out, _ = model.forward(store, images, training=training)
    return total_loss(labels, loc.y_loc, out.y_mil, loc.saliency, cfg.loss.loss_config())


def train_step(model: GMIC, store: ParamStore, images: np.ndarray, labels: np.ndarray,
               cfg: RunConfig) -> float:
    """Forward, composite loss, backward, one Adam step on every parameter."""
    with dc.Tape() as tape:
        loss = compute_loss(model, store, images, labels, cfg)
    params = store.tensors()
    grads = tape.backward(loss, wrt=params)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"loss is {value}")
    for t in params:
        if not np.all(np.isfinite(grads[t])):
            raise NonFiniteError(f"non-finite gradient for {t.name}")
    dc.adam_step(store, store.grads_by_name(grads), cfg.training.lr)
    return value


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    store: ParamStore
    epoch: int = 0                      # epochs completed
    step: int = 0
    best_store: ParamStore | None = None
    best_metric: float | None = None
    best_epoch: int = -1
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    def sidecar(self) -> dict:
        # every random draw is derived from (seed, epoch), so this is the full RNG state
        return {"epoch": self.epoch, "step": self.step, "best_metric": self.best_metric,
                "best_epoch": self.best_epoch, "rng": {"seed": self.seed, "next_epoch": self.epoch},
                "history": self.history}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dc.save_checkpoint(out / "last.ckpt", self.store, include_adam=True)
        if self.best_store is not None:
            dc.save_checkpoint(out / "best.ckpt", self.best_store, include_adam=False)
        (out / "state.json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, out_dir, model: GMIC) -> "TrainState":
        out = Path(out_dir)
        side = json.loads((out / "state.json").read_text())
        store = dc.load_checkpoint(out / "last.ckpt", model.init_params(0))
        best = dc.load_checkpoint(out / "best.ckpt", model.init_params(0)) if (out / "best.ckpt").exists() else None
        return cls(store, side["epoch"], side["step"], best, side["best_metric"], side["best_epoch"],
                   side["rng"]["seed"], side["history"])


def load_store(path, model: GMIC) -> ParamStore:
    return dc.load_checkpoint(path, model.init_params(0))


def _dump_failure(out_dir: Path, store: ParamStore, info: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    dc.save_checkpoint(out_dir / "failure.ckpt", store)
    path = out_dir / "failure.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True))
    return path


def _selection_metric(result) -> float | None:
    try:
        return result.auc("gmic", SELECTION_CLASS)
    except UndefinedMetricError:
        return None


def train_model(cfg: RunConfig, manifest: DatasetManifest, out_dir=None,
                state: TrainState | None = None) -> TrainState:
    """Train for ``cfg.training.epochs`` epochs, validating after each one and
    keeping the snapshot with the best validation malignant AUC."""
    tc = cfg.training
    if tc.num_threads > 0:
        dc.kernels.set_num_threads(tc.num_threads)
    model = build_model(cfg)
    if state is None:
        state = TrainState(model.init_params(tc.seed), seed=tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    for epoch in range(state.epoch, tc.epochs):
        t0 = time.time()
        examples = epoch_sampler(manifest, [tc.seed, epoch])
        if tc.max_steps_per_epoch > 0:
            examples = examples[:tc.max_steps_per_epoch * tc.batch_size]
        losses = []
        for images, labels, ids in prefetch(iter_batches(manifest, examples, tc.batch_size), tc.prefetch):
            try:
                losses.append(train_step(model, state.store, images, labels, cfg))
            except NonFiniteError as e:
                info = {"error": str(e), "epoch": epoch, "step": state.step, "batch": ids}
                dump = _dump_failure(out, state.store, info) if out is not None else None
                raise NumericFailure(f"numeric failure at epoch {epoch} step {state.step}: {e}", dump) from e
            state.step += 1
        record = {"epoch": epoch, "steps": len(losses), "loss": float(np.mean(losses)) if losses else None}
        if tc.eval_every_epoch and manifest.split("validation"):
            res = evaluate_model(model, state.store, manifest, "validation", ("gmic", "loc", "mil"),
                                 localization=False, limit=tc.val_limit or None)
            record["validation_auc"] = res.metrics()["auc"]
            metric = _selection_metric(res)
        else:
            metric = None
        record["selection_metric"] = metric
        improved = state.best_store is None or (
            metric is not None and (state.best_metric is None or metric > state.best_metric))
        if improved:
            state.best_store, state.best_metric, state.best_epoch = state.store.copy(), metric, epoch
        state.epoch = epoch + 1
        record["wall_time"] = time.time() - t0
        state.history.append(record)
        log.info("epoch %d: loss %s, val %s AUC %s (%.0fs)", epoch, record["loss"], SELECTION_CLASS, metric,
                 record["wall_time"])
        if out is not None:
            with open(out / "train_log.jsonl", "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            state.save(out)
    return state


# ---------------------------------------------------------------- ensembles and search

def ensemble_predict(model: GMIC, stores: list[ParamStore], images: np.ndarray) -> np.ndarray:
    """Mean over models of the fused prediction, [N, C]."""
    if not stores:
        raise ValueError("ensemble needs at least one model")
    preds = []
    for s in stores:
        p = model.predict(s, images)
        preds.append(fuse(p.y_loc, p.y_mil))
    return np.mean(preds, axis=0)


def _search_job(args) -> dict:
    index, cfg_dict, manifest_path, out_dir = args
    from .config import from_dict
    cfg = from_dict(RunConfig, cfg_dict)
    hp = sample_hyperparams(cfg.search.seed * 100003 + index, cfg)
    run_cfg = hp.apply(cfg)
    out = Path(out_dir) / f"model_{index:03d}"
    state = train_model(run_cfg, DatasetManifest.load(manifest_path), out)
    return {"index": index, "hyperparams": asdict(hp), "best_validation_auc": state.best_metric,
            "best_epoch": state.best_epoch, "checkpoint": str(out / "best.ckpt")}


def run_search(cfg: RunConfig, manifest_path, out_dir, n_models: int | None = None) -> dict:
    """Train ``n_models`` independently sampled models; rank by validation AUC."""
    n = n_models or cfg.search.n_models
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, asdict(cfg), str(manifest_path), str(out)) for i in range(n)]
    if cfg.search.workers > 1:
        with ProcessPoolExecutor(cfg.search.workers) as pool:
            rows = list(pool.map(_search_job, jobs))
    else:
        rows = [_search_job(j) for j in jobs]
    ranked = sorted(rows, key=lambda r: (-(r["best_validation_auc"] if r["best_validation_auc"] is not None
                                           else -1.0), r["index"]))
    summary = {"models": rows, "top_k": [r["checkpoint"] for r in ranked[:cfg.search.top_k]]}
    (out / "search_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
