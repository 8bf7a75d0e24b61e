"""Breast-level AUC, continuous localization scores and the ablation harness."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import fuse
from .diffcore import ParamStore, Tensor
from .model import GMIC
from .synthdata import SIDES, VIEWS, DatasetManifest, iterate_split

VARIANTS = ("gmic", "loc", "mil", "noattn", "random", "loc-random")

# prediction kinds each variant needs
_NEEDS = {
    "gmic": ("loc", "mil"),
    "loc": ("loc",),
    "mil": ("loc", "mil"),
    "noattn": ("loc", "noattn"),
    "random": ("random",),
    "loc-random": ("loc", "random"),
}


class UndefinedMetricError(ValueError):
    pass


@dataclass
class BreastPrediction:
    breast_id: str
    y_loc: np.ndarray
    y_mil: np.ndarray
    y: np.ndarray
    label: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)  # noattn / random scores


@dataclass
class LocalizationScore:
    precision: float
    recall: float
    f1: float


# ---------------------------------------------------------------- primitives

def breast_level(pred_cc, pred_mlo):
    return 0.5 * (np.asarray(pred_cc, dtype=np.float64) + np.asarray(pred_mlo, dtype=np.float64))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic with tied pairs counted one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    # midranks: every count below is an integer or half-integer, so exact
    order = np.argsort(s, kind="stable")
    ss = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and ss[j + 1] == ss[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def continuous_prf(A, mask) -> LocalizationScore:
    a = np.asarray(A, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape != m.shape:
        raise ValueError(f"map {a.shape} vs mask {m.shape}")
    n_mask = int(m.sum())
    if n_mask == 0:
        raise ValueError("empty mask")
    inside = float(a[m].sum())
    total = float(a.sum())
    p = inside / total if total > 0 else 0.0
    r = inside / n_mask
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return LocalizationScore(p, r, f1)


def upsample_nearest(A, target_hw) -> np.ndarray:
    a = np.asarray(A)
    h, w = a.shape[-2:]
    H, W = target_hw
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return a[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- inference

def _kinds(variants) -> set[str]:
    out: set[str] = set()
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        out.update(_NEEDS[v])
    return out


def predict_views(model: GMIC, store: ParamStore, images: np.ndarray, kinds,
                  rng: np.random.Generator | None = None, random_rois=None) -> dict[str, np.ndarray]:
    """Inference on a batch [N,1,H,W]; returns the requested prediction kinds
    plus the saliency maps."""
    loc = model.localize(store, Tensor(images), training=False)
    out = {"saliency": loc.saliency.data, "loc": loc.y_loc.data}
    if "mil" in kinds or "noattn" in kinds:
        rois = model.retrieve(images, loc.saliency.data)
        emb = model.embed(store, rois, training=False)
        if "mil" in kinds:
            m = model.mil(store, emb)
            out["mil"], out["alpha"], out["rois"] = m.y_mil.data, m.alpha.data, rois
        if "noattn" in kinds:
            out["noattn"] = model.mil(store, emb, uniform=True).y_mil.data
    if "random" in kinds:
        if random_rois is None:
            if rng is None:
                raise ValueError("random variant needs an rng")
            random_rois = model.random_patches(images, rng)
        rois = random_rois
        out["random"] = model.mil(store, model.embed(store, rois, training=False)).y_mil.data
    return out


def ensemble_views(model: GMIC, stores: list[ParamStore], images: np.ndarray, kinds,
                   rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Average of per-model outputs (saliency included)."""
    if not stores:
        raise ValueError("empty ensemble")
    # every member sees the same random patches
    shared = model.random_patches(images, rng) if "random" in kinds and rng is not None else None
    outs = [predict_views(model, store, images, kinds, random_rois=shared) for store in stores]
    keys = [k for k in outs[0] if k not in ("rois", "alpha")]
    res = {k: np.mean([o[k] for o in outs], axis=0) for k in keys}
    if len(outs) == 1:
        res.update({k: outs[0][k] for k in ("rois", "alpha") if k in outs[0]})
    return res


def variant_score(variant: str, p: dict[str, np.ndarray]) -> np.ndarray:
    if variant == "gmic":
        return fuse(p["loc"], p["mil"])
    if variant == "loc-random":
        return fuse(p["loc"], p["random"])
    return p[variant]


@dataclass
class EvalResult:
    split: str
    variants: tuple[str, ...]
    class_names: list[str]
    breasts: list[BreastPrediction]
    scores: dict[str, np.ndarray]            # variant -> [B, C]
    labels: np.ndarray                       # [B, C]
    localization: dict[str, list[LocalizationScore]]
    uniform_recall: dict[str, list[float]]

    def auc(self, variant: str, cls: int | str) -> float:
        c = self.class_names.index(cls) if isinstance(cls, str) else cls
        return roc_auc(self.scores[variant][:, c], self.labels[:, c])

    def metrics(self) -> dict:
        aucs = {}
        for v in self.variants:
            aucs[v] = {}
            for c, name in enumerate(self.class_names):
                try:
                    aucs[v][name] = self.auc(v, c)
                except UndefinedMetricError:
                    aucs[v][name] = None
        loc = {}
        for name in self.class_names:
            sc = self.localization.get(name, [])
            ur = self.uniform_recall.get(name, [])
            loc[name] = {
                "count": len(sc),
                "precision": float(np.mean([s.precision for s in sc])) if sc else None,
                "recall": float(np.mean([s.recall for s in sc])) if sc else None,
                # mean of per-image F1, not F1 of the mean P and R
                "f1": float(np.mean([s.f1 for s in sc])) if sc else None,
                "uniform_recall": float(np.mean(ur)) if ur else None,
            }
        return {"split": self.split, "n_breasts": len(self.breasts), "auc": aucs, "localization": loc}


def evaluate_model(model: GMIC, stores, manifest: DatasetManifest, split: str,
                   variants=("gmic",), seed: int = 0, localization: bool = True,
                   limit: int | None = None) -> EvalResult:
    """Run ``variants`` on every exam of ``split``. ``stores`` is one
    ParamStore or a list (ensemble)."""
    if isinstance(stores, ParamStore):
        stores = [stores]
    variants = tuple(variants)
    kinds = _kinds(variants) | {"loc", "mil"}
    rng = np.random.default_rng([seed, 7]) if "random" in kinds else None
    names = list(model.model_cfg.class_names)
    breasts: list[BreastPrediction] = []
    per_variant: dict[str, list[np.ndarray]] = {v: [] for v in variants}
    labels = []
    loc_scores: dict[str, list[LocalizationScore]] = {n: [] for n in names}
    uniform: dict[str, list[float]] = {n: [] for n in names}
    for i, (rec, images, masks) in enumerate(iterate_split(manifest, split, with_masks=localization)):
        if limit is not None and i >= limit:
            break
        batch = np.concatenate([images[v] for v in VIEWS])
        p = ensemble_views(model, stores, batch, kinds, rng)
        if localization:
            H, W = batch.shape[-2:]
            for vi, view in enumerate(VIEWS):
                for c, name in enumerate(names):
                    mk = masks[view].get(name)
                    if mk is None or not mk.any():
                        continue
                    up = upsample_nearest(p["saliency"][vi, c], (H, W))
                    loc_scores[name].append(continuous_prf(up, mk))
                    # a constant map with the same total mass has recall = its mean
                    uniform[name].append(float(up.mean()))
        for side in SIDES:
            vi = [VIEWS.index(f"{side}-CC"), VIEWS.index(f"{side}-MLO")]
            bl = {k: breast_level(p[k][vi[0]], p[k][vi[1]]) for k in kinds}
            for v in variants:
                per_variant[v].append(variant_score(v, bl))
            lab = np.asarray(rec.labels[side])
            labels.append(lab)
            breasts.append(BreastPrediction(f"{rec.exam_id}_{side}", bl["loc"], bl["mil"],
                                            fuse(bl["loc"], bl["mil"]), lab,
                                            {k: bl[k] for k in ("noattn", "random") if k in bl}))
    return EvalResult(split, variants, names, breasts,
                      {v: np.array(s).reshape(-1, len(names)) for v, s in per_variant.items()},
                      np.array(labels).reshape(-1, len(names)), loc_scores, uniform)


# ---------------------------------------------------------------- reports

def write_metrics(path, result: EvalResult, extra: dict | None = None) -> dict:
    doc = result.metrics()
    if extra:
        doc.update(extra)
    doc["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def write_predictions(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["breastId", "class", "y_loc", "y_mil", "y", "label"])
        for b in result.breasts:
            for c, name in enumerate(result.class_names):
                w.writerow([b.breast_id, name, repr(float(b.y_loc[c])), repr(float(b.y_mil[c])),
                            repr(float(b.y[c])), int(b.label[c])])


def strip_timestamp(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k != "timestamp"}
