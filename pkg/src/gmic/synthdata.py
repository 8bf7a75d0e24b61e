"""Synthetic four-view screening exams with planted lesions, plus dataset I/O.

Each breast gets a smooth tissue background inside a breast-shaped region.
Benign findings are smooth bright ellipses; malignant findings are
spiculated (star-perturbed) masses with a sharper, brighter rim. A breast's
lesion appears in both of its views at view-consistent positions, and exact
binary masks are written alongside.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import fourier_gaussian, gaussian_filter

log = logging.getLogger(__name__)

VIEWS = ("L-CC", "L-MLO", "R-CC", "R-MLO")
SIDES = ("L", "R")
CLASS_NAMES = ("benign", "malignant")
SPLITS = ("train", "validation", "test")
SCHEMA_VERSION = 1


class DataLoadError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    height: int = 736
    width: int = 480
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    benign_prevalence: float = 0.05
    malignant_prevalence: float = 0.06
    lesion_area_frac: list[float] = field(default_factory=lambda: [0.01, 0.03])
    benign_contrast: list[float] = field(default_factory=lambda: [0.10, 0.20])
    malignant_contrast: list[float] = field(default_factory=lambda: [0.16, 0.28])
    texture_scale: float = 6.0
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("benign_prevalence", "malignant_prevalence"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.lesion_area_frac
        if not 0 < lo <= hi < 0.2:
            raise ValueError(f"lesion_area_frac {self.lesion_area_frac} out of range")
        if self.height < 64 or self.width < 64:
            raise ValueError("image dims must be at least 64")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def n_exams(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass
class ExamRecord:
    exam_id: str
    split: str
    labels: dict[str, list[int]]                 # side -> [benign, malignant]
    images: dict[str, str]                       # view -> relative path
    masks: dict[str, dict[str, str]] = field(default_factory=dict)  # view -> class -> path

    def breast_label(self, side: str) -> np.ndarray:
        return np.array(self.labels[side], dtype=np.int64)

    @property
    def positive(self) -> bool:
        return any(any(v) for v in self.labels.values())


@dataclass
class DatasetManifest:
    image_height: int
    image_width: int
    records: list[ExamRecord]
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    schema_version: int = SCHEMA_VERSION
    synth_spec: dict | None = None
    root: Path | None = field(default=None, repr=False, compare=False)

    def split(self, name: str) -> list[ExamRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "image_height": self.image_height,
                "image_width": self.image_width, "class_names": list(self.class_names),
                "views": list(VIEWS), "synth_spec": self.synth_spec,
                "records": [asdict(r) for r in self.records]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataLoadError(f"cannot read manifest {path}: {e}") from e
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise DataLoadError(f"{path}: unsupported schema version {raw.get('schema_version')}")
        records = [ExamRecord(**r) for r in raw["records"]]
        ids = [r.exam_id for r in records]
        if len(set(ids)) != len(ids):
            raise DataLoadError(f"{path}: duplicate exam ids")
        for r in records:
            if r.split not in SPLITS:
                raise DataLoadError(f"{path}: exam {r.exam_id} has unknown split {r.split!r}")
        return cls(raw["image_height"], raw["image_width"], records, raw["class_names"],
                   raw["schema_version"], raw.get("synth_spec"), path.parent)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


# ------------------------------------------------------------------ rendering

@dataclass
class Lesion:
    kind: str          # "benign" | "malignant"
    u: float           # depth from chest wall, fraction of breast extent
    v: float           # lateral position in [-1, 1]
    area: float        # pixels
    contrast: float
    angle: float
    elong: float       # benign: axis ratio; malignant: spike amplitude
    n_spikes: int
    phases: np.ndarray


def _breast_geometry(view: str, H: int, W: int):
    """(center row, semi-axis along rows, semi-axis along cols) of the breast
    half-ellipse; the chest wall is the left image edge."""
    if view.endswith("CC"):
        return 0.5 * H, 0.42 * H, 0.80 * W
    return 0.46 * H, 0.47 * H, 0.86 * W


def _lesion_center(les: Lesion, view: str, H: int, W: int, radius: float):
    cy, b, a = _breast_geometry(view, H, W)
    v = les.v if view.endswith("CC") else 0.8 * les.v + 0.1
    x = les.u * a
    y = cy + v * b * math.sqrt(max(0.0, 1 - les.u ** 2)) * 0.8
    m = radius + 4
    return float(np.clip(y, m, H - 1 - m)), float(np.clip(x, m, W - 1 - m))


def _star_radius(theta, les: Lesion):
    spikes = np.zeros_like(theta)
    for ph in les.phases:
        spikes = np.maximum(spikes, np.cos(theta - ph) ** 40 * (np.cos(theta - ph) > 0))
    return 1.0 + les.elong * spikes


def lesion_base_radius(les: Lesion) -> float:
    """Radius scale giving the lesion its target area (analytic for ellipses,
    quadrature for the star outline)."""
    if les.kind == "benign":
        return math.sqrt(les.area / (math.pi * les.elong))
    th = np.linspace(0, 2 * math.pi, 4096, endpoint=False)
    unit_area = 0.5 * np.mean(_star_radius(th, les) ** 2) * 2 * math.pi
    return math.sqrt(les.area / unit_area)


def render_lesion(les: Lesion, view: str, H: int, W: int):
    """Return (intensity increment, binary mask) for one view."""
    r0 = lesion_base_radius(les)
    extent = r0 * (les.elong if les.kind == "benign" else 1 + les.elong)
    cy, cx = _lesion_center(les, view, H, W, extent)
    angle = les.angle + (0.3 if view.endswith("MLO") else 0.0)
    y0, y1 = max(0, int(cy - extent - 3)), min(H, int(cy + extent + 4))
    x0, x1 = max(0, int(cx - extent - 3)), min(W, int(cx + extent + 4))
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    ry, rx = ca * dy + sa * dx, -sa * dy + ca * dx
    inc = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=bool)
    if les.kind == "benign":
        rho = np.sqrt((rx / (r0 * les.elong)) ** 2 + (ry / r0) ** 2)
        inside = rho <= 1
        local = les.contrast * np.clip(1 - rho ** 2, 0, None) ** 0.5
    else:
        theta = np.arctan2(ry, rx)
        rho = np.sqrt(rx ** 2 + ry ** 2) / (r0 * _star_radius(theta, les))
        inside = rho <= 1
        core = np.sqrt(rx ** 2 + ry ** 2) / r0
        local = les.contrast * np.where(inside, 0.75 + 0.25 * np.clip(core, 0, 1), 0.0)
    inc[y0:y1, x0:x1] = np.where(inside, local, 0.0) if les.kind != "benign" else local
    mask[y0:y1, x0:x1] = inside
    return inc, mask


def smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Unit-variance Gaussian-smoothed white noise (periodic, via FFT)."""
    spec = np.fft.rfft2(rng.standard_normal(shape))
    out = np.fft.irfft2(fourier_gaussian(spec, sigma, n=shape[1], axis=-1), s=shape)
    return out / (out.std() + 1e-12)


def render_background(view: str, H: int, W: int, spec: SynthSpec, rng: np.random.Generator):
    cy, b, a = _breast_geometry(view, H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rho2 = (xx / a) ** 2 + ((yy - cy) / b) ** 2
    breast = rho2 <= 1
    fine = smooth_noise(rng, (H, W), spec.texture_scale)
    coarse = smooth_noise(rng, (H, W), spec.texture_scale * 7)
    tissue = 0.30 + 0.25 * np.clip(1 - rho2, 0, 1) + spec.texture_amplitude * fine + 0.04 * coarse
    img = np.where(breast, tissue, 0.03)
    edge = gaussian_filter(breast.astype(np.float64), 2.0)
    img = img * edge + 0.03 * (1 - edge)
    img += 0.005 * rng.standard_normal((H, W))
    return img


def _draw_lesion(kind: str, spec: SynthSpec, rng: np.random.Generator, image_area: float) -> Lesion:
    lo, hi = spec.lesion_area_frac
    area = rng.uniform(lo, hi) * image_area
    crange = spec.benign_contrast if kind == "benign" else spec.malignant_contrast
    n_spikes = int(rng.integers(5, 10))
    return Lesion(kind=kind, u=float(rng.uniform(0.25, 0.7)), v=float(rng.uniform(-0.7, 0.7)), area=area,
                  contrast=float(rng.uniform(*crange)), angle=float(rng.uniform(0, math.pi)),
                  elong=float(rng.uniform(1.0, 1.6)) if kind == "benign" else float(rng.uniform(0.5, 0.9)),
                  n_spikes=n_spikes, phases=rng.uniform(0, 2 * math.pi, n_spikes))


def render_breast(labels, spec: SynthSpec, rng: np.random.Generator):
    """Return ({view: image}, {view: {class: mask}}, [lesions]) for one side."""
    H, W = spec.height, spec.width
    lesions = []
    for cls, present in zip(CLASS_NAMES, labels):
        if present:
            lesions.append(_draw_lesion(cls, spec, rng, H * W))
    if len(lesions) == 2:
        # keep two findings apart in depth
        lesions[1].u = lesions[0].u + 0.3 if lesions[0].u < 0.45 else lesions[0].u - 0.3
        lesions[1].v = -lesions[0].v
    images, masks = {}, {}
    for view in ("CC", "MLO"):
        img = render_background(view, H, W, spec, rng)
        vm = {}
        for les in lesions:
            inc, m = render_lesion(les, view, H, W)
            img = img + inc
            vm[les.kind] = m
        images[view] = np.clip(img, 0, 1)
        masks[view] = vm
    return images, masks, lesions


def exam_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _split_of(index: int, spec: SynthSpec) -> str:
    if index < spec.n_train:
        return "train"
    if index < spec.n_train + spec.n_val:
        return "validation"
    return "test"


def to_uint16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)


def _generate_exam(args) -> dict:
    index, spec_dict, out_dir = args
    spec = SynthSpec(**spec_dict)
    out = Path(out_dir)
    rng = exam_rng(spec.seed, index)
    exam_id = f"e{index:05d}"
    rec = {"exam_id": exam_id, "split": _split_of(index, spec), "labels": {}, "images": {}, "masks": {}}
    for side in SIDES:
        labels = [int(rng.random() < spec.benign_prevalence), int(rng.random() < spec.malignant_prevalence)]
        rec["labels"][side] = labels
        images, masks, _ = render_breast(labels, spec, rng)
        for v in ("CC", "MLO"):
            view = f"{side}-{v}"
            rel = f"images/{exam_id}_{view}.png"
            Image.fromarray(to_uint16(images[v])).save(out / rel, compress_level=1)
            rec["images"][view] = rel
            for cls, m in masks[v].items():
                mrel = f"masks/{exam_id}_{view}_{cls}.png"
                Image.fromarray((m * 255).astype(np.uint8)).save(out / mrel, compress_level=1)
                rec["masks"].setdefault(view, {})[cls] = mrel
    return rec


def generate_dataset(spec: SynthSpec, out_dir, workers: int = 1) -> DatasetManifest:
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataLoadError(f"cannot write dataset to {out}: {e}") from e
    jobs = [(i, asdict(spec), str(out)) for i in range(spec.n_exams)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            raw = list(pool.map(_generate_exam, jobs, chunksize=8))
    else:
        raw = [_generate_exam(j) for j in jobs]
    records = [ExamRecord(**r) for r in raw]
    manifest = DatasetManifest(spec.height, spec.width, records, list(CLASS_NAMES), SCHEMA_VERSION,
                               asdict(spec), out)
    manifest.save(out / "manifest.json")
    log.info("wrote %d exams to %s", len(records), out)
    return manifest


# ------------------------------------------------------------------ loading

def normalize_image(raw: np.ndarray, target_hw: tuple[int, int] | None = None,
                    pad_mode: str = "reflect", eps: float = 1e-6) -> np.ndarray:
    """Center-crop (or pad) to ``target_hw`` then standardize per image.

    Returns float32 [1, 1, H, W].
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale image, got shape {img.shape}")
    if target_hw is not None:
        th, tw = target_hw
        h, w = img.shape
        if h < th or w < tw:
            if pad_mode == "error":
                raise ValueError(f"image {h}x{w} smaller than target {th}x{tw}")
            ph, pw = max(0, th - h), max(0, tw - w)
            img = np.pad(img, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode=pad_mode)
            h, w = img.shape
        top, left = (h - th) // 2, (w - tw) // 2
        img = img[top:top + th, left:left + tw]
    std = img.std()
    out = (img - img.mean()) / max(std, eps)
    return out.astype(np.float32)[None, None]


def read_png(path: Path, what: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except (OSError, ValueError) as e:
        raise DataLoadError(f"cannot load {what} from {path}: {e}") from e


def load_view(manifest: DatasetManifest, rec: ExamRecord, view: str) -> np.ndarray:
    raw = read_png(manifest.resolve(rec.images[view]), f"exam {rec.exam_id} view {view}")
    return normalize_image(raw, (manifest.image_height, manifest.image_width))


def load_masks(manifest: DatasetManifest, rec: ExamRecord, view: str) -> dict[str, np.ndarray]:
    out = {}
    for cls, rel in rec.masks.get(view, {}).items():
        m = read_png(manifest.resolve(rel), f"exam {rec.exam_id} view {view} {cls} mask")
        out[cls] = m > 127
    return out


def load_exam(manifest: DatasetManifest, rec: ExamRecord, with_masks: bool = False):
    images = {v: load_view(manifest, rec, v) for v in VIEWS}
    masks = {v: load_masks(manifest, rec, v) for v in VIEWS} if with_masks else None
    return images, masks


def iterate_split(manifest: DatasetManifest, split: str, with_masks: bool = False,
                  seed: int | None = None) -> Iterator[tuple[ExamRecord, dict, dict | None]]:
    """Yield (record, {view: [1,1,H,W]}, masks) for every exam of ``split``.
    Manifest order unless ``seed`` is given, in which case a seeded shuffle."""
    recs = manifest.split(split)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(recs))
        recs = [recs[i] for i in order]
    for rec in recs:
        images, masks = load_exam(manifest, rec, with_masks)
        yield rec, images, masks
