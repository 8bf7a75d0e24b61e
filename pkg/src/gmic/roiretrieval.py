"""Greedy saliency-guided ROI retrieval with the overlap-suppressing reset.

Window sums come from a summed-area table over a fixed-point copy of the
class-summed map, so every window sum is exact and argmax ties resolve by
the row-major rule rather than by rounding noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# fixed-point resolution for window sums
FIXED_BITS = 32
_SCALE = float(2 ** FIXED_BITS)


@dataclass
class RetrievalConfig:
    K: int = 6
    h_c: int = 256
    w_c: int = 256

    def __post_init__(self):
        if self.K < 1 or self.h_c < 1 or self.w_c < 1:
            raise ValueError(f"K, h_c, w_c must be positive, got {self.K}, {self.h_c}, {self.w_c}")


@dataclass(frozen=True)
class SmWindow:
    i: int
    j: int
    height: int
    width: int

    def cells(self):
        return slice(self.i, self.i + self.height), slice(self.j, self.j + self.width)


@dataclass
class RoiProposal:
    sm_window: SmWindow
    input_rect: tuple[int, int, int, int]  # (y, x, h_c, w_c)
    criterion_value: float
    rank: int
    patch: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"rank": self.rank, "sm_window": asdict(self.sm_window),
                "input_rect": {"y": self.input_rect[0], "x": self.input_rect[1],
                               "height": self.input_rect[2], "width": self.input_rect[3]},
                "criterion_value": self.criterion_value}


def minmax_normalize(grid: np.ndarray) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.zeros_like(g)
    return (g - lo) / (hi - lo)


def class_sum(grids) -> np.ndarray:
    grids = [np.asarray(g, dtype=np.float64) for g in grids]
    if any(g.shape != grids[0].shape for g in grids):
        raise ValueError(f"class grids differ in shape: {[g.shape for g in grids]}")
    return np.sum(grids, axis=0)


def summed_area_table(grid: np.ndarray) -> np.ndarray:
    """Zero-padded 2-d prefix sums: sat[i, j] = grid[:i, :j].sum()."""
    g = np.asarray(grid)
    sat = np.zeros((g.shape[0] + 1, g.shape[1] + 1), dtype=g.dtype)
    sat[1:, 1:] = g.cumsum(axis=0).cumsum(axis=1)
    return sat


def window_sums(sat: np.ndarray, wh: int, ww: int) -> np.ndarray:
    """Sum of every wh x ww window; entry [i, j] is the window with top-left (i, j)."""
    return sat[wh:, ww:] - sat[:-wh, ww:] - sat[wh:, :-ww] + sat[:-wh, :-ww]


def _to_fixed(grid: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(grid, dtype=np.float64) * _SCALE).astype(np.int64)


def window_criterion(grid: np.ndarray, win: SmWindow) -> float:
    h, w = np.shape(grid)
    if win.i < 0 or win.j < 0 or win.i + win.height > h or win.j + win.width > w or win.height < 1 or win.width < 1:
        raise IndexError(f"window {win} outside {h}x{w} grid")
    sat = summed_area_table(_to_fixed(grid))
    i2, j2 = win.i + win.height, win.j + win.width
    total = sat[i2, j2] - sat[win.i, j2] - sat[i2, win.j] + sat[win.i, win.j]
    return float(total) / _SCALE


def sm_window_dims(cfg: RetrievalConfig, image_hw, sm_hw) -> tuple[int, int]:
    (H, W), (h, w) = image_hw, sm_hw
    wh = max(1, math.floor(cfg.h_c * h / H + 0.5))
    ww = max(1, math.floor(cfg.w_c * w / W + 0.5))
    return min(wh, h), min(ww, w)


def greedy_select(a_hat: np.ndarray, wh: int, ww: int, K: int) -> list[tuple[SmWindow, float]]:
    """K rounds of argmax window + reset on a class-summed map."""
    h, w = a_hat.shape
    if not (1 <= wh <= h and 1 <= ww <= w):
        raise ValueError(f"window {wh}x{ww} does not fit {h}x{w} map")
    grid = _to_fixed(a_hat)
    picks = []
    for _ in range(K):
        sums = window_sums(summed_area_table(grid), wh, ww)
        flat = int(np.argmax(sums))  # first occurrence = row-major tie-break
        i, j = divmod(flat, sums.shape[1])
        win = SmWindow(i, j, wh, ww)
        picks.append((win, float(sums[i, j]) / _SCALE))
        grid[win.cells()] = 0
    return picks


def map_window_to_input(win: SmWindow, image_hw, sm_hw, cfg: RetrievalConfig) -> tuple[int, int, int, int]:
    """Project the window's top-left cell to pixels and shift-clamp so the
    h_c x w_c crop lies fully inside the image."""
    (H, W), (h, w) = image_hw, sm_hw
    y = (win.i * H) // h
    x = (win.j * W) // w
    y = min(max(0, y), H - cfg.h_c)
    x = min(max(0, x), W - cfg.w_c)
    return y, x, cfg.h_c, cfg.w_c


def retrieve_rois(x: np.ndarray, A: np.ndarray, cfg: RetrievalConfig) -> list[RoiProposal]:
    """x: image [H, W]; A: saliency map [C, h, w]. Returns K proposals in
    selection order, each carrying the cropped pixels of ``x``."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[0, 0]
    A = np.asarray(A)
    H, W = x.shape
    if H < cfg.h_c or W < cfg.w_c:
        raise ValueError(f"image {H}x{W} smaller than patch {cfg.h_c}x{cfg.w_c}")
    sm_hw = A.shape[1:]
    a_hat = class_sum([minmax_normalize(a) for a in A])
    wh, ww = sm_window_dims(cfg, (H, W), sm_hw)
    out = []
    for rank, (win, value) in enumerate(greedy_select(a_hat, wh, ww, cfg.K)):
        rect = map_window_to_input(win, (H, W), sm_hw, cfg)
        y0, x0, hc, wc = rect
        out.append(RoiProposal(win, rect, value, rank, x[y0:y0 + hc, x0:x0 + wc].copy()))
    return out


def random_rois(x: np.ndarray, cfg: RetrievalConfig, rng: np.random.Generator) -> list[RoiProposal]:
    """K full-size patches at uniformly random positions (ablation baseline)."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[0, 0]
    H, W = x.shape
    out = []
    for rank in range(cfg.K):
        y0 = int(rng.integers(0, H - cfg.h_c + 1))
        x0 = int(rng.integers(0, W - cfg.w_c + 1))
        out.append(RoiProposal(SmWindow(-1, -1, 0, 0), (y0, x0, cfg.h_c, cfg.w_c), float("nan"), rank,
                               x[y0:y0 + cfg.h_c, x0:x0 + cfg.w_c].copy()))
    return out


def dump_proposals(path, proposals: list[RoiProposal], image_id: str = "") -> None:
    payload = {"image_id": image_id, "proposals": [p.to_json() for p in proposals]}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_proposals(path) -> list[RoiProposal]:
    data = json.loads(Path(path).read_text())
    out = []
    for p in data["proposals"]:
        r = p["input_rect"]
        out.append(RoiProposal(SmWindow(**p["sm_window"]), (r["y"], r["x"], r["height"], r["width"]),
                               p["criterion_value"], p["rank"]))
    return out
