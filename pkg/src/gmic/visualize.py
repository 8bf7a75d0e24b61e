"""Static PNG renderings of saliency maps, masks and retrieved patches."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluation import upsample_nearest  # noqa: E402


def render_view(out_dir, stem: str, image: np.ndarray, saliency: np.ndarray, class_names,
                masks: dict | None = None, rois=None, alpha=None) -> list[Path]:
    """Write ``<stem>_rois.png`` plus one ``<stem>_sm_<class>.png`` per class and
    ``<stem>_alpha.json``. ``image`` is [H, W], ``saliency`` [C, h, w]."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    H, W = image.shape
    written = []

    fig, ax = plt.subplots(figsize=(W / 100, H / 100), dpi=100)
    ax.imshow(image, cmap="gray", interpolation="nearest")
    for name, m in (masks or {}).items():
        if m.any():
            ax.contour(m.astype(float), levels=[0.5], colors=["cyan" if name == "benign" else "red"],
                       linewidths=1)
    for k, roi in enumerate(rois or []):
        y, x, h, w = roi.input_rect
        ax.add_patch(Rectangle((x - 0.5, y - 0.5), w, h, fill=False, edgecolor="yellow", linewidth=1))
        label = f"{k}" if alpha is None else f"{k}: {alpha[k]:.2f}"
        ax.text(x, y - 2, label, color="yellow", fontsize=6)
    ax.axis("off")
    p = out / f"{stem}_rois.png"
    fig.savefig(p, bbox_inches="tight", pad_inches=0)
    plt.close(fig)
    written.append(p)

    for c, name in enumerate(class_names):
        # nearest-neighbour only: the overlay shows exactly the values in the map
        up = upsample_nearest(saliency[c], (H, W))
        fig, ax = plt.subplots(figsize=(W / 100, H / 100), dpi=100)
        ax.imshow(image, cmap="gray", interpolation="nearest")
        ax.imshow(up, cmap="inferno", vmin=0.0, vmax=1.0, alpha=0.5, interpolation="nearest")
        ax.axis("off")
        p = out / f"{stem}_sm_{name}.png"
        fig.savefig(p, bbox_inches="tight", pad_inches=0)
        plt.close(fig)
        written.append(p)

    side = {"patches": [dict(r.to_json(), alpha=None if alpha is None else float(alpha[k]))
                        for k, r in enumerate(rois or [])]}
    p = out / f"{stem}_alpha.json"
    p.write_text(json.dumps(side, indent=2))
    written.append(p)
    return written
