"""Localization network: a residual CNN without pooling/FC head, plus the
1x1-conv sigmoid saliency head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, ShapeError, Tensor


@dataclass
class BackboneConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 2
    downsample: int = 16
    in_channels: int = 1
    stem_kernel: int = 5
    stem_pool: bool = False
    zero_init_residual: bool = False

    def __post_init__(self):
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        s = self.downsample
        if s < 2 or s & (s - 1):
            raise ValueError(f"downsample must be a power of 2 >= 2, got {s}")
        self.stage_strides()

    def stage_strides(self) -> list[int]:
        """Stride of each stage's first block. The stem contributes 2 (and the
        optional max pool another 2); later stages absorb the rest in order."""
        remaining = self.downsample // 2
        if self.stem_pool:
            if remaining < 2:
                raise ValueError("stem_pool needs downsample >= 4")
            remaining //= 2
        strides = [1] * len(self.widths)
        for i in range(1, len(self.widths)):
            if remaining == 1:
                break
            strides[i] = 2
            remaining //= 2
        if remaining != 1:
            raise ValueError(f"{len(self.widths)} stages cannot reach downsample {self.downsample}")
        return strides

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ConvBN:
    """conv (no bias) followed by batch norm."""

    def __init__(self, prefix: str, cin: int, cout: int, k: int, stride: int):
        self.prefix, self.cin, self.cout, self.k, self.stride = prefix, cin, cout, k, stride
        self.pad = k // 2

    def init(self, store: ParamStore, rng, gamma: float = 1.0):
        p = self.prefix
        store.add(f"{p}.weight", kaiming(rng, (self.cout, self.cin, self.k, self.k), self.cin * self.k * self.k))
        store.add(f"{p}.bn.gamma", np.full(self.cout, gamma, np.float32))
        store.add(f"{p}.bn.beta", np.zeros(self.cout, np.float32))
        store.add_buffer(f"{p}.bn.running_mean", np.zeros(self.cout, np.float32))
        store.add_buffer(f"{p}.bn.running_var", np.ones(self.cout, np.float32))

    def __call__(self, store: ParamStore, x: Tensor, training: bool) -> Tensor:
        p = self.prefix
        y = dc.conv2d(x, store[f"{p}.weight"], stride=self.stride, pad=self.pad)
        return dc.batch_norm2d(y, store[f"{p}.bn.gamma"], store[f"{p}.bn.beta"],
                               store.buffer(f"{p}.bn.running_mean"), store.buffer(f"{p}.bn.running_var"),
                               training=training)


class BasicBlock:
    def __init__(self, prefix: str, cin: int, cout: int, stride: int):
        self.conv1 = ConvBN(f"{prefix}.conv1", cin, cout, 3, stride)
        self.conv2 = ConvBN(f"{prefix}.conv2", cout, cout, 3, 1)
        self.shortcut = ConvBN(f"{prefix}.shortcut", cin, cout, 1, stride) if (cin != cout or stride != 1) else None

    def init(self, store, rng, zero_last: bool = False):
        self.conv1.init(store, rng)
        self.conv2.init(store, rng, gamma=0.0 if zero_last else 1.0)
        if self.shortcut is not None:
            self.shortcut.init(store, rng)

    def __call__(self, store, x, training):
        out = dc.relu(self.conv1(store, x, training))
        out = self.conv2(store, out, training)
        skip = x if self.shortcut is None else self.shortcut(store, x, training)
        return dc.relu(dc.add(out, skip))


class ResNet:
    """Stem conv (stride 2), optional 3x3/2 max pool, then residual stages."""

    def __init__(self, cfg: BackboneConfig, prefix: str = "backbone"):
        self.cfg = cfg
        self.prefix = prefix
        self.stem = ConvBN(f"{prefix}.stem", cfg.in_channels, cfg.widths[0], cfg.stem_kernel, 2)
        self.blocks: list[BasicBlock] = []
        cin = cfg.widths[0]
        for si, (w, s) in enumerate(zip(cfg.widths, cfg.stage_strides())):
            for bi in range(cfg.blocks_per_stage):
                self.blocks.append(BasicBlock(f"{prefix}.stage{si}.block{bi}", cin, w, s if bi == 0 else 1))
                cin = w

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.stem.init(store, rng)
        n_last = self.cfg.blocks_per_stage
        for i, b in enumerate(self.blocks):
            last_stage = i >= len(self.blocks) - n_last
            b.init(store, rng, zero_last=self.cfg.zero_init_residual and last_stage)

    def __call__(self, store: ParamStore, x: Tensor, training: bool) -> Tensor:
        out = dc.relu(self.stem(store, x, training))
        if self.cfg.stem_pool:
            out = dc.max_pool2d(out, 3, 2, 1)
        for b in self.blocks:
            out = b(store, out, training)
        return out


def extract_features(x: Tensor, cfg: BackboneConfig, store: ParamStore, training: bool = False,
                     prefix: str = "backbone") -> Tensor:
    """[N, 1, H, W] -> [N, C_feat, H/s, W/s]."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [N,{cfg.in_channels},H,W] input, got {x.shape}")
    h, w = x.shape[2:]
    s = cfg.downsample
    if h % s or w % s:
        raise ShapeError(f"input {h}x{w} not divisible by downsample factor {s}")
    out = ResNet(cfg, prefix)(store, x, training)
    assert out.shape[2:] == (h // s, w // s), out.shape
    return out


class SaliencyHead:
    """A = sigmoid(conv1x1(F)), one channel per class."""

    def __init__(self, in_channels: int, num_classes: int = 2, prefix: str = "saliency", init_bias: float = -2.0):
        self.in_channels, self.num_classes, self.prefix, self.init_bias = in_channels, num_classes, prefix, init_bias

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(f"{self.prefix}.weight",
                  kaiming(rng, (self.num_classes, self.in_channels, 1, 1), self.in_channels) * 0.1)
        store.add(f"{self.prefix}.bias", np.full(self.num_classes, self.init_bias, np.float32))

    def __call__(self, store: ParamStore, feats: Tensor) -> Tensor:
        return dc.sigmoid(dc.conv2d(feats, store[f"{self.prefix}.weight"], store[f"{self.prefix}.bias"]))


def saliency_head(feats: Tensor, store: ParamStore, prefix: str = "saliency") -> Tensor:
    w = store[f"{prefix}.weight"]
    return SaliencyHead(w.shape[1], w.shape[0], prefix)(store, feats)
