"""Patch encoder, gated attention pooling and the MIL prediction head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, ResNet, kaiming
from .diffcore import ParamStore, ShapeError, Tensor


@dataclass
class MilConfig:
    L: int = 128
    attention_dim: int = 128
    encoder_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    encoder_blocks: int = 1
    gated: bool = True
    attention_bias: bool = False

    def encoder_backbone(self) -> BackboneConfig:
        return BackboneConfig(widths=list(self.encoder_widths), blocks_per_stage=self.encoder_blocks,
                              downsample=2 ** (len(self.encoder_widths) + 1), stem_pool=True)


class PatchEncoder:
    """Residual CNN -> global average pool -> linear to L."""

    def __init__(self, cfg: MilConfig, prefix: str = "mil.encoder"):
        self.cfg = cfg
        self.prefix = prefix
        self.net = ResNet(cfg.encoder_backbone(), prefix)

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        self.net.init(store, rng)
        c = self.cfg.encoder_widths[-1]
        store.add(f"{self.prefix}.fc.weight", kaiming(rng, (self.cfg.L, c), c) * np.float32(np.sqrt(0.5)))
        store.add(f"{self.prefix}.fc.bias", np.zeros(self.cfg.L, np.float32))

    def __call__(self, store: ParamStore, patches: Tensor, training: bool) -> Tensor:
        """[B, 1, h_c, w_c] -> [B, L]."""
        if patches.ndim != 4 or patches.shape[1] != 1:
            raise ShapeError(f"patches must be [B,1,h_c,w_c], got {patches.shape}")
        feats = dc.global_avg_pool(self.net(store, patches, training))
        return dc.linear(feats, store[f"{self.prefix}.fc.weight"], store[f"{self.prefix}.fc.bias"])


def encode_patch(patch, cfg: MilConfig, store: ParamStore, training: bool = False) -> Tensor:
    p = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch))
    if p.ndim == 2:
        p = Tensor(p.data[None, None])
    return dc.reshape(PatchEncoder(cfg)(store, p, training), (cfg.L,))


class GatedAttention:
    """alpha = softmax_k( w . (tanh(V h_k) * sigmoid(U h_k)) ), z = sum_k alpha_k h_k."""

    def __init__(self, cfg: MilConfig, prefix: str = "mil.attention"):
        self.cfg = cfg
        self.prefix = prefix

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        L, D = self.cfg.L, self.cfg.attention_dim
        p = self.prefix
        store.add(f"{p}.V", kaiming(rng, (D, L), L) * np.float32(np.sqrt(0.5)))
        store.add(f"{p}.U", kaiming(rng, (D, L), L) * np.float32(np.sqrt(0.5)))
        store.add(f"{p}.w", kaiming(rng, (D,), D) * np.float32(np.sqrt(0.5)))
        if self.cfg.attention_bias:
            store.add(f"{p}.V_bias", np.zeros(D, np.float32))
            store.add(f"{p}.U_bias", np.zeros(D, np.float32))

    def scores(self, store: ParamStore, h: Tensor) -> Tensor:
        """Attention logits, [N, K, L] -> [N, K]."""
        p = self.prefix
        n, k, _ = h.shape
        vh = dc.matmul(h, dc.transpose(store[f"{p}.V"], (1, 0)))
        uh = dc.matmul(h, dc.transpose(store[f"{p}.U"], (1, 0)))
        if self.cfg.attention_bias:
            vh = dc.add(vh, store[f"{p}.V_bias"])
            uh = dc.add(uh, store[f"{p}.U_bias"])
        gate = dc.tanh(vh)
        if self.cfg.gated:
            gate = dc.mul(gate, dc.sigmoid(uh))
        w = dc.reshape(store[f"{p}.w"], (self.cfg.attention_dim, 1))
        return dc.reshape(dc.matmul(gate, w), (n, k))

    def __call__(self, store: ParamStore, h: Tensor, uniform: bool = False) -> tuple[Tensor, Tensor]:
        """[N, K, L] -> (alpha [N, K], z [N, L]). ``uniform`` sets alpha_k = 1/K."""
        if h.ndim != 3 or h.shape[1] < 1:
            raise ShapeError(f"embeddings must be [N,K>=1,L], got {h.shape}")
        n, k, L = h.shape
        if uniform:
            alpha = Tensor(np.full((n, k), 1.0 / k, dtype=h.data.dtype))
        else:
            alpha = dc.softmax(self.scores(store, h), axis=1)
        z = dc.reshape(dc.matmul(dc.reshape(alpha, (n, 1, k)), h), (n, L))
        return alpha, z


def gated_attention(embeddings, store: ParamStore, cfg: MilConfig | None = None,
                    prefix: str = "mil.attention") -> tuple[Tensor, Tensor]:
    """Single bag: list of K embeddings [L] (or a [K, L] tensor) -> (alpha [K], z [L])."""
    if isinstance(embeddings, Tensor):
        h = embeddings
    else:
        if len(embeddings) == 0:
            raise ValueError("gated attention needs at least one embedding")
        h = dc.stack([e if isinstance(e, Tensor) else Tensor(np.asarray(e)) for e in embeddings], axis=0)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"expected K >= 1 embeddings, got shape {h.shape}")
    if cfg is None:
        V = store[f"{prefix}.V"]
        cfg = MilConfig(L=V.shape[1], attention_dim=V.shape[0], attention_bias=f"{prefix}.V_bias" in store)
    k, L = h.shape
    alpha, z = GatedAttention(cfg, prefix)(store, dc.reshape(h, (1, k, L)))
    return dc.reshape(alpha, (k,)), dc.reshape(z, (L,))


class MilHead:
    """y_mil = sigmoid(w_mil^T z); no bias."""

    def __init__(self, cfg: MilConfig, num_classes: int = 2, prefix: str = "mil.head"):
        self.cfg, self.num_classes, self.prefix = cfg, num_classes, prefix

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(f"{self.prefix}.w_mil", kaiming(rng, (self.cfg.L, self.num_classes), self.cfg.L) * np.float32(0.5))

    def __call__(self, store: ParamStore, z: Tensor) -> Tensor:
        return dc.sigmoid(dc.matmul(z, store[f"{self.prefix}.w_mil"]))


def mil_predict(z: Tensor, store: ParamStore, prefix: str = "mil.head") -> Tensor:
    """z [L] or [N, L] -> per-class probabilities."""
    w = store[f"{prefix}.w_mil"]
    if z.ndim == 1:
        return dc.reshape(dc.sigmoid(dc.matmul(dc.reshape(z, (1, z.shape[0])), w)), (w.shape[1],))
    return dc.sigmoid(dc.matmul(z, w))
