"""The full classifier: saliency path, ROI retrieval, MIL path."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .aggregation import PoolingConfig, f_agg, fuse
from .backbone import BackboneConfig, ResNet, SaliencyHead
from .diffcore import ParamStore, ShapeError, Tensor
from .milmodule import GatedAttention, MilConfig, MilHead, PatchEncoder
from .roiretrieval import RetrievalConfig, RoiProposal, random_rois, retrieve_rois


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    class_names: list[str] = field(default_factory=lambda: ["benign", "malignant"])
    saliency_init_bias: float = -2.0

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class Localization:
    saliency: Tensor  # [N, C, h, w]
    y_loc: Tensor     # [N, C]


@dataclass
class MilOutput:
    y_mil: Tensor        # [N, C]
    alpha: Tensor        # [N, K]
    embeddings: Tensor   # [N, K, L]


@dataclass
class Prediction:
    saliency: np.ndarray
    y_loc: np.ndarray
    y_mil: np.ndarray
    y: np.ndarray
    alpha: np.ndarray
    rois: list[list[RoiProposal]]


class GMIC:
    def __init__(self, model: ModelConfig | None = None, retrieval: RetrievalConfig | None = None,
                 mil: MilConfig | None = None, pooling: PoolingConfig | None = None):
        self.model_cfg = model or ModelConfig()
        self.retrieval_cfg = retrieval or RetrievalConfig()
        self.mil_cfg = mil or MilConfig()
        self.pooling_cfg = pooling or PoolingConfig()
        C = self.model_cfg.num_classes
        self.backbone = ResNet(self.model_cfg.backbone, "backbone")
        self.head = SaliencyHead(self.model_cfg.backbone.out_channels, C, "saliency",
                                 self.model_cfg.saliency_init_bias)
        self.encoder = PatchEncoder(self.mil_cfg, "mil.encoder")
        self.attention = GatedAttention(self.mil_cfg, "mil.attention")
        self.mil_head = MilHead(self.mil_cfg, C, "mil.head")

    @property
    def downsample(self) -> int:
        return self.model_cfg.backbone.downsample

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore()
        self.backbone.init(store, rng)
        self.head.init(store, rng)
        self.encoder.init(store, rng)
        self.attention.init(store, rng)
        self.mil_head.init(store, rng)
        return store

    def localization_params(self, store: ParamStore) -> list[Tensor]:
        return store.tensors("backbone.") + store.tensors("saliency.")

    def mil_params(self, store: ParamStore) -> list[Tensor]:
        return store.tensors("mil.")

    # ------------------------------------------------------------------ paths

    def localize(self, store: ParamStore, images: Tensor, training: bool) -> Localization:
        s = self.downsample
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"images must be [N,1,H,W], got {images.shape}")
        if images.shape[2] % s or images.shape[3] % s:
            raise ShapeError(f"image {images.shape[2:]} not divisible by downsample factor {s}")
        A = self.head(store, self.backbone(store, images, training))
        return Localization(A, f_agg(A, self.pooling_cfg))

    def retrieve(self, images: np.ndarray, saliency: np.ndarray) -> list[list[RoiProposal]]:
        return [retrieve_rois(images[n, 0], saliency[n], self.retrieval_cfg) for n in range(images.shape[0])]

    def random_patches(self, images: np.ndarray, rng: np.random.Generator) -> list[list[RoiProposal]]:
        return [random_rois(images[n, 0], self.retrieval_cfg, rng) for n in range(images.shape[0])]

    def embed(self, store: ParamStore, rois: list[list[RoiProposal]], training: bool) -> Tensor:
        n, k = len(rois), len(rois[0])
        patches = np.stack([p.patch for bag in rois for p in bag])[:, None]
        # patch pixels are constants: no gradient crosses the retrieval step
        h = self.encoder(store, Tensor(patches), training)
        return dc.reshape(h, (n, k, self.mil_cfg.L))

    def mil(self, store: ParamStore, embeddings: Tensor, uniform: bool = False) -> MilOutput:
        alpha, z = self.attention(store, embeddings, uniform=uniform)
        return MilOutput(self.mil_head(store, z), alpha, embeddings)

    def forward(self, store: ParamStore, images: np.ndarray, training: bool) -> tuple[Localization, MilOutput, list]:
        x = Tensor(images)
        loc = self.localize(store, x, training)
        rois = self.retrieve(images, loc.saliency.data)
        out = self.mil(store, self.embed(store, rois, training))
        return loc, out, rois

    def predict(self, store: ParamStore, images: np.ndarray) -> Prediction:
        loc, out, rois = self.forward(store, images, training=False)
        y_loc, y_mil = loc.y_loc.data, out.y_mil.data
        return Prediction(loc.saliency.data, y_loc, y_mil, fuse(y_loc, y_mil), out.alpha.data, rois)
