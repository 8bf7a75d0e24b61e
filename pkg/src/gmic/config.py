"""Run configuration: nested dataclasses loaded from JSON with strict keys."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .aggregation import LossConfig, PoolingConfig
from .backbone import BackboneConfig
from .milmodule import MilConfig
from .model import ModelConfig
from .roiretrieval import RetrievalConfig
from .synthdata import SynthSpec


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass
class LossSection:
    lam: float = 1e-3
    beta: float = 1.0
    t: float = 2.0  # pooling percentage

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.beta)

    def pooling_config(self) -> PoolingConfig:
        return PoolingConfig(self.t)


@dataclass
class TrainingConfig:
    lr: float = 10 ** -3.8
    epochs: int = 4
    batch_size: int = 4          # breasts per step (two images each)
    seed: int = 0
    num_threads: int = 0         # 0 = leave the kernel library default
    prefetch: int = 2
    check_finite: bool = True
    max_steps_per_epoch: int = 0  # 0 = no cap
    val_limit: int = 0            # exams used for per-epoch validation; 0 = all
    eval_every_epoch: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")


@dataclass
class SearchConfig:
    n_models: int = 4
    top_k: int = 5
    seed: int = 0
    workers: int = 1
    t_interpretation: str = "fraction"
    lr_log10: list[float] = field(default_factory=lambda: [-5.5, -3.8])
    lam_log10: list[float] = field(default_factory=lambda: [-5.0, -2.8])
    beta_ln: list[float] = field(default_factory=lambda: [-1.6, 1.6])
    t_ln: list[float] = field(default_factory=lambda: [-5.0, -1.5])

    def __post_init__(self):
        if self.t_interpretation not in ("fraction", "percent"):
            raise ValueError("t_interpretation must be 'fraction' or 'percent'")
        for name in ("lr_log10", "lam_log10", "beta_ln", "t_ln"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo} > {hi}")


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    mil: MilConfig = field(default_factory=MilConfig)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def validate(self) -> "RunConfig":
        s = self.model.backbone.downsample
        if self.data.height % s or self.data.width % s:
            raise ConfigError("data", f"image {self.data.height}x{self.data.width} not divisible by downsample {s}")
        if self.retrieval.h_c > self.data.height or self.retrieval.w_c > self.data.width:
            raise ConfigError("retrieval", "patch larger than image")
        return self


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    raise ConfigError(path, f"unsupported field type {tp}")


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {k: _check_type(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(path, str(e)) from e


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError("", f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError("", f"invalid JSON in {path}: {e}") from e
    if overrides:
        raw = deep_merge(raw, overrides)
    return from_dict(RunConfig, raw).validate()


def deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def desk_config(**overrides) -> RunConfig:
    """Preset used for the end-to-end synthetic benchmark on a small CPU:
    lighter backbone, 128-px patches."""
    base = {
        "model": {"backbone": {"widths": [8, 16, 32, 64], "blocks_per_stage": 1, "downsample": 16,
                               "stem_pool": True}},
        "retrieval": {"K": 6, "h_c": 128, "w_c": 128},
        "mil": {"encoder_widths": [16, 32, 64, 128], "encoder_blocks": 1},
    }
    return from_dict(RunConfig, deep_merge(base, overrides)).validate()


def toy_config(**overrides) -> RunConfig:
    """64x64 images, 16x16 patches, K=2: used by gradient checks and smoke runs."""
    base = {
        "data": {"height": 64, "width": 64, "n_train": 8, "n_val": 4, "n_test": 4,
                 "benign_prevalence": 0.3, "malignant_prevalence": 0.3, "texture_scale": 2.0},
        "model": {"backbone": {"widths": [4, 8], "blocks_per_stage": 1, "downsample": 8, "stem_pool": True}},
        "retrieval": {"K": 2, "h_c": 16, "w_c": 16},
        "mil": {"L": 8, "attention_dim": 6, "encoder_widths": [4, 6, 8], "encoder_blocks": 1},
        "loss": {"lam": 1e-2, "beta": 1.0, "t": 10.0},
        "training": {"epochs": 1, "batch_size": 2, "lr": 1e-3},
    }
    return from_dict(RunConfig, deep_merge(base, overrides)).validate()


# re-export for callers that only need the section types
__all__ = ["BackboneConfig", "ConfigError", "LossSection", "MilConfig", "ModelConfig", "OutputConfig",
           "RetrievalConfig", "RunConfig", "SearchConfig", "SynthSpec", "TrainingConfig", "deep_merge",
           "desk_config", "from_dict", "load_config", "toy_config"]
