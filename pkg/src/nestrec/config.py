"""Run configuration: two dataclasses plus a flat key=value file format.

Config files hold one `key = value` pair per line (# comments allowed).
Keys mirror the dataclass field names; command-line flags override file
values. A key may belong to the model config, the training config, or both
(`seed` and `precision` do), and unknown keys are rejected loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError
from .nesting import SizeLadder

NORM_MODES = ("segment", "full")
MODALITY_MODES = ("both", "text", "image", "none")


@dataclass
class ModelConfig:
    d_model: int = 64
    ladder_min: int = 8
    ladder_spec: str = ""       # explicit rungs like "8,16,32"; overrides ladder_min
    n_blocks: int = 2
    ffn_scale: int = 2
    norm_mode: str = "segment"
    modality_mode: str = "both"
    dropout: float = 0.5
    r_min: float = 0.0
    r_max: float = 0.1
    use_gamma: bool = True
    eps: float = 1e-5
    max_len: int = 50
    precision: int = 32
    seed: int = 0
    # filled in from the dataset when the model is built
    vocab_size: int = 0
    d_lang: int = 0
    d_img: int = 0

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise UsageError(
                f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.modality_mode not in MODALITY_MODES:
            raise UsageError(
                f"modality_mode must be one of {MODALITY_MODES}, "
                f"got {self.modality_mode!r}")
        if self.precision not in (32, 64):
            raise UsageError(
                f"precision must be 32 or 64, got {self.precision}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(
                f"dropout must be in [0, 1), got {self.dropout}")

    def ladder(self) -> SizeLadder:
        if self.ladder_spec:
            lad = SizeLadder.parse(self.ladder_spec)
            if lad.width != self.d_model:
                raise UsageError(
                    f"ladder {lad.spec()} must end at d_model={self.d_model}")
            return lad
        return SizeLadder.doubling(min(self.ladder_min, self.d_model),
                                   self.d_model)

    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 10
    batch_size: int = 64
    grad_clip: float = 0.0      # global-norm ceiling; 0 disables
    loss_weights: str = ""      # comma-separated per-size weights; "" = uniform
    eval_batch_size: int = 256
    precision: int = 32
    seed: int = 0

    def weights_for(self, n_sizes: int) -> list[float]:
        if not self.loss_weights.strip():
            return [1.0] * n_sizes
        parts = [float(p) for p in self.loss_weights.split(",") if p.strip()]
        if len(parts) != n_sizes:
            raise UsageError(
                f"loss_weights has {len(parts)} entries for {n_sizes} "
                f"ladder sizes")
        return parts


def _coerce(name: str, target_type, text: str):
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"config key {name}: expected a boolean, got {text!r}")
    try:
        return target_type(text)
    except ValueError as exc:
        raise UsageError(f"config key {name}: {exc}") from None


def read_config_file(path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(
                f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def write_config_file(path, mapping: dict) -> None:
    lines = [f"{k} = {v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _field_types(cls) -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type)
            else _TYPE_NAMES[f.type] for f in dataclasses.fields(cls)}


_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}


def configs_from_mapping(mapping: dict[str, str],
                         model_overrides: dict | None = None,
                         train_overrides: dict | None = None
                         ) -> tuple[ModelConfig, TrainConfig]:
    """Build both configs from one flat mapping, rejecting unknown keys."""
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    for key, value in mapping.items():
        known = False
        if key in model_types:
            model_kwargs[key] = _coerce(key, model_types[key], value)
            known = True
        if key in train_types:
            train_kwargs[key] = _coerce(key, train_types[key], value)
            known = True
        if not known:
            raise UsageError(f"unknown config key {key!r}")
    model_kwargs.update(model_overrides or {})
    train_kwargs.update(train_overrides or {})
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def mapping_from_configs(model: ModelConfig, train: TrainConfig) -> dict:
    out = dataclasses.asdict(train)
    out.update(dataclasses.asdict(model))
    return out
