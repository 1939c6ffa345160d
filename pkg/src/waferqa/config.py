"""Run configuration: one JSON document covering generation, model, loss,
training and ablation settings.

Unknown keys are rejected by name; absent keys take their defaults.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

CONFIG_VERSION = 1

LABELS = ("good", "hole", "particle", "scratch", "pattern_deformation")
DEFECT_LABELS = LABELS[1:]


def _default_counts() -> dict[str, int]:
    # class balance of the reference wafer set, scaled down to desk size
    return {"good": 246, "hole": 50, "particle": 100, "scratch": 36, "pattern_deformation": 50}


def _default_area_bounds() -> dict[str, list[int]]:
    return {
        "hole": [24, 220],
        "particle": [8, 256],
        "scratch": [30, 220],
        "pattern_deformation": [60, 320],
    }


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    counts: dict[str, int] = field(default_factory=_default_counts)
    train_fraction: float = 0.7
    area_bounds: dict[str, list[int]] = field(default_factory=_default_area_bounds)
    noise_std: float = 0.02
    text_band: int = 10  # rows reserved at the bottom for text marks
    seed: int = 0

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0 or self.height % 16 or self.width % 16:
            raise ConfigError(f"image dims must be positive multiples of 16, got {self.height}x{self.width}")
        for name in self.counts:
            if name not in LABELS:
                raise ConfigError(f"unknown label in counts: {name!r}")
        if any(c < 0 for c in self.counts.values()):
            raise ConfigError("class counts must be non-negative")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        for name, (lo, hi) in self.area_bounds.items():
            if name not in DEFECT_LABELS:
                raise ConfigError(f"unknown label in area_bounds: {name!r}")
            if not 0 < lo <= hi:
                raise ConfigError(f"bad area bounds for {name}: {lo}, {hi}")


@dataclass
class ModelConfig:
    dim: int = 64
    patch_size: int = 16
    max_text_tokens: int = 16
    n_expert: int = 4
    decoder_widths: list[int] = field(default_factory=lambda: [32, 32, 16, 16])
    d_k: int = 64
    llm_dim: int = 64
    llm_layers: int = 2
    llm_heads: int = 4
    max_question_tokens: int = 24
    max_answer_tokens: int = 32
    encoder_seed: int = 1234
    stem_channels: int = 32
    calibration_per_class: int = 40  # unlabelled reference wafers for the frozen whitening

    def validate(self) -> None:
        if len(self.decoder_widths) != 4:
            raise ConfigError("decoder needs exactly four upsampling stages")
        if self.llm_dim % self.llm_heads:
            raise ConfigError("llm_dim must be divisible by llm_heads")
        if self.n_expert < 0:
            raise ConfigError("n_expert must be >= 0")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be >= 1")
        if self.calibration_per_class < 1:
            raise ConfigError("calibration_per_class must be >= 1")


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 1.0
    epsilon: float = 1.0
    gate_weight: float = 1.0

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        for name in ("alpha", "beta", "delta", "epsilon", "gate_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss coefficient {name} must be >= 0")


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    # per-group multipliers on the scheduled rate; everything trainable here starts from scratch,
    # and 1e-4 alone barely moves it within the desk-scale step budget
    lr_scale: dict[str, float] = field(default_factory=lambda: {"detector": 30.0, "language": 60.0})
    threads: int = 1
    # Q&A pairs per defect image in A batches; B batches hold batch_size * this many questions
    qa_per_image: int = 4
    grad_clip: float = 1.0  # gradient-norm limit per parameter group; 0 disables
    # chance that a training question gets 1-3 filler words from the training questions prepended
    question_noise: float = 0.5
    # also train the LM on the general questions paired with real images in A batches; off by
    # default, so those pairs only supervise the gate and the ungated baseline never sees them
    negative_lm_loss: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.question_noise <= 1.0:
            raise ConfigError("question_noise must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.qa_per_image < 1:
            raise ConfigError("qa_per_image must be >= 1")
        if self.lr_final > self.lr_init:
            raise ConfigError("lr_final must not exceed lr_init")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for key in self.lr_scale:
            if key not in ("detector", "language"):
                raise ConfigError(f"unknown lr_scale group: {key!r}")


@dataclass
class AblationConfig:
    use_pm: bool = True
    use_experts: bool = True
    use_qformer_stack: bool = True
    use_corrector: bool = True
    instruction_format: str = "eq9_gated"

    def validate(self) -> None:
        if self.instruction_format not in ("eq9_gated", "eq5_baseline"):
            raise ConfigError(f"unknown instruction_format: {self.instruction_format!r}")


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        self.gen.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.ablation.validate()
        if self.gen.height % self.model.patch_size or self.gen.width % self.model.patch_size:
            raise ConfigError("image dims must be multiples of the patch size")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {
    "gen": GenConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "ablation": AblationConfig,
}


# dict fields overlaid on their defaults; other dicts (e.g. counts) replace wholesale
_MERGED_DICTS = ("area_bounds", "lr_scale")


def _build_section(cls, values: dict[str, Any], prefix: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {prefix!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}.{key}")
    obj = cls()
    for key, value in values.items():
        default = getattr(obj, key)
        if key in _MERGED_DICTS:
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}.{key} must be an object")
            merged = dict(default)
            merged.update(value)
            value = merged
        setattr(obj, key, value)
    return obj


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    for key in data:
        if key != "version" and key not in _SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
    cfg = RunConfig(version=data.get("version", CONFIG_VERSION))
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, data[name], name))
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike | None = None, seed: int | None = None) -> RunConfig:
    """Read a config file (or defaults), apply seed overrides, validate.

    Precedence for the seed: explicit argument, then ``FABGPT_SEED``, then file.
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
    cfg = config_from_dict(data)
    env_seed = os.environ.get("FABGPT_SEED")
    if seed is None and env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"FABGPT_SEED must be an integer, got {env_seed!r}") from exc
    if seed is not None:
        cfg.gen.seed = seed
        cfg.train.seed = seed
    return cfg


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
