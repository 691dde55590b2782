"""Experiment configuration: plain ``key = value`` text with defaults.

Unknown keys are rejected so typos fail loudly; ``#`` starts a comment.
The serialized form round-trips through the parser and is copied verbatim
into every run directory for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .datasets import SyntheticSpec
from .errors import ConfigError
from .streams import task_count
from .substrate import BackboneSpec, default_backbone_spec
from .trainer import DISTILL_VARIANTS, METHODS, TrainConfig

DATASET_FORMATS = ("synthetic", "cifar-binary", "idx")


@dataclass
class ExperimentConfig:
    # dataset
    dataset_format: str = "synthetic"
    dataset_path: str = ""
    class_count: int = 10
    # protocol
    base_m: int = 2
    inc_n: int = 2
    order_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    method: str = "replay+distill"
    dlc: bool = True
    gate: bool = True
    output_dir: str = ""
    # backbone
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    backbone_kernel: int = 3
    # synthetic dataset
    synth_samples_per_class: int = 100
    synth_test_per_class: int = 30
    synth_image_side: int = 16
    synth_channels: int = 3
    synth_blob_seed: int = 7
    synth_noise: float = 0.1
    synth_pattern_mix: float = 0.0
    # training
    phase1_epochs: int = 12
    phase2_epochs: int = 0
    lr_phase1: float = 0.1
    lr_phase2: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    lr_decay: float = 0.1
    tau: float = 2.0
    distill_variant: str = "kl"
    lambda_ce: float = 1.0
    lambda_mem: float = 1.0
    lambda_aux: float = 1.0
    lambda_ia: float = 1.0
    buffer_capacity: int = 2000
    rank: int = 0
    alpha: float = 0.0
    k_plugins: int = 1
    # accounting
    bytes_per_param: int = 4
    bytes_per_exemplar: int = 0  # 0 -> image height * width * channels

    def validate(self) -> None:
        if self.dataset_format not in DATASET_FORMATS:
            raise ConfigError(
                f"dataset_format must be one of {DATASET_FORMATS}, got {self.dataset_format!r}"
            )
        if self.dataset_format != "synthetic" and not self.dataset_path:
            raise ConfigError(f"dataset_format {self.dataset_format!r} needs dataset_path")
        if self.class_count < 1:
            raise ConfigError("class_count must be positive")
        task_count(self.class_count, self.base_m, self.inc_n)  # raises on bad split
        if not self.seeds:
            raise ConfigError("at least one training seed is required")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.distill_variant not in DISTILL_VARIANTS:
            raise ConfigError(f"distill_variant must be one of {DISTILL_VARIANTS}")
        if len(self.backbone_channels) < 1:
            raise ConfigError("backbone_channels must name at least one stage")
        if self.bytes_per_param < 1:
            raise ConfigError("bytes_per_param must be >= 1")
        if self.bytes_per_exemplar < 0:
            raise ConfigError("bytes_per_exemplar must be >= 0")
        self.train_config(self.seeds[0]).validate()
        if self.dataset_format == "synthetic":
            self.synthetic_spec().validate()

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            method=self.method, dlc=self.dlc, gate=self.gate,
            phase1_epochs=self.phase1_epochs, phase2_epochs=self.phase2_epochs,
            lr_phase1=self.lr_phase1, lr_phase2=self.lr_phase2,
            momentum=self.momentum, batch_size=self.batch_size,
            lr_milestones=self.lr_milestones, lr_decay=self.lr_decay,
            tau=self.tau, distill_variant=self.distill_variant,
            lambda_ce=self.lambda_ce, lambda_mem=self.lambda_mem,
            lambda_aux=self.lambda_aux, lambda_ia=self.lambda_ia,
            buffer_capacity=self.buffer_capacity, rank=self.rank,
            alpha=self.alpha, k_plugins=self.k_plugins, seed=seed,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            class_count=self.class_count,
            samples_per_class=self.synth_samples_per_class,
            test_per_class=self.synth_test_per_class,
            image_side=self.synth_image_side,
            channels=self.synth_channels,
            blob_seed=self.synth_blob_seed,
            noise=self.synth_noise,
            pattern_mix=self.synth_pattern_mix,
        )

    def backbone_spec(self, in_channels: int) -> BackboneSpec:
        return default_backbone_spec(in_channels, self.backbone_channels,
                                     self.backbone_kernel)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_value(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if text.strip() == "":
                return ()
            element = default[0] if default else 0
            parts = [p.strip() for p in text.split(",")]
            if isinstance(element, float):
                return tuple(float(p) for p in parts)
            return tuple(int(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from exc


_DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def apply_overrides(config: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Apply ``key=value`` overrides (CLI --set) onto a parsed config."""
    for key, raw in overrides.items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(config, key, _parse_value(key, raw, _DEFAULTS[key]))
    return config


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    config = ExperimentConfig()
    apply_overrides(config, values)
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
