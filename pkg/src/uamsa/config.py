"""``key = value`` run configuration files with typed fields and presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import SynthConfig
from .errors import ConfigError, ParameterError
from .loss import LAMBDA_PRESETS, LossConfig
from .model import ModelSpec
from .train import TrainConfig


@dataclass
class RunConfig:
    # model
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    dropout_p: float = 0.2
    variant: str = "uamsa"
    msam_reduction: int = 2
    msam_pool_divisor: int = 4
    msam_share_weights: bool = False
    msam_residual: bool = True
    # training
    epochs: int = 30
    batch_size: int = 8
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    seed: int = 0
    image_size: int = 64
    desk_profile: bool = True
    loss: str = "auto"
    bce_on: str = "mean"
    grad_clip: float = 0.0
    weight_decay: float = 0.0
    strict: bool = True
    # loss / inference
    lambda_u: str = "auto"
    t_passes: int = 5
    eval_t_passes: int = 0  # 0 -> same as t_passes
    eps: float = 1e-7
    # synthetic data
    synth_count: int = 250
    blob_min: int = 1
    blob_max: int = 3
    radius_min: float = 0.08
    radius_max: float = 0.2
    fuzz: float = 1.5
    noise: float = 0.08
    texture: float = 0.05
    modality: str = "SYNTH"
    synth_seed: int = 0
    # paths
    data_dir: str = ""
    out_dir: str = ""

    # ---------------------------------------------------------- resolution

    def resolved_lambda(self) -> float:
        if self.lambda_u == "auto":
            return LAMBDA_PRESETS.get(self.modality, LAMBDA_PRESETS["T1C"])
        try:
            return float(self.lambda_u)
        except ValueError:
            raise ConfigError(f"lambda_u must be a number or 'auto', got {self.lambda_u!r}") from None

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            self.in_channels, self.out_channels, self.depth, self.base_channels, self.dropout_p,
            self.variant, self.msam_reduction, self.msam_pool_divisor, self.msam_share_weights,
            self.msam_residual,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr_max, lr_min=self.lr_min,
            t_passes=self.t_passes, lambda_u=self.resolved_lambda(), seed=self.seed, variant=self.variant,
            image_size=self.image_size, desk_profile=self.desk_profile,
            loss=None if self.loss == "auto" else self.loss, bce_on=self.bce_on,
            grad_clip=self.grad_clip, weight_decay=self.weight_decay, strict=self.strict,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.resolved_lambda(), self.t_passes, self.eps, self.bce_on)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            count=self.synth_count, size=self.image_size, blob_min=self.blob_min, blob_max=self.blob_max,
            radius_min=self.radius_min, radius_max=self.radius_max, fuzz=self.fuzz, noise=self.noise,
            texture=self.texture, modality=self.modality, seed=self.synth_seed,
        )

    def validate(self) -> "RunConfig":
        try:
            self.model_spec().check_input(self.image_size, self.image_size)
            self.train_config()
            self.loss_config()
            self.synth_config()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        except Exception as exc:  # GeometryError and friends
            raise ConfigError(str(exc)) from None
        return self

    # ---------------------------------------------------------------- text

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


PRESETS = {
    "desk": {},
    "paper": dict(
        epochs=100, batch_size=32, t_passes=20, image_size=240, desk_profile=False,
        base_channels=16, depth=4,
    ),
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if typ in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None, preset: str = "desk") -> RunConfig:
    """Preset, then file values, then overrides (flags win)."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_text(text))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _TYPES:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(k, str(v)) if isinstance(v, str) else v
    return dataclasses.replace(RunConfig(), **values).validate()
