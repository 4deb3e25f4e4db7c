"""Architecture hyperparameters and their key-value text form."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

PATCH_KERNELS = (7, 3, 3, 3)
PATCH_STRIDES = (4, 2, 2, 2)
PATCH_PADDINGS = (3, 1, 1, 1)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stage_dims: tuple[int, ...] = (64, 128, 320, 512)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: tuple[int, ...] = (1, 2, 5, 8)
    reduction_ratios: tuple[int, ...] = (8, 4, 2, 1)
    decoder_dim: int = 256
    fusion_enabled: bool = True
    input_h: int = 704
    input_w: int = 1280
    num_classes: int = 2
    mlp_ratio: int = 4
    encoder_stages: int = 4
    in_channels: int = 3
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("stage_dims", "stage_depths", "stage_heads", "reduction_ratios"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name in ("stage_dims", "stage_depths", "stage_heads", "reduction_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {getattr(self, name)}")
        for i, (d, h) in enumerate(zip(self.stage_dims, self.stage_heads)):
            if d <= 0 or h <= 0 or d % h:
                raise ConfigError(f"stage {i + 1}: dim {d} not divisible by heads {h}")
        if self.num_classes != 2:
            raise ConfigError("num_classes is fixed at 2")
        if not 1 <= self.encoder_stages <= 4:
            raise ConfigError("encoder_stages must be in 1..4")
        if self.input_h % 32 or self.input_w % 32 or self.input_h <= 0 or self.input_w <= 0:
            raise ConfigError(f"input {self.input_h}x{self.input_w} must be positive multiples of 32")
        for i, (r, (h, w)) in enumerate(zip(self.reduction_ratios, self.stage_resolutions())):
            if r < 1 or h % r or w % r:
                raise ConfigError(f"stage {i + 1}: reduction {r} does not divide the {h}x{w} grid")

    def stage_resolutions(self) -> list[tuple[int, int]]:
        return [(self.input_h >> (i + 2), self.input_w >> (i + 2)) for i in range(4)]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_key_values(text, cls))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def parse_key_values(text: str, schema) -> dict:
    """Parse ``key = value`` lines into kwargs typed after the dataclass ``schema``."""
    types = {f.name: f for f in fields(schema)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if not sep or key not in types:
            raise ConfigError(f"line {lineno}: unknown or malformed entry {raw!r}")
        default = types[key].default
        if default is dataclasses.MISSING and types[key].default_factory is not dataclasses.MISSING:
            default = types[key].default_factory()
        out[key] = _coerce(value, default, key)
    return out


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return value


def toy_config(**overrides) -> ModelConfig:
    """Small two-stream network for 64x64 inputs, used by tests and the ablation harness."""
    base = dict(
        stage_dims=(8, 16, 32, 64),
        stage_depths=(1, 1, 1, 1),
        stage_heads=(1, 2, 4, 8),
        reduction_ratios=(8, 4, 2, 1),
        input_h=64,
        input_w=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


__all__ = ["ConfigError", "ModelConfig", "parse_key_values", "toy_config"]
