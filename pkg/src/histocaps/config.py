"""Run configuration: flat ``key=value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .capsnet import TABLE1_CONV, NetworkConfig, format_conv_layers, parse_conv_layers
from .preprocess import ROTATIONS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    input_side: int = 512
    patch_size: int = 256
    patches_per_image: int = 100
    rotations: tuple[int, ...] = ROTATIONS
    routing_iterations: int = 3
    lr: float = 1e-4
    stop_loss: float = 0.1
    max_steps: int = 20000
    batch_size: int = 16
    k_folds: int = 5
    perplexity: float = 30.0
    seed: int = 0
    # architecture and pipeline knobs beyond the core constants
    conv: str = format_conv_layers(TABLE1_CONV)
    primary_capsule_dim: int = 8
    class_capsule_dim: int = 16
    activation: str = "relu"
    routing_init_std: float = 0.01
    window: int = 50
    tsne_iterations: int = 1000
    normalize: str = "before"
    patch_format: str = "png"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("input_side", "patch_size", "patches_per_image", "routing_iterations", "max_steps",
                    "batch_size", "window", "tsne_iterations", "primary_capsule_dim", "class_capsule_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.rotations or any(r not in ROTATIONS for r in self.rotations):
            raise ConfigError(f"rotations must be a non-empty subset of {ROTATIONS}")
        if len(set(self.rotations)) != len(self.rotations):
            raise ConfigError("rotations must not repeat")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.stop_loss < 0:
            raise ConfigError("stop_loss must be non-negative")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if self.perplexity <= 1:
            raise ConfigError("perplexity must exceed 1")
        if self.routing_init_std <= 0:
            raise ConfigError("routing_init_std must be positive")
        if self.normalize not in ("before", "after"):
            raise ConfigError("normalize must be 'before' or 'after'")
        if self.patch_format not in ("png", "ppm"):
            raise ConfigError("patch_format must be 'png' or 'ppm'")
        try:
            self.network_config()
        except ValueError as exc:
            raise ConfigError(f"invalid network: {exc}") from exc

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_side=self.input_side,
            conv=parse_conv_layers(self.conv),
            primary_capsule_dim=self.primary_capsule_dim,
            class_capsule_dim=self.class_capsule_dim,
            routing_iterations=self.routing_iterations,
            activation=self.activation,
            routing_init_std=self.routing_init_std,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None, source: str = "<config>") -> "RunConfig":
        return (base or cls()).with_overrides(_parse_lines(text, source), source)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read(), source=str(path))

    def with_overrides(self, pairs: list[tuple[str, str]], source: str = "<overrides>") -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in pairs:
            if key not in types:
                raise ConfigError(f"{source}: unknown key {key!r}")
            try:
                changes[key] = _convert(getattr(self, key), raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from exc
        try:
            return self.replace(**changes)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None


def _parse_lines(text: str, source: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _convert(current, raw: str):
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw
