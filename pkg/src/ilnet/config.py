"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected. Every
key maps to exactly one field of :class:`DataConfig`, :class:`ModelConfig` or
:class:`HyperConfig`; see ``KEYS`` for the full list. Tuples are written as
comma-separated values, the branch mask as e.g. ``shared+scores``.
"""
from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .losses import LossWeights
from .model import BranchInputMask, ModelConfig
from .synthdata import DataConfig
from .trainer import HyperConfig


class ConfigError(ValueError):
    pass


# key -> (section, field)
KEYS: dict[str, tuple[str, str]] = {}
for _name in ("image_size", "num_classes", "max_objects", "min_object_size", "max_object_size",
              "noise_std", "n_scenes", "n_eval", "labeled_fraction"):
    KEYS[_name] = ("data", _name)
for _name in ("feature_dim", "trunk_channels", "anchor_stride", "anchor_sizes", "num_proposals",
              "rpn_nms_threshold", "pool_size", "branch_hidden", "rpn_reg_weights", "roi_reg_weights"):
    KEYS[_name] = ("model", _name)
for _name in ("alpha", "beta", "gamma_iou", "gamma_focal"):
    KEYS[_name] = ("weights", _name)
for _f in fields(HyperConfig):
    if _f.name not in ("weights", "strong_aug"):
        KEYS[_f.name] = ("train", _f.name)
for _name in ("p_jitter", "p_grayscale", "p_blur", "p_cutout", "jitter_strength"):
    KEYS[_name] = ("strong_aug", _name)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: HyperConfig = field(default_factory=HyperConfig)

    def model_config(self) -> ModelConfig:
        return replace(self.model, image_size=self.data.image_size, num_classes=self.data.num_classes,
                       branch_enabled=self.train.branch_enabled, branch_mask=self.train.branch_mask,
                       init_seed=self.train.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """The seed drives data generation, initialization and the training RNG."""
        return RunConfig(replace(self.data, seed=seed), self.model, replace(self.train, seed=seed))

    def with_overrides(self, values: dict[str, Any]) -> "RunConfig":
        flat = self.to_flat()
        if "total_iters" in values:
            # keep derived schedule fields derived unless they were set explicitly
            derived = HyperConfig(total_iters=self.train.total_iters)
            for key in ("burn_up_iters", "lr_steps"):
                if key not in values and flat[key] == getattr(derived, key):
                    flat[key] = None
        return build_config({**flat, **values})

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for key, (section, name) in KEYS.items():
            if section == "weights":
                out[key] = getattr(self.train.weights, name)
            elif section == "strong_aug":
                out[key] = getattr(self.train.strong_aug, name)
            else:
                out[key] = getattr(getattr(self, section), name)
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def _field_type(section: str, name: str):
    cls = {"data": DataConfig, "model": ModelConfig, "train": HyperConfig,
           "weights": LossWeights}.get(section)
    if cls is None:
        return float
    return typing.get_type_hints(cls)[name]


def parse_value(raw: str, tp) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[...]
        if raw.lower() in ("auto", "none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return parse_value(raw, inner)
    if tp is BranchInputMask:
        return BranchInputMask.parse(raw)
    if tp is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if origin is tuple:
        elem = args[0] if args else float
        return tuple(parse_value(p, elem) for p in raw.split(",") if p.strip())
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def build_config(values: dict[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from flat key/value pairs (strings or typed)."""
    sections: dict[str, dict[str, Any]] = {s: {} for s in ("data", "model", "train", "weights", "strong_aug")}
    for key, value in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = KEYS[key]
        if isinstance(value, str):
            try:
                value = parse_value(value, _field_type(section, name))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        sections[section][name] = value
    try:
        weights = LossWeights(**sections["weights"])
        from .synthdata import StrongAugConfig
        strong = StrongAugConfig(**sections["strong_aug"])
        train = HyperConfig(weights=weights, strong_aug=strong, **sections["train"])
        data = DataConfig(**sections["data"])
        data.seed = train.seed
        data.validate()
        model = ModelConfig(**sections["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(data, model, train)


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return build_config(values)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))
