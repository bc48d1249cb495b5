"""Training configuration and its flat ``key = value`` text format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..augment import AugmentationPolicy, get_policy
from ..model import ModelConfig
from ..objectives import LossWeights


class ConfigError(ValueError):
    pass


ABLATIONS: dict[str, dict[str, bool]] = {
    "baseline": {"use_explicit": False, "use_implicit": False, "use_fusion": False},
    "ex_prior": {"use_explicit": True, "use_implicit": False, "use_fusion": False},
    "im_prior": {"use_explicit": False, "use_implicit": True, "use_fusion": True},
    "full": {"use_explicit": True, "use_implicit": True, "use_fusion": True},
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    iterations: int = 3000
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    queue_capacity: int = 5120
    policy: str | AugmentationPolicy = "VIPL-HR"
    seed: int = 0
    use_explicit: bool = True
    use_implicit: bool = True
    use_fusion: bool = True
    dann_shift: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1 or self.queue_capacity < 1:
            raise ConfigError("batch_size, iterations and queue_capacity must be positive")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        per_step = self.batch_size * (2 if self.use_explicit else 1)
        if self.use_implicit and per_step > self.queue_capacity:
            raise ConfigError(f"a step pushes {per_step} features but the queue holds {self.queue_capacity}")
        get_policy(self.policy)

    @property
    def augmentation(self) -> AugmentationPolicy:
        return get_policy(self.policy)

    def ablation(self, name: str) -> "TrainConfig":
        try:
            return replace(self, **ABLATIONS[name])
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}") from None

    @classmethod
    def full_scale(cls, **overrides: Any) -> "TrainConfig":
        return cls(batch_size=256, iterations=40_000, model=ModelConfig(dim=512), **overrides)


_INT_KEYS = {"batch_size", "iterations", "queue_capacity", "seed"}
_FLOAT_KEYS = {"lr"}
_BOOL_KEYS = {"use_explicit", "use_implicit", "use_fusion", "dann_shift"}
_WEIGHT_KEYS = {f.name for f in fields(LossWeights)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_POLICY_KEYS = {f.name for f in fields(AugmentationPolicy)}
_KNOWN = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _WEIGHT_KEYS | _MODEL_KEYS | _POLICY_KEYS | {"policy", "ablation"}


def _parse_bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_tuple(text: str, cast) -> tuple:
    return tuple(cast(part) for part in text.replace(" ", "").split(",") if part)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value

    cfg = base or TrainConfig()
    try:
        if "ablation" in values:
            cfg = cfg.ablation(values.pop("ablation"))
        top: dict[str, Any] = {}
        for key in list(values):
            if key in _INT_KEYS:
                top[key] = int(values.pop(key))
            elif key in _FLOAT_KEYS:
                top[key] = float(values.pop(key))
            elif key in _BOOL_KEYS:
                top[key] = _parse_bool(key, values.pop(key))
        weights = {k: float(values.pop(k)) for k in list(values) if k in _WEIGHT_KEYS}
        model: dict[str, Any] = {}
        for key in [k for k in values if k in _MODEL_KEYS]:
            text_value = values.pop(key)
            if key in ("widths", "head_widths"):
                model[key] = _parse_tuple(text_value, int)
            elif key == "hr_bias_init":
                model[key] = float(text_value)
            else:
                model[key] = int(text_value)
        policy: str | AugmentationPolicy = cfg.policy
        if "policy" in values:
            policy = values.pop("policy")
        policy_fields = {k: values.pop(k) for k in list(values) if k in _POLICY_KEYS}
        if policy_fields:
            base_policy = get_policy(policy)
            parsed: dict[str, Any] = {}
            for key, text_value in policy_fields.items():
                if key in ("gamma_range", "light_entry_range", "down_factor_set"):
                    parsed[key] = _parse_tuple(text_value, float)
                elif key == "delay_max_frames":
                    parsed[key] = int(text_value)
                else:
                    parsed[key] = float(text_value)
            policy = replace(base_policy, **parsed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return replace(
        cfg,
        **top,
        weights=replace(cfg.weights, **weights),
        model=replace(cfg.model, **model),
        policy=policy,
    )


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), base)


def format_config(cfg: TrainConfig) -> str:
    lines = [
        f"batch_size = {cfg.batch_size}",
        f"iterations = {cfg.iterations}",
        f"lr = {cfg.lr!r}",
        f"queue_capacity = {cfg.queue_capacity}",
        f"seed = {cfg.seed}",
        f"use_explicit = {str(cfg.use_explicit).lower()}",
        f"use_implicit = {str(cfg.use_implicit).lower()}",
        f"use_fusion = {str(cfg.use_fusion).lower()}",
        f"dann_shift = {str(cfg.dann_shift).lower()}",
    ]
    lines += [f"{f.name} = {getattr(cfg.weights, f.name)!r}" for f in fields(LossWeights)]
    m = cfg.model
    lines += [
        f"n_rois = {m.n_rois}",
        f"n_frames = {m.n_frames}",
        f"widths = {','.join(map(str, m.widths))}",
        f"dim = {m.dim}",
        f"head_widths = {','.join(map(str, m.head_widths))}",
        f"hr_bias_init = {m.hr_bias_init!r}",
    ]
    pol = cfg.augmentation
    lines += [
        f"p_gamma = {pol.p_gamma!r}",
        f"p_fps = {pol.p_fps!r}",
        f"p_delay = {pol.p_delay!r}",
        f"p_light = {pol.p_light!r}",
        f"p_motion = {pol.p_motion!r}",
        f"gamma_range = {','.join(repr(float(v)) for v in pol.gamma_range)}",
        f"down_factor_set = {','.join(repr(float(v)) for v in pol.down_factor_set)}",
        f"delay_max_frames = {pol.delay_max_frames}",
        f"light_entry_range = {','.join(repr(float(v)) for v in pol.light_entry_range)}",
    ]
    return "\n".join(lines) + "\n"
