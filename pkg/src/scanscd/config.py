"""Model/training configuration and the flat ``key = value`` config format.

A config file is plain text, one ``key = value`` entry per line; blank lines
and lines starting with ``#`` are ignored.  Experiment files namespace keys
with dotted prefixes (``model.stripe_width = 2``, ``train.epochs = 50``).
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_flat(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_flat(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_flat(text, str(path))


def format_flat(mapping: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in mapping.items())


def write_flat(path: str | Path, mapping: Mapping[str, Any]) -> None:
    Path(path).write_text(format_flat(mapping))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(value: str, typ: Any, key: str) -> Any:
    try:
        if typ is bool:
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {typ!r}")


def dataclass_from_flat(cls, mapping: Mapping[str, Any], prefix: str = ""):
    """Build dataclass ``cls`` from string values; unknown keys are an error."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    kwargs = {}
    unknown = []
    for key, value in mapping.items():
        name = key[len(prefix):] if prefix and key.startswith(prefix) else key
        if name not in names:
            unknown.append(key)
            continue
        kwargs[name] = _coerce(value, hints[name], key) if isinstance(value, str) else value
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cls(**kwargs)


def dataclass_to_flat(obj, prefix: str = "") -> dict[str, Any]:
    return {prefix + f.name: getattr(obj, f.name) for f in fields(obj)}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``stripe_width``, ``attention_layers`` and ``heads_per_group`` default to 2;
    channel widths are desk-scale choices.
    """

    num_classes: int = 5
    input_channels: int = 3
    height: int = 64
    width: int = 64
    channels_u: int = 64
    channels_v: int = 128
    encoder_depth: int = 1
    change_layers: int = 6
    stripe_width: int = 2
    attention_layers: int = 2
    heads_per_group: int = 2
    mlp_ratio: int = 2
    pseudo_threshold: float = 0.8
    bias_inside_softmax: bool = False
    share_temporal_necks: bool = True
    use_scanformer: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("num_classes", "input_channels", "height", "width", "channels_u",
                     "channels_v", "encoder_depth", "stripe_width", "attention_layers",
                     "heads_per_group", "mlp_ratio"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.change_layers < 0:
            out.append("change_layers must be >= 0")
        if self.num_classes > 254:
            out.append("num_classes must fit an 8-bit label image")
        if out:
            return out
        for name in ("height", "width"):
            size = getattr(self, name)
            if size % 8:
                out.append(f"{name}={size} is not divisible by 8")
            elif (size // 4) % self.stripe_width:
                out.append(f"{name}/4={size // 4} is not divisible by stripe_width={self.stripe_width}")
        if self.token_depth % (2 * self.heads_per_group):
            out.append(f"token depth 3*channels_v={self.token_depth} is not divisible by "
                       f"2*heads_per_group={2 * self.heads_per_group}")
        if not 0.0 < self.pseudo_threshold <= 1.0:
            out.append("pseudo_threshold must lie in (0, 1]")
        return out

    @property
    def token_depth(self) -> int:
        return 3 * self.channels_v

    @property
    def head_depth(self) -> int:
        return self.token_depth // (2 * self.heads_per_group)

    def to_flat(self, prefix: str = "") -> dict[str, Any]:
        return dataclass_to_flat(self, prefix)

    @classmethod
    def from_flat(cls, mapping: Mapping[str, Any], prefix: str = "") -> "ModelConfig":
        return dataclass_from_flat(cls, mapping, prefix)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_flat(read_flat(path))

    def save(self, path: str | Path) -> None:
        write_flat(path, self.to_flat())

    def digest(self) -> str:
        """Stable hash of the architecture, stored in checkpoints."""
        return hashlib.sha256(format_flat(self.to_flat()).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr0: float = 0.1
    lr_power: float = 1.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    lambda_chg: float = 1.0
    lambda_psd: float = 1.0
    lambda_sc: float = 1.0
    sc_swap_cases: bool = False
    pseudo_source: str = "first"
    full_binary_ce: bool = False
    augment: bool = True
    seed: int = 0
    eval_every: int = 1
    change_threshold: float = 0.5
    pool_epochs: bool = True

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr0 > 0:
            problems.append("lr0 must be > 0")
        if self.grad_clip < 0:
            problems.append("grad_clip must be >= 0 (0 disables clipping)")
        if self.eval_every < 0:
            problems.append("eval_every must be >= 0")
        if self.pseudo_source not in ("first", "second", "mean"):
            problems.append("pseudo_source must be first, second or mean")
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))

    def to_flat(self, prefix: str = "") -> dict[str, Any]:
        return dataclass_to_flat(self, prefix)

    @classmethod
    def from_flat(cls, mapping: Mapping[str, Any], prefix: str = "") -> "TrainConfig":
        return dataclass_from_flat(cls, mapping, prefix)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict[str, Any]:
        return {**self.model.to_flat("model."), **self.train.to_flat("train.")}

    @classmethod
    def from_flat(cls, mapping: Mapping[str, Any]) -> "ExperimentConfig":
        model_keys = {k: v for k, v in mapping.items() if k.startswith("model.")}
        train_keys = {k: v for k, v in mapping.items() if k.startswith("train.")}
        stray = sorted(set(mapping) - set(model_keys) - set(train_keys))
        if stray:
            raise ConfigError(f"unknown config keys: {', '.join(stray)}")
        return cls(ModelConfig.from_flat(model_keys, "model."),
                   TrainConfig.from_flat(train_keys, "train."))

    def with_overrides(self, overrides: Mapping[str, str]) -> "ExperimentConfig":
        """Apply dotted ``section.key=value`` overrides (last wins).

        A bare key is accepted when it names exactly one field.
        """
        flat = {k: _format_value(v) for k, v in self.to_flat().items()}
        bad = []
        for key, value in overrides.items():
            if key not in flat:
                matches = [k for k in flat if k.split(".", 1)[1] == key]
                if len(matches) != 1:
                    bad.append(key)
                    continue
                key = matches[0]
            flat[key] = value
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(bad))}")
        return ExperimentConfig.from_flat(flat)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, str] | None = None):
        base = cls.from_flat(read_flat(path)) if path else cls()
        return base.with_overrides(overrides or {})

    def save(self, path: str | Path) -> None:
        write_flat(path, self.to_flat())

