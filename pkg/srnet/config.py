"""
This module contains :class:`RunConfig`, every setting a command needs,
and the flat ``key = value`` file format it loads from.

Settings are applied in order: defaults, then the config file, then
command line overrides.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Union

try:
    from . import constants
    from .graph import NetworkGraph
    from .model import ABLATIONS, BackboneVariant, ReasoningConfig, build_variant
    from .training import NORMALIZATIONS, LossConfig, TrainConfig
    from .utils import ConfigError, ConvSpecError, ShapeError, format_int_list, parse_int_list
except ImportError:
    import constants
    from graph import NetworkGraph
    from model import ABLATIONS, BackboneVariant, ReasoningConfig, build_variant
    from training import NORMALIZATIONS, LossConfig, TrainConfig
    from utils import ConfigError, ConvSpecError, ShapeError, format_int_list, parse_int_list

logger = logging.getLogger(__name__)

BACKBONES = ("resnet", "vgg")


def _parse_delta(value: Union[str, float, None]) -> Optional[float]:
    if value is None or (isinstance(value, str) and value.strip().lower() == "auto"):
        return None
    return float(value)


def _parse_optional_list(value: Union[str, Iterable[int], None], name: str) -> Optional[Tuple[int, ...]]:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "auto", "default")):
        return None
    return parse_int_list(value, name)


# {"key": parser(raw value) -> typed value}
_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "backbone": str,
    "ablation": str,
    "stage_channels": lambda value: parse_int_list(value, "stage_channels"),
    "units_per_stage": lambda value: _parse_optional_list(value, "units_per_stage"),
    "stage_dilations": lambda value: parse_int_list(value, "stage_dilations"),
    "group_count": int,
    "shuffle_groups": int,
    "width_divisor": int,
    "input_size": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "epochs": int,
    "batch_size": int,
    "delta": _parse_delta,
    "loss_normalization": str,
    "seed": int,
    "data_dir": str,
    "checkpoint_path": str,
    "report_dir": str,
    "val_fraction": float,
    "n_thresholds": int,
    "beta_squared": float,
}
# Every key a config file or --set may name
CONFIG_KEYS = tuple(_PARSERS)


@dataclass(frozen=True)
class RunConfig:
    """
    Every setting of a run. The defaults are desk-scale: a 64x64 input and
    every backbone, lateral and fusion width divided by 16. Set
    ``width_divisor = 1`` and ``input_size = 320`` for the full-size network.
    """

    backbone: str = "resnet"
    ablation: str = "SRNet"
    stage_channels: Tuple[int, ...] = constants.DEFAULT_STAGE_CHANNELS
    units_per_stage: Optional[Tuple[int, ...]] = None
    stage_dilations: Tuple[int, ...] = constants.DEFAULT_STAGE_DILATIONS
    group_count: int = constants.DEFAULT_GROUP_COUNT
    shuffle_groups: int = constants.DEFAULT_SHUFFLE_GROUPS
    width_divisor: int = constants.DESK_WIDTH_DIVISOR
    input_size: int = constants.DESK_INPUT_SIZE
    lr: float = constants.DEFAULT_LR
    momentum: float = constants.DEFAULT_MOMENTUM
    weight_decay: float = constants.DEFAULT_WEIGHT_DECAY
    epochs: int = constants.DEFAULT_EPOCHS
    batch_size: int = constants.DEFAULT_BATCH_SIZE
    delta: Optional[float] = None
    loss_normalization: str = "pixels"
    seed: int = 0
    data_dir: str = "data"
    checkpoint_path: str = "srnet.ckpt"
    report_dir: str = "reports"
    val_fraction: float = constants.DEFAULT_VAL_FRACTION
    n_thresholds: int = constants.DEFAULT_N_THRESHOLDS
    beta_squared: float = constants.DEFAULT_BETA_SQUARED

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(item.name for item in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, dict_: Dict[str, Any]) -> RunConfig:
        """
        Creates a config from raw (string or typed) values. Missing keys keep their defaults.

        :raises ConfigError: On an unknown key or a value that does not parse.
        """

        unknown = sorted(set(dict_) - set(_PARSERS))
        if unknown:
            raise ConfigError(f"Unknown config key(s) {unknown}; valid keys are {sorted(_PARSERS)}")

        values = {}
        for key, raw in dict_.items():
            try:
                values[key] = _PARSERS[key](raw)
            except (TypeError, ValueError) as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"Bad value {raw!r} for {key}: {e}") from None
        return cls(**values)

    def as_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in self.keys()}

    def copy(self, **overrides) -> RunConfig:
        """A copy, optionally with some (already parsed or raw) values replaced."""

        values = self.as_dict()
        values.update(overrides)
        return type(self).from_dict(values)

    def dumps(self) -> str:
        """The config in file format; :func:`load_config` reads it back."""

        lines = []
        for key, value in self.as_dict().items():
            if value is None:
                value = "auto"
            elif isinstance(value, tuple):
                value = format_int_list(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    # Derived objects

    def backbone_variant(self) -> BackboneVariant:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, not {self.backbone!r}")
        return BackboneVariant(self.backbone, self.width_divisor)

    def reasoning_config(self) -> ReasoningConfig:
        backbone = self.backbone_variant()
        kwargs = {
            "stage_out_channels": self.stage_channels,
            "stage_dilations": self.stage_dilations,
            "group_count": self.group_count,
            "shuffle_groups": self.shuffle_groups,
        }
        if self.units_per_stage is not None:
            kwargs["units_per_stage"] = self.units_per_stage
        return ReasoningConfig.for_backbone(backbone, **kwargs)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.delta, self.loss_normalization)

    def train_config(self, checkpoint: bool = True) -> TrainConfig:
        return TrainConfig(
            self.epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.loss_config(),
            self.seed,
            checkpoint_path=self.checkpoint_path if checkpoint else None,
        )

    @property
    def input_shape(self) -> Tuple[int, int, int, int]:
        return (1, 3, self.input_size, self.input_size)

    def build(self, materialize: bool = True, reasoning: Optional[ReasoningConfig] = None) -> NetworkGraph:
        return build_variant(
            self.ablation, self.backbone_variant(), reasoning or self.reasoning_config(), self.seed, materialize
        )

    def validate(self) -> RunConfig:
        """
        Checks every setting, including every divisibility rule of the
        network, by building its description (no weights) and inferring shapes.

        :raises ConfigError: On any violation.
        """

        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, not {self.ablation!r}")
        if self.loss_normalization not in NORMALIZATIONS:
            raise ConfigError(f"loss_normalization must be one of {NORMALIZATIONS}, not {self.loss_normalization!r}")
        for key in ("epochs", "batch_size", "input_size", "n_thresholds", "group_count", "shuffle_groups"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, not {getattr(self, key)}")
        for key in ("lr", "beta_squared"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0, not {getattr(self, key)}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"Need 0 <= momentum < 1 and weight_decay >= 0, not {self.momentum}, {self.weight_decay}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), not {self.val_fraction}")

        self.loss_config()
        try:
            self.build(materialize=False).infer_shapes(self.input_shape)
        except (ConvSpecError, ShapeError) as e:
            raise ConfigError(f"The network cannot be built from this config: {e}") from e
        return self


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Parses ``key = value`` lines. ``#`` starts a comment; blank lines are ignored.

    :raises ConfigError: On a line without ``=`` or a repeated key.
    """

    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
        if key in values:
            raise ConfigError(f"{source}:{number}: {key} is set twice")
        values[key] = value.strip()
    return values


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    """Parses ``--set key=value`` arguments."""

    values = {}
    for override in overrides:
        key, sep, value = override.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Overrides look like key=value, not {override!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(
    path: Optional[Union[str, os.PathLike]] = None,
    overrides: Iterable[str] = (),
    **flags: Any,
) -> RunConfig:
    """
    Defaults, then ``path``, then ``overrides`` (``key=value`` strings), then
    ``flags`` whose value is not None. The result is validated.

    :raises ConfigError: If the file cannot be read or any setting is invalid.
    """

    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as file:
                text = file.read()
        except OSError as e:
            raise ConfigError(f"Cannot read config {os.fspath(path)}: {e.strerror or e}") from e
        values.update(parse_config_text(text, os.fspath(path)))
        logger.debug("Read %d settings from %s", len(values), path)

    values.update(parse_overrides(overrides))
    values.update({key: value for key, value in flags.items() if value is not None})
    return RunConfig.from_dict(values).validate()
