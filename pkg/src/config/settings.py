"""
Run Configuration Management Module

Strict, validated configuration for every command. Defaults come from the
schema below (built on ConfigDefaults); a JSON config file is deep-merged
over them and command-line overrides are applied as dot-path assignments.
Unknown sections or keys, wrong types, out-of-range or disallowed values are
all collected and reported together; nothing falls back silently.

Features:
- Attribute access (cfg.net.base_channels), dot-path get/set, to_dict()
- Per-field validation through ConfigField
- Resolved-config snapshot written atomically into the run directory
- Builders for the domain configuration objects (NetConfig, LossConfig, ...)
- Thread-safe global instance (get_config / reset_config)

Usage:
    config = get_config("config/config.json", overrides=["net.base_channels=8"])
    net = MARMamba(config.net_config(), seed=config.runtime.seed)
    config.snapshot(run_dir)
"""

import copy
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type, Union

from ..core.optim import ScheduleConfig
from ..core.trainer import ProgressivePhase
from ..metrics.losses import LOSS_MODES, LossConfig
from ..models.backbone import NetConfig
from ..models.msmamba import BlockOptions
from ..models.ssm import SsmConfig
from ..synth.dataset import SIZE_GROUPS, CorruptionConfig
from ..utils.errors import ConfigurationError, ConfigurationValidationError
from ..utils.files import atomic_write_json, read_json
from ..utils.logger import get_logger
from .constants import DESK_PHASE_LIST, PAPER_PHASE_LIST, ConfigDefaults

RESOLVED_CONFIG_NAME = "resolved_config.json"
BRANCH_LETTERS = {"n": "normal", "v": "vertical", "h": "horizontal"}
POOL_LETTERS = {"a": "average", "m": "maximum"}


def _letters(allowed: str, required: str = "") -> Callable[[Any], bool]:
    def check(value: str) -> bool:
        return (bool(value) and len(set(value)) == len(value)
                and set(value) <= set(allowed) and set(required) <= set(value))
    return check


def _list_of(kind: Type, length: Optional[int] = None, allowed: Optional[Sequence[Any]] = None,
             minimum: Optional[float] = None) -> Callable[[Any], bool]:
    def check(value: List[Any]) -> bool:
        if length is not None and len(value) != length:
            return False
        for item in value:
            if isinstance(item, bool) or not isinstance(item, kind):
                return False
            if allowed is not None and item not in allowed:
                return False
            if minimum is not None and item < minimum:
                return False
        return True
    return check


def _phase_list(value: List[Any]) -> bool:
    return bool(value) and all(isinstance(p, list) and _list_of(int, 3, minimum=0)(p) for p in value)


@dataclass
class ConfigField:
    """Definition of one configuration key with its validation rules."""
    name: str
    field_type: Type
    default: Any
    description: str = ""
    min_value: Optional[Union[int, float]] = None
    max_value: Optional[Union[int, float]] = None
    allowed_values: Optional[List[Any]] = None
    validation_func: Optional[Callable[[Any], bool]] = None

    def validate(self, value: Any) -> Tuple[bool, str]:
        """
        Validate a value against this field definition.

        Ints are accepted where floats are expected; bools are never accepted
        as numbers.

        Returns:
            Tuple[bool, str]: (is_valid, error_message)
        """
        expected = (int, float) if self.field_type is float else self.field_type
        if isinstance(value, bool) and self.field_type is not bool:
            return False, f"Field '{self.name}' must be of type {self.field_type.__name__}"
        if not isinstance(value, expected):
            return False, f"Field '{self.name}' must be of type {self.field_type.__name__}"

        if self.min_value is not None and value < self.min_value:
            return False, f"Field '{self.name}' must be >= {self.min_value}"
        if self.max_value is not None and value > self.max_value:
            return False, f"Field '{self.name}' must be <= {self.max_value}"
        if self.allowed_values is not None and value not in self.allowed_values:
            return False, f"Field '{self.name}' must be one of {self.allowed_values}"
        if self.validation_func is not None and not self.validation_func(value):
            return False, f"Field '{self.name}' failed validation: {self.description}"
        return True, ""


def _field(section: str, key: str, description: str, **rules: Any) -> ConfigField:
    default, kind = ConfigDefaults.get_default_and_type(section, key)
    return ConfigField(f"{section}.{key}", kind, default, description, **rules)


CONFIG_SCHEMA: Dict[str, Dict[str, ConfigField]] = {
    "net": {
        "base_channels": _field("net", "base_channels", "width D of the first stage", min_value=1),
        "stage_blocks": _field("net", "stage_blocks", "eight non-negative block counts",
                               validation_func=_list_of(int, 8, minimum=0)),
        "branches": _field("net", "branches", "FMB branches as letters from n, v, h (n required)",
                           validation_func=_letters("nvh", "n")),
        "pools": _field("net", "pools", "AMFN pooling paths as letters from a, m",
                        validation_func=_letters("am")),
        "weight_activation": _field("net", "weight_activation", "flipped-branch weighting",
                                    allowed_values=["sigmoid", "identity"]),
        "skip_fusion": _field("net", "skip_fusion", "decoder skip fusion", allowed_values=["concat", "add"]),
        "upsampler": _field("net", "upsampler", "decoder upsampling", allowed_values=["transposed", "nearest"]),
        "head_zero_init": _field("net", "head_zero_init", "zero-initialize the residual head"),
        "norm_eps": _field("net", "norm_eps", "layer norm epsilon", min_value=1e-12),
    },
    "ssm": {
        "d_state": _field("ssm", "d_state", "state size N", min_value=1),
        "expand": _field("ssm", "expand", "inner expansion E", min_value=1),
        "conv_kernel": _field("ssm", "conv_kernel", "depthwise sequence conv width (centred)", min_value=1),
        "dt_min": _field("ssm", "dt_min", "smallest initial step size", min_value=1e-6),
        "dt_max": _field("ssm", "dt_max", "largest initial step size", min_value=1e-6),
        "chunk": _field("ssm", "chunk", "chunked scan length", min_value=1),
        "method": _field("ssm", "method", "scan algorithm", allowed_values=["chunked", "sequential"]),
    },
    "loss": {
        "alpha": _field("loss", "alpha", "pseudo-Huber weight", min_value=0.0),
        "beta": _field("loss", "beta", "perceptual weight", min_value=0.0),
        "c": _field("loss", "c", "pseudo-Huber scale", min_value=1e-12),
        "mode": _field("loss", "mode", "loss terms used", allowed_values=list(LOSS_MODES)),
        "normalize": _field("loss", "normalize", "use the RMS residual instead of the summed norm"),
    },
    "schedule": {
        "lr_max": _field("schedule", "lr_max", "peak learning rate", min_value=0.0),
        "lr_min": _field("schedule", "lr_min", "floor learning rate", min_value=0.0),
        "t_max": _field("schedule", "t_max", "cosine period", min_value=1),
        "mode": _field("schedule", "mode", "restart periodically or one cosine per phase",
                       allowed_values=["restart", "single"]),
    },
    "phases": {
        "preset": _field("phases", "preset", "phase list preset", allowed_values=["desk", "paper", "custom"]),
        "list": _field("phases", "list", "[size, batch, iterations] per phase", validation_func=_phase_list),
    },
    "train": {
        "precision": _field("train", "precision", "tensor precision", allowed_values=["float64", "float32"]),
        "checkpoint_every": _field("train", "checkpoint_every", "checkpoint cadence", min_value=1),
        "keep_last": _field("train", "keep_last", "checkpoints retained", min_value=1),
        "log_every": _field("train", "log_every", "INFO log cadence", min_value=1),
        "adam_beta1": _field("train", "adam_beta1", "Adam first moment decay", min_value=0.0, max_value=0.999999),
        "adam_beta2": _field("train", "adam_beta2", "Adam second moment decay", min_value=0.0, max_value=0.999999),
        "adam_eps": _field("train", "adam_eps", "Adam epsilon", min_value=1e-16),
    },
    "synth": {
        "count": _field("synth", "count", "samples to generate", min_value=1),
        "size": _field("synth", "size", "image size n", min_value=16),
        "n_angles": _field("synth", "n_angles", "projection angles", min_value=2),
        "size_mix": _field("synth", "size_mix", "metal size groups, assigned round-robin",
                           validation_func=lambda v: bool(v) and _list_of(str, allowed=SIZE_GROUPS)(v)),
        "metal_count": _field("synth", "metal_count", "metal objects per sample", min_value=1, max_value=4),
        "gamma": _field("synth", "gamma", "beam-hardening strength", min_value=0.0),
        "cap": _field("synth", "cap", "photon-starvation cap on metal rays", min_value=0.0),
        "noise_fraction": _field("synth", "noise_fraction", "noise std as a fraction of the cap", min_value=0.0),
        "metal_attenuation": _field("synth", "metal_attenuation", "metal attenuation", min_value=1.0),
        "export_pgm": _field("synth", "export_pgm", "write 8-bit PGM previews"),
        "hu_slope": _field("synth", "hu_slope", "HU calibration slope", min_value=1e-6),
        "hu_intercept": _field("synth", "hu_intercept", "HU calibration intercept"),
    },
    "eval": {
        "dilation": _field("eval", "dilation", "metal mask dilation radius in pixels", min_value=0),
        "modes": _field("eval", "modes", "region modes",
                        validation_func=lambda v: bool(v) and _list_of(str, allowed=["non_metal", "metal_included"])(v)),
        "limit": _field("eval", "limit", "evaluate only the first N samples (0 = all)", min_value=0),
    },
    "infer": {
        "tau": _field("infer", "tau", "metal threshold for excise/reinsert"),
        "real_mode": _field("infer", "real_mode", "excise metal before restoring"),
    },
    "analysis": {
        "bins": _field("analysis", "bins", "orientation bins over [0, 180) degrees", min_value=1, max_value=360),
        "annulus": _field("analysis", "annulus", "fractional frequency radii [lo, hi]",
                          validation_func=lambda v: _list_of((int, float), 2, minimum=0.0)(v) and v[0] < v[1]),
        "block": _field("analysis", "block", "analyzed MS-Mamba block, e.g. enc2.0"),
        "hu_lo": _field("analysis", "hu_lo", "render window low end"),
        "hu_hi": _field("analysis", "hu_hi", "render window high end"),
        "gain": _field("analysis", "gain", "error map amplification", min_value=0.0),
        "profile_sizes": _field("analysis", "profile_sizes", "square sizes for profiling",
                                validation_func=lambda v: _list_of(int, minimum=8)(v) and all(s % 8 == 0 for s in v)),
        "profile_repeats": _field("analysis", "profile_repeats", "forward passes per size", min_value=1),
    },
    "logging": {
        "level": _field("logging", "level", "log level",
                        allowed_values=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]),
        "console_output": _field("logging", "console_output", "log to the console"),
        "use_rich_console": _field("logging", "use_rich_console", "rich console handler"),
        "file_output": _field("logging", "file_output", "JSON-lines log files in the run directory"),
        "max_log_size_mb": _field("logging", "max_log_size_mb", "log rotation size", min_value=1),
        "backup_count": _field("logging", "backup_count", "rotated files kept", min_value=0),
    },
    "runtime": {
        "seed": _field("runtime", "seed", "master seed", min_value=0),
        "threads": _field("runtime", "threads", "worker threads for synth and eval", min_value=1),
    },
}


class ConfigSection:
    """A configuration section with attribute and item access."""

    def __init__(self, data: Dict[str, Any], name: str = ""):
        object.__setattr__(self, "_data", data)
        object.__setattr__(self, "_name", name)

    def __getattr__(self, name: str) -> Any:
        if name.startswith("_"):
            return object.__getattribute__(self, name)
        if name in self._data:
            return self._data[name]
        raise AttributeError(f"Configuration section '{self._name}' has no attribute '{name}'")

    def __getitem__(self, key: str) -> Any:
        return self.__getattr__(key)

    def __setattr__(self, name: str, value: Any) -> None:
        raise ConfigurationError("configuration is changed through RunConfig.set", key=f"{self._name}.{name}")

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._data)


def parse_override(text: str) -> Tuple[str, Any]:
    """"net.base_channels=8" -> ("net.base_channels", 8); values parse as JSON, else stay strings."""
    if "=" not in text:
        raise ConfigurationError("override must look like section.key=value", override=text)
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip(), value


class RunConfig:
    """
    Validated run configuration.

    Args:
        config_file: optional JSON file merged over the defaults
        overrides: "section.key=value" strings or a {dot.path: value} mapping
    """

    CONFIG_SCHEMA = CONFIG_SCHEMA

    def __init__(self, config_file: Optional[Union[str, Path]] = None,
                 overrides: Optional[Union[Sequence[str], Dict[str, Any]]] = None):
        self.logger = get_logger(__name__)
        self.config_file = Path(config_file) if config_file else None
        self._config: Dict[str, Dict[str, Any]] = {
            section: {key: copy.deepcopy(f.default) for key, f in fields.items()}
            for section, fields in self.CONFIG_SCHEMA.items()
        }
        errors: List[str] = []
        if self.config_file is not None:
            errors.extend(self._merge(self._load_file(self.config_file)))
        if overrides:
            items = overrides.items() if isinstance(overrides, dict) else map(parse_override, overrides)
            for path, value in items:
                errors.extend(self._assign(path, value))
        errors.extend(self.validate())
        if errors:
            raise ConfigurationValidationError("invalid configuration", errors=errors)
        self._resolve_phases()
        self.logger.debug("Configuration loaded", file=str(self.config_file) if self.config_file else None)

    @staticmethod
    def _load_file(path: Path) -> Dict[str, Any]:
        if not path.is_file():
            raise ConfigurationError("config file not found", path=str(path))
        try:
            payload = read_json(path)
        except ValueError as e:
            raise ConfigurationError(f"config file is not valid JSON: {e}", path=str(path)) from e
        if not isinstance(payload, dict):
            raise ConfigurationError("config file must hold a JSON object", path=str(path))
        return payload

    def _merge(self, user: Dict[str, Any]) -> List[str]:
        errors = []
        for section, values in user.items():
            if section not in self.CONFIG_SCHEMA:
                errors.append(f"Unknown section '{section}'")
                continue
            if not isinstance(values, dict):
                errors.append(f"Section '{section}' must be an object")
                continue
            for key, value in values.items():
                errors.extend(self._assign(f"{section}.{key}", value))
        return errors

    def _assign(self, path: str, value: Any) -> List[str]:
        parts = path.split(".")
        if len(parts) != 2:
            return [f"Key '{path}' must be section.key"]
        section, key = parts
        if section not in self.CONFIG_SCHEMA:
            return [f"Unknown section '{section}'"]
        if key not in self.CONFIG_SCHEMA[section]:
            return [f"Unknown key '{path}'"]
        self._config[section][key] = copy.deepcopy(value)
        if path == "phases.list":
            self._config["phases"]["preset"] = "custom"
        return []

    def validate(self) -> List[str]:
        errors = []
        for section, fields in self.CONFIG_SCHEMA.items():
            for key, f in fields.items():
                ok, message = f.validate(self._config[section][key])
                if not ok:
                    errors.append(message)
        if not errors:
            if self._config["ssm"]["dt_min"] > self._config["ssm"]["dt_max"]:
                errors.append("ssm.dt_min must not exceed ssm.dt_max")
            if self._config["schedule"]["lr_min"] > self._config["schedule"]["lr_max"]:
                errors.append("schedule.lr_min must not exceed schedule.lr_max")
            if self._config["analysis"]["hu_lo"] >= self._config["analysis"]["hu_hi"]:
                errors.append("analysis.hu_lo must be below analysis.hu_hi")
        return errors

    def _resolve_phases(self) -> None:
        preset = self._config["phases"]["preset"]
        if preset == "paper":
            self._config["phases"]["list"] = copy.deepcopy(PAPER_PHASE_LIST)
        elif preset == "desk":
            self._config["phases"]["list"] = copy.deepcopy(DESK_PHASE_LIST)

    def __getattr__(self, name: str) -> ConfigSection:
        if name.startswith("_"):
            return object.__getattribute__(self, name)
        config = object.__getattribute__(self, "_config")
        if name in config:
            return ConfigSection(config[name], name)
        raise AttributeError(f"Unknown configuration section '{name}'")

    def __getitem__(self, section: str) -> ConfigSection:
        return self.__getattr__(section)

    def get(self, key_path: str) -> Any:
        section, _, key = key_path.partition(".")
        if section not in self._config or key not in self._config[section]:
            raise ConfigurationError("unknown configuration key", key=key_path)
        return copy.deepcopy(self._config[section][key])

    def set(self, key_path: str, value: Any) -> None:
        """Assign and re-validate; the previous value is restored on failure."""
        section, _, key = key_path.partition(".")
        previous = copy.deepcopy(self._config.get(section, {}).get(key))
        preset = self._config["phases"]["preset"]
        errors = self._assign(key_path, value)
        if errors:
            raise ConfigurationValidationError("invalid configuration", errors=errors)
        errors = self.validate()
        if errors:
            self._config[section][key] = previous
            self._config["phases"]["preset"] = preset
            raise ConfigurationValidationError("invalid configuration", errors=errors)
        if key_path == "phases.preset":
            self._resolve_phases()

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    def snapshot(self, run_dir: Union[str, Path]) -> Path:
        path = atomic_write_json(Path(run_dir) / RESOLVED_CONFIG_NAME, self.to_dict())
        self.logger.debug("Resolved configuration written", path=str(path))
        return path

    # =========================================================================
    # Domain configuration builders
    # =========================================================================

    def ssm_config(self) -> SsmConfig:
        return SsmConfig(**self._config["ssm"])

    def net_config(self) -> NetConfig:
        net = self._config["net"]
        block = BlockOptions(
            branches=tuple(BRANCH_LETTERS[c] for c in "nvh" if c in net["branches"]),
            weight_activation=net["weight_activation"],
            pools=tuple(POOL_LETTERS[c] for c in "am" if c in net["pools"]),
            ssm=self.ssm_config(),
            norm_eps=net["norm_eps"],
        )
        return NetConfig(base_channels=net["base_channels"], stage_blocks=tuple(net["stage_blocks"]),
                         skip_fusion=net["skip_fusion"], upsampler=net["upsampler"],
                         head_zero_init=net["head_zero_init"], block=block)

    def loss_config(self) -> LossConfig:
        return LossConfig(**self._config["loss"])

    def phases(self) -> List[ProgressivePhase]:
        return [ProgressivePhase(*p) for p in self._config["phases"]["list"]]

    def schedule_config(self) -> ScheduleConfig:
        s = self._config["schedule"]
        total = max(p[2] for p in self._config["phases"]["list"]) if s["mode"] == "single" else None
        return ScheduleConfig(lr_max=s["lr_max"], lr_min=s["lr_min"], t_max=s["t_max"], mode=s["mode"],
                              total=max(1, total) if total is not None else None)

    def corruption_config(self) -> CorruptionConfig:
        s = self._config["synth"]
        return CorruptionConfig(gamma=s["gamma"], cap=s["cap"], noise_fraction=s["noise_fraction"],
                                metal_attenuation=s["metal_attenuation"])

    def calibration(self) -> Dict[str, float]:
        return {"slope": self._config["synth"]["hu_slope"], "intercept": self._config["synth"]["hu_intercept"]}


# Global configuration instance management
_config_instance: Optional[RunConfig] = None
_config_lock = threading.Lock()


def get_config(config_file: Optional[Union[str, Path]] = None,
               overrides: Optional[Union[Sequence[str], Dict[str, Any]]] = None) -> RunConfig:
    """Return the global configuration, creating it on first use."""
    global _config_instance
    with _config_lock:
        if _config_instance is None:
            _config_instance = RunConfig(config_file, overrides)
        return _config_instance


def reset_config() -> None:
    global _config_instance
    with _config_lock:
        _config_instance = None
