"""TOML configuration: strict loading, defaults, and round-trip dumping.

Sections mirror the module layout.  Unknown sections or keys are rejected;
missing ones fall back to the defaults below, which follow the standard
4-channel / 72-direction / 512-sample setup used throughout.
"""

import copy
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .em import EmConfig
from .errors import ConfigError
from .signal import StftConfig
from .spatial import ArrayGeometry, DirectionGrid

_CIRCULAR_4CH = [
    [0.04, 0.0, 0.0],
    [0.0, 0.04, 0.0],
    [-0.04, 0.0, 0.0],
    [0.0, -0.04, 0.0],
]

DEFAULTS = {
    "geometry": {
        "mic_positions": _CIRCULAR_4CH,
        "speed_of_sound": 343.0,
    },
    "grid": {
        "start_deg": 0.0,
        "step_deg": 5.0,
        "count": 72,
    },
    "stft": {
        "window_len": 512,
        "hop": 128,
        "window": "hann",
    },
    "em": {
        "n_sources": 2,
        "directional_classes": 6,
        "n_iters": 50,
        "dof": 0.0,  # 0 means n_mics + 5
        "diag_loading": 1e-2,
        "power_floor": 1e-8,
        "posterior_floor": 1e-12,
        "convergence_tol": 0.0,  # 0 disables the early stop
        "prior_scale_numerator": "template",
    },
    "training": {
        "lr": 1e-3,
        "batch_size": 8,
        "epochs": 20,
        "omega_stop_gradient": False,
        "seed": 0,
        "hidden": 128,
        "context": 2,
    },
    "simulate": {
        "n_scenes": 10,
        "n_sources": 2,
        "duration_s": 2.0,
        "sample_rate": 8000,
        "snr_db": 30.0,
        "kind": "planewave",
        "min_separation_deg": 0.0,
        "max_separation_deg": 180.0,
        "source_kinds": list(("bandnoise", "am_tone", "speech_noise")),
        "level_range_db": 5.0,
        "seed": 0,
    },
    "paths": {
        "out_dir": ".",
        "manifest": "",
        "checkpoint": "",
    },
}


def _check_type(section, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:  # pragma: no cover - defaults table only holds the above
        ok = True
    if not ok:
        raise ConfigError(
            f"config key {section}.{key} expects {type(default).__name__}, "
            f"got {type(value).__name__}"
        )
    return value


class Config:
    """Validated configuration with typed builders for the module objects."""

    def __init__(self, data=None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            for section, keys in data.items():
                if section not in self.data:
                    raise ConfigError(f"unknown config section [{section}]")
                if not isinstance(keys, dict):
                    raise ConfigError(f"section [{section}] must hold key/value pairs")
                for key, value in keys.items():
                    if key not in self.data[section]:
                        raise ConfigError(f"unknown config key {section}.{key}")
                    self.data[section][key] = _check_type(
                        section, key, value, DEFAULTS[section][key]
                    )

    def __getitem__(self, section):
        return self.data[section]

    def set(self, dotted_key, raw_value):
        """Apply one 'section.key=value' override; values parse as TOML."""
        if "." not in dotted_key:
            raise ConfigError(f"override key must be section.key, got {dotted_key!r}")
        section, key = dotted_key.split(".", 1)
        if section not in self.data or key not in self.data[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        try:
            parsed = tomllib.loads(f"value = {raw_value}")["value"]
        except tomllib.TOMLDecodeError:
            parsed = raw_value
        self.data[section][key] = _check_type(
            section, key, parsed, DEFAULTS[section][key]
        )

    # -- builders -----------------------------------------------------------

    def geometry(self):
        return ArrayGeometry(
            np.asarray(self["geometry"]["mic_positions"], dtype=np.float64),
            self["geometry"]["speed_of_sound"],
        )

    def grid(self):
        g = self["grid"]
        return DirectionGrid(g["start_deg"], g["step_deg"], g["count"])

    def stft_config(self):
        s = self["stft"]
        return StftConfig(s["window_len"], s["hop"], s["window"])

    def em_config(self):
        e = self["em"]
        return EmConfig(
            n_iters=e["n_iters"],
            power_floor=e["power_floor"],
            posterior_floor=e["posterior_floor"],
            convergence_tol=e["convergence_tol"] or None,
        )

    def dof(self, n_mics):
        value = self["em"]["dof"]
        return float(value) if value else n_mics + 5.0

    # -- serialization ------------------------------------------------------

    def to_toml(self):
        lines = []
        for section, keys in self.data.items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                lines.append(f"{key} = {_format_toml(value)}")
            lines.append("")
        return "\n".join(lines)

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_toml())


def _format_toml(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, list):
        return "[" + ", ".join(_format_toml(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value of type {type(value).__name__}")


def load_config(path=None, overrides=None) -> Config:
    """Load a TOML config file (all keys optional) and apply overrides."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    cfg = Config(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        cfg.set(dotted.strip(), raw.strip())
    return cfg
