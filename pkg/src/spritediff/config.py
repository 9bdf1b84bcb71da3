"""Run configuration: sectioned key/value files with defaults and overrides.

Config files are plain INI text (``[section]`` headers, ``key = value``
lines) read with configparser. Every key has a default; values are coerced
to the default's type; unknown sections or keys are rejected by name.
Precedence is flags > config file > defaults. The resolved configuration is
echoed into every output directory.
"""

from __future__ import annotations

import configparser
import io
import json
import os
import subprocess
from typing import Optional, Sequence

from . import __version__


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


DEFAULTS: dict[str, dict] = {
    "data": {
        "num_scenes": 200,
        "num_frames": 8,
        "height": 32,
        "width": 64,
        "min_subjects": 1,
        "max_subjects": 4,
        "val_fraction": 0.2,
        "seed": 0,
    },
    "codec": {
        "steps": 5000,
        "encoder_steps": 800,
        "seed": 0,
    },
    "model": {
        "timesteps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "schedule": "linear",
        "base_channels": 64,
        "channel_multipliers": [1, 2],
        "attention_levels": [0, 1],
        "text_dim": 128,
        "num_heads": 4,
        "gate_init": 0.0,
        "codebook_size": 64,
        "num_freqs": 8,
        "max_len": 32,
        "downsample_factor": 4,
        "latent_channels": 4,
        "codec_base_channels": 24,
    },
    "train": {
        "stage": "image",
        "steps": 1000,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "seed": 0,
        "condition_dropout": 0.1,
    },
    "sample": {
        "steps": 25,
        "num_clips": 4,
        "external_ratio": 0.5,
        "guidance_scale": 1.0,
        "seed": 0,
    },
    "eval": {
        "seed": 0,
        "num_clips": 6,
        "repeats": 2,
        "ddim_steps": 25,
        "external_ratio": 0.5,
        "probe_steps": 500,
        "fid_min_frames": 64,
    },
    "scale": {
        "real_count": 24,
        "synthetic_counts": [2, 6],
        "bank_modes": ["internal_only", "mixed"],
        "seeds": [0, 1, 2, 3, 4],
        "probe_steps": 400,
        "ddim_steps": 25,
    },
}


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = default[0] if default else "x"
            return [int(s) if isinstance(elem, int) else s for s in items]
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"cannot parse {section}.{key}={raw!r}")


def resolve_config(
    path: Optional[str] = None, overrides: Sequence[str] = ()
) -> dict[str, dict]:
    """Defaults, then file, then ``section.key=value`` override strings."""
    cfg = {s: dict(vals) for s, vals in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(section, f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"{section}.{key}", f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(ov, f"override must look like section.key=value, got {ov!r}")
        dotted, raw = ov.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"{section}.{key}", f"unknown config key {section}.{key}")
        cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    return cfg


def render_config(cfg: dict[str, dict]) -> str:
    buf = io.StringIO()
    for section in sorted(cfg):
        buf.write(f"[{section}]\n")
        for key in sorted(cfg[section]):
            value = cfg[section][key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            buf.write(f"{key} = {value}\n")
        buf.write("\n")
    return buf.getvalue()


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"spritediff-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"spritediff-{__version__}"


def atomic_write_text(path: str, content: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(content)
    os.replace(tmp, path)


def write_run_metadata(out_dir: str, cfg: dict[str, dict], command: str, extra: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "config_echo.ini"), render_config(cfg))
    meta = {"version": version_string(), "command": command}
    meta.update(extra or {})
    atomic_write_text(os.path.join(out_dir, "run_meta.json"), json.dumps(meta, indent=1, sort_keys=True))
