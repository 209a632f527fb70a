"""Experiment configuration: sectioned key = value text files.

Precedence, lowest to highest: built-in defaults, config file, the
``WINGLOSS_OUTPUT_DIR`` environment variable (output directory only),
command-line flags.

All randomness derives from ``[experiment] seed`` through
:func:`derive_seed`, which hashes the root seed with a purpose label.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import io
import os

OUTPUT_ENV = "WINGLOSS_OUTPUT_DIR"

DEFAULTS = {
    "experiment": {"seed": 0, "name": "run"},
    "dataset": {
        "source": "synthetic",
        "symmetry": "",
        "n_samples": 2000,
        "n_landmarks": 5,
        "image_size": 32,
        "pose_distribution": "uniform",
        "roll_range": 0.0,
        "bbox_mode": "image",
        "eval_samples": 500,
    },
    "loss": {"kind": "wing", "w": 10.0, "epsilon": 2.0},
    "network": {"layers": "conv16,relu,pool,conv32,relu,pool,conv64,relu,pool,fc128,relu",
                "input_size": 32, "coord_units": "pixels"},
    "train": {
        "lr": 3e-4,
        "lr_final": 3e-6,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "batch_size": 8,
        "iterations": 2000,
    },
    "pdb": {
        "enabled": False,
        "bins": 9,
        "fill": "max",
        "pose_component": 0,
        "max_rotation": 30.0,
        "flip_probability": 0.5,
        "max_jitter": 0.05,
        "blur_probability": 0.5,
        "blur_sigma": 1.0,
    },
    "pipeline": {"two_stage": False, "input_size2": 32, "margin": 0.2, "stage2_rotation": 10.0},
    "eval": {"rule": "bbox"},
    "output": {"dir": "runs"},
}

# L2 gradients grow with the residual, so it gets a 10x smaller schedule.
L2_LR_FACTOR = 0.1


class ConfigError(ValueError):
    pass


def derive_seed(root: int, purpose: str) -> int:
    """Stable 63-bit seed for ``purpose`` derived from the root seed."""
    digest = hashlib.sha256(f"{int(root)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _coerce(default, text, where):
    if isinstance(default, bool):
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {text!r}") from None
    return str(text).strip()


class ExperimentConfig:
    """Typed view over the sectioned settings; ``cfg["train"]["lr"]``."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        self.argv = None
        for section, items in (values or {}).items():
            for key, val in items.items():
                self.set(section, key, val)

    def __getitem__(self, section):
        return self.values[section]

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _coerce(DEFAULTS[section][key], value, f"[{section}] {key}")

    def override(self, assignment):
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
        lhs, value = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key, value.strip())

    @classmethod
    def from_text(cls, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            if section == "cli":
                continue
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            return cls.from_text(fh.read(), source=path)

    def apply_env(self, environ=None):
        environ = os.environ if environ is None else environ
        if environ.get(OUTPUT_ENV):
            self.values["output"]["dir"] = environ[OUTPUT_ENV]
        return self

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, items in self.values.items():
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in items.items()}
        if self.argv is not None:
            parser["cli"] = {"argv": " ".join(self.argv)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def seed(self, purpose) -> int:
        return derive_seed(self["experiment"]["seed"], purpose)

    def lr_schedule(self, loss_kind=None):
        """``(lr, lr_final)`` for a loss; L2 gets the reduced schedule."""
        kind = (loss_kind or self["loss"]["kind"]).lower()
        lr, lr_final = self["train"]["lr"], self["train"]["lr_final"]
        if kind == "l2":
            return lr * L2_LR_FACTOR, lr_final * L2_LR_FACTOR
        return lr, lr_final

    def validate(self):
        from .losses import make_loss

        try:
            make_loss(self["loss"]["kind"], self["loss"]["w"], self["loss"]["epsilon"])
        except ValueError as exc:
            raise ConfigError(f"[loss] {exc}") from None
        if self["pdb"]["fill"] not in ("max", "mean"):
            raise ConfigError("[pdb] fill must be 'max' or 'mean'")
        if self["pdb"]["bins"] < 1:
            raise ConfigError("[pdb] bins must be positive")
        if self["network"]["coord_units"] not in ("pixels", "normalized"):
            raise ConfigError("[network] coord_units must be 'pixels' or 'normalized'")
        if not 0 <= self["train"]["momentum"] < 1:
            raise ConfigError("[train] momentum must lie in [0, 1)")
        for key in ("batch_size", "iterations"):
            if self["train"][key] < 1:
                raise ConfigError(f"[train] {key} must be positive")
        src = self["dataset"]["source"]
        if src != "synthetic" and not os.path.exists(src):
            raise ConfigError(f"dataset manifest not found: {src}")
        return self
