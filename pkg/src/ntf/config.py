"""Flat ``key=value`` run configuration with schema validation.

A config file has one ``key = value`` pair per line; ``#`` starts a comment.
Values from the command line are merged on top, so flags win. Every key
must be in :data:`SCHEMA`; anything else is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import AugmentConfig
from .errors import ConfigError, ContractError
from .losses import LossConfig
from .model import EncoderConfig
from .train import STAGE1_EPOCHS, STAGE2_EPOCHS, StageConfig


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(p) for p in text.replace(",", " ").split())


# key -> (parser, section, attribute name)
SCHEMA = {
    "epochs": (int, "stage", "epochs"),
    "preset": (str, "run", "preset"),
    "seed": (int, "stage", "seed"),
    "batch_n": (int, "stage", "batch_n"),
    "batch_real": (int, "stage", "batch_real"),
    "batch_fake": (int, "stage", "batch_fake"),
    "lr": (float, "stage", "lr"),
    "momentum": (float, "stage", "momentum"),
    "weight_decay": (float, "stage", "weight_decay"),
    "lr_schedule": (str, "stage", "lr_schedule"),
    "reduction": (str, "stage", "reduction"),
    "checkpoint_every": (int, "stage", "checkpoint_every"),
    "checkpoint_dir": (str, "stage", "checkpoint_dir"),
    "tau": (float, "loss", "tau"),
    "lambda": (float, "loss", "lam"),
    "gamma": (float, "loss", "gamma"),
    "ort_mode": (str, "loss", "ort_mode"),
    "enable_het": (_bool, "loss", "enable_het"),
    "enable_ort": (_bool, "loss", "enable_ort"),
    "ext_use_aux": (_bool, "loss", "ext_use_aux"),
    "ext_log": (_bool, "loss", "ext_log"),
    "ext_weight": (float, "loss", "ext_weight"),
    "aux_mode": (str, "loss", "aux_mode"),
    "hom_smooth": (float, "loss", "hom_smooth"),
    "crop_size": (int, "augment", "crop_size"),
    "flip_prob": (float, "augment", "flip_prob"),
    "brightness_jitter": (float, "augment", "brightness_jitter"),
    "input_size": (int, "encoder", "input_size"),
    "channels": (_int_list, "encoder", "channels"),
    "kernel": (int, "encoder", "kernel"),
    "threshold": (float, "run", "threshold"),
}


def parse_config_text(text, source="<config>"):
    """Parse ``key=value`` lines into a dict of typed values."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        values[key] = _coerce(key, value.strip(), f"{source}:{lineno}")
    return values


def _coerce(key, value, where):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_config_text(text, source=str(path))


def parse_overrides(pairs):
    """``["k=v", ...]`` from repeated ``--set`` flags."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = _coerce(key.strip(), value.strip(), "--set")
    return out


@dataclass
class RunConfig:
    """Merged file and flag values, turned into the library's config objects."""

    values: dict = field(default_factory=dict)

    @classmethod
    def merge(cls, file_values=None, flag_values=None):
        merged = dict(file_values or {})
        for k, v in (flag_values or {}).items():
            if v is not None:
                if k not in SCHEMA:
                    raise ConfigError(f"unknown config key {k!r}")
                merged[k] = v
        return cls(merged)

    def section(self, name):
        return {SCHEMA[k][2]: v for k, v in self.values.items() if SCHEMA[k][1] == name}

    def get(self, key, default=None):
        return self.values.get(key, default)

    def stage_config(self, stage):
        run = self.section("run")
        preset = run.get("preset", "desk")
        table = STAGE1_EPOCHS if stage == 1 else STAGE2_EPOCHS
        if preset not in table:
            raise ConfigError(f"preset must be one of {sorted(table)}, got {preset!r}")
        try:
            stage_kw = {"epochs": table[preset], **self.section("stage")}
            return StageConfig(
                loss=LossConfig(**self.section("loss")),
                augment=AugmentConfig(**self.section("augment")),
                **stage_kw,
            )
        except (ContractError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def encoder_config(self):
        enc = self.section("encoder")
        if "channels" in enc:
            enc["embed_dim"] = enc["channels"][-1]
        try:
            return EncoderConfig(**enc)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
