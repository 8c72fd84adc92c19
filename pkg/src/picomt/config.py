"""Flat `key = value` run configuration files.

One statement per line, `#` starts a full-line comment, keys are snake_case.
Unknown keys are rejected so typos fail fast, and every input path is checked
before any work starts.  The canonical text rendering (sorted keys) is what
gets embedded in checkpoints.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

from .errors import ConfigError

_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*$")


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"{origin}:{lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_kv_text(fh.read(), origin=path)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e


def canonical_text(values: dict) -> str:
    return "\n".join(f"{k} = {values[k]}" for k in sorted(values)) + "\n"


def _to_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"key {key!r} needs an integer, got {raw!r}") from None


def _to_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r} needs a number, got {raw!r}") from None


def _to_bool(key, raw):
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"key {key!r} needs true/false, got {raw!r}")


_PARSERS = {int: _to_int, float: _to_float, bool: _to_bool, str: lambda _k, raw: raw}

_REQUIRED = object()


def extract(values: dict[str, str], schema: dict[str, tuple], origin: str) -> dict:
    """Apply a {key: (type, default)} schema; unknown keys are an error."""
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise ConfigError(f"{origin}: unknown keys: {', '.join(unknown)}")
    out = {}
    for key, (typ, default) in schema.items():
        if key in values:
            out[key] = _PARSERS[typ](key, values[key])
        elif default is _REQUIRED:
            raise ConfigError(f"{origin}: missing required key {key!r}")
        else:
            out[key] = default
    return out


def require_file(path: str, what: str):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} does not exist: {path}")


TRAIN_SCHEMA: dict[str, tuple] = {
    # data
    "train_src": (str, _REQUIRED),
    "train_tgt": (str, _REQUIRED),
    "dev_src": (str, _REQUIRED),
    "dev_ref": (str, _REQUIRED),
    "src_vocab": (str, _REQUIRED),
    "tgt_vocab": (str, _REQUIRED),
    "checkpoint_dir": (str, _REQUIRED),
    # model
    "layers": (int, 6),
    "heads": (int, 8),
    "d_model": (int, 512),
    "d_ff": (int, 2048),
    "dropout": (float, 0.3),
    "provider_kind": (str, "lookup"),
    "lm_checkpoint": (str, ""),
    "max_positions": (int, 512),
    "norm_placement": (str, "pre"),
    # optimization
    "batch_sentences": (int, 100),
    "epochs": (int, 250),
    "label_smoothing": (float, 0.1),
    "lr": (float, 1e-4),
    "seed": (int, None),
    "dev_beam": (int, 12),
    "grad_clip": (float, 1.0),
    "warmup_steps": (int, 0),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "weight_decay": (float, 0.0),
    "length_norm": (bool, False),
    "keep_all_checkpoints": (bool, False),
    "render_figures": (bool, True),
}

LM_SCHEMA: dict[str, tuple] = {
    "corpus": (str, _REQUIRED),
    "vocab": (str, _REQUIRED),
    "checkpoint_dir": (str, _REQUIRED),
    "layers": (int, 6),
    "heads": (int, 8),
    "d_model": (int, 512),
    "d_ff": (int, 2048),
    "max_positions": (int, 512),
    "dropout": (float, 0.1),
    "norm_placement": (str, "pre"),
    "mask_prob": (float, 0.15),
    "mask_token_prob": (float, 0.8),
    "random_token_prob": (float, 0.1),
    "keep_prob": (float, 0.1),
    "batch_sentences": (int, 100),
    "epochs": (int, 100),
    "lr": (float, 1e-4),
    "warmup_steps": (int, 30000),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-6),
    "weight_decay": (float, 0.01),
    "grad_clip": (float, 1.0),
    "valid_fraction": (float, 0.005),
    "seed": (int, None),
    "keep_all_checkpoints": (bool, False),
    "render_figures": (bool, True),
}


@dataclass
class RunConfig:
    """A validated configuration: parsed values plus the canonical snapshot."""

    values: dict
    text: str

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None


def load_run_config(path: str, schema: dict[str, tuple], input_keys: tuple[str, ...]) -> RunConfig:
    raw = parse_kv_file(path)
    values = extract(raw, schema, origin=path)
    for key in input_keys:
        if values[key]:
            require_file(values[key], f"config key {key!r}")
    return RunConfig(values=values, text=canonical_text(values))


def load_train_config(path: str) -> RunConfig:
    cfg = load_run_config(
        path, TRAIN_SCHEMA,
        input_keys=("train_src", "train_tgt", "dev_src", "dev_ref", "src_vocab", "tgt_vocab"),
    )
    if cfg.provider_kind == "frozen_lm":
        if not cfg.lm_checkpoint:
            raise ConfigError(f"{path}: provider_kind=frozen_lm requires lm_checkpoint")
        require_file(cfg.lm_checkpoint, "config key 'lm_checkpoint'")
    elif cfg.provider_kind != "lookup":
        raise ConfigError(f"{path}: provider_kind must be lookup or frozen_lm")
    return cfg


def load_lm_config(path: str) -> RunConfig:
    return load_run_config(path, LM_SCHEMA, input_keys=("corpus", "vocab"))


def resolve_seed(cli_seed: int | None, config_seed: int | None, default: int = 1) -> int:
    """--seed beats the config file, which beats the SEED environment variable."""
    if cli_seed is not None:
        return cli_seed
    if config_seed is not None:
        return config_seed
    env = os.environ.get("SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SEED environment variable is not an integer: {env!r}") from None
    return default
