"""Flat ``key = value`` experiment configuration.

Resolution order, last wins: built-in defaults, config file, ``MKGC_*``
environment variables, command-line overrides.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Mapping

from .evaluation import EvalConfig
from .model import ModelConfig
from .objectives import LossWeights
from .training import TrainConfig

ENV_PREFIX = "MKGC_"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type, default)
SCHEMA: dict[str, tuple[type, Any]] = {
    "data_dir": (str, "data"),
    "out_dir": (str, "runs/default"),
    "seed": (int, 0),
    "tokenizer": (str, "char"),
    "split_ratios": (str, "0.8,0.1,0.1"),
    # model
    "n_layers": (int, 2),
    "n_heads": (int, 4),
    "d_model": (int, 64),
    "d_ff": (int, 256),
    "max_seq_len": (int, 35),
    "mask_mode": (str, "paper"),
    "tie_embeddings": (bool, True),
    # training
    "lr": (float, 3e-4),
    "batch_size": (int, 128),
    "epochs": (int, 50),
    "optimizer": (str, "adam"),
    "checkpoint_every": (int, 0),
    "eval_every": (int, 0),
    "patience": (int, 0),
    "component_grad_norms": (bool, True),
    # losses
    "alpha": (float, 0.001),
    "beta": (float, 0.005),
    "gamma": (float, 0.0),
    "score_variant": (str, "transe_l1"),
    "global_margin": (bool, False),
    "jsd_form": (str, "standard"),
    # evaluation
    "beam_width": (int, 10),
    "candidates": (str, "language"),
    "filtered": (bool, False),
    "length_threshold": (int, 10),
    "eval_split": (str, "test"),
    "eval_mode": (str, "kgc"),
}


def _coerce(key: str, raw) -> Any:
    if key not in SCHEMA:
        raise ConfigError(key, "unknown configuration key")
    typ, _ = SCHEMA[key]
    if not isinstance(raw, str):
        return typ(raw)
    try:
        return _bool(raw) if typ is bool else typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve(path=None, overrides: Mapping[str, Any] | None = None,
            env: Mapping[str, str] | None = None) -> dict[str, Any]:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {path}")
        cfg.update(parse_text(p.read_text(encoding="utf-8"), str(path)))
    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            cfg[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    try:
        build_weights(cfg)
        train_config(cfg)
        eval_config(cfg)
        model_config(cfg, 1)
        ratios(cfg)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(_guess_key(str(exc)), str(exc)) from None
    if cfg["tokenizer"] not in ("char", "word"):
        raise ConfigError("tokenizer", "must be 'char' or 'word'")


def _guess_key(message: str) -> str:
    for key in SCHEMA:
        if message.startswith(key) or f" {key} " in f" {message} ":
            return key
    return "config"


def dump(cfg: Mapping[str, Any]) -> str:
    def fmt(v):
        return ("true" if v else "false") if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in SCHEMA)


def ratios(cfg) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in str(cfg["split_ratios"]).split(","))
    except ValueError:
        raise ConfigError("split_ratios", "expected three comma-separated numbers") from None
    if len(parts) != 3:
        raise ConfigError("split_ratios", "expected three comma-separated numbers")
    return parts


def build_weights(cfg) -> LossWeights:
    return LossWeights(alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"],
                       score_variant=cfg["score_variant"], global_margin=cfg["global_margin"],
                       jsd_form=cfg["jsd_form"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                       optimizer=cfg["optimizer"], weights=build_weights(cfg), mask_mode=cfg["mask_mode"],
                       checkpoint_every=cfg["checkpoint_every"], eval_every=cfg["eval_every"],
                       patience=cfg["patience"], component_grad_norms=cfg["component_grad_norms"])


def model_config(cfg, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
                       d_model=cfg["d_model"], d_ff=cfg["d_ff"], max_seq_len=cfg["max_seq_len"],
                       mask_mode=cfg["mask_mode"], tie_embeddings=cfg["tie_embeddings"])


def eval_config(cfg) -> EvalConfig:
    return EvalConfig(beam_width=cfg["beam_width"], candidates=cfg["candidates"], filtered=cfg["filtered"],
                      length_threshold=cfg["length_threshold"], split=cfg["eval_split"], mode=cfg["eval_mode"])


# Table-5 style ablations
ABLATIONS = {
    "local": {"beta": 0.0},
    "global": {"alpha": 0.0},
    "mask": {"mask_mode": "no_mask"},
}
SCORES = {"transe": "transe_l1", "transe_l1": "transe_l1", "transe_l2": "transe_l2",
          "rotate": "rotate", "complex": "complex"}
