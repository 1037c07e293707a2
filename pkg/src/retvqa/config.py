"""Pipeline configuration: JSON document plus dotted-path overrides."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from .synthworld import ConfigError

WORKDIR_ENV = "RETVQA_WORKDIR"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workdir": None,  # falls back to $RETVQA_WORKDIR, then ./retvqa-work
    "K": 2,
    "data": {
        "n_scenes": 3000,
        "n_questions": 8000,
        "pool_size": 10,
        "hard_fraction": 0.0,
        "noise_sigma": 0.1,
        "P": 8,
        "d_in": 64,
        "class_scale": 3.0,
        "split_fractions": [0.8, 0.1, 0.1],
    },
    "relevance": {"d": 64, "n_layers": 3, "n_heads": 8, "m_max": 32, "caption_max": 64},
    "pretrain": {
        "steps": 1500,
        "batch_size": 32,
        "lr": 1e-3,
        "warmup_fraction": 0.02,
        "mask_rate": 0.15,
        "mlm_start": 0.5,
        "keep_prob": 0.0,
    },
    # Full-scale runs used 96/256 train and 360/480 test batches; 32 fits a laptop.
    "finetune": {
        "epochs": 3,
        "batch_size": 32,
        "lr": 5e-4,
        "warmup_fraction": 0.1,
        "neg_per_pos": 3,
        "max_minutes": 7.0,
        "captions": False,
    },
    "generator": {
        "d": 64,
        "n_enc_layers": 2,
        "n_dec_layers": 2,
        "n_heads": 4,
        "m_max": 32,
        "max_answer_len": 24,
    },
    "qa_train": {
        "grounding_epochs": 6,
        "epochs": 30,
        "batch_size": 32,
        "lr": 5e-4,
        "warmup_fraction": 0.05,
        "max_minutes": 20.0,
        "shuffle_images": True,
    },
    "baselines": {
        "answer_vocab": 1000,
        "epochs": 20,
        "batch_size": 32,
        "lr": 1e-3,
        "max_minutes": 10.0,
    },
    # n_questions caps the test questions used by the pool-size sweep (0 = all)
    "ablate": {"pool_sizes": [5, 10, 20, 40], "seeds": [0, 1, 2], "n_questions": 400},
}


def _merge(base: dict, extra: Mapping, path: str = "") -> None:
    for k, v in extra.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {where!r} expects an object")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(raw)


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = (),
                workdir: str | os.PathLike | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge(cfg, doc)
    for o in overrides:
        apply_override(cfg, o)
    if workdir is not None:
        cfg["workdir"] = str(workdir)
    if not cfg["workdir"]:
        cfg["workdir"] = os.environ.get(WORKDIR_ENV) or "retvqa-work"
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def positive(path: str, value) -> None:
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise ConfigError(f"{path} must be a positive number, got {value!r}")

    positive("K", cfg["K"])
    for key in ("n_scenes", "n_questions", "pool_size", "P", "d_in"):
        positive(f"data.{key}", cfg["data"][key])
    if cfg["data"]["pool_size"] < 2:
        raise ConfigError("data.pool_size must leave room for the two relevant images")
    for block in ("relevance", "generator"):
        b = cfg[block]
        if b["d"] % b["n_heads"]:
            raise ConfigError(f"{block}.d={b['d']} is not divisible by {block}.n_heads={b['n_heads']}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")


def dumps(cfg: Mapping) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
