"""Run configuration: one JSON document per run, schema-validated, with
dotted-path overrides and a digest that pins everything that affects the
numbers (the network section and output directory stay out of the digest so
peers and re-runs can differ there).
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Optional

from .harness import Session
from .models import ModelConfig
from .optim import OptimConfig
from .sites import QuantConfig
from .tasks import Task, TaskSpec


class ConfigError(ValueError):
    pass


# field -> (default, type); bool is checked before int (bool is an int in python)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "arch": ("transformer", str),
        "d_model": (16, int),
        "n_layers": (2, int),
        "n_heads": (2, int),
        "max_seq_len": (48, int),
        "split": ([0, 2], list),
        "tuning": ("lora", str),
        "lora_rank": (8, int),
        "lora_alpha": (16.0, float),
        "init_scale": (1.0, float),
    },
    "task": {
        "name": ("char_lm", str),
        "seed": (1, int),
        "train_size": (512, int),
        "eval_size": (64, int),
        "seq_len": (48, int),
        "d_in": (16, int),
    },
    "optim": {
        "model_lr": (1e-4, float),
        "bits_lr": (1e-2, float),
        "beta": (0.02, float),
        "optimizer": ("adamw", str),
        "beta1": (0.9, float),
        "beta2": (0.999, float),
        "eps": (1e-8, float),
        "weight_decay": (0.0, float),
        "steps": (1000, int),
        "batch_size": (16, int),
        "seed": (0, int),
        "clip_norm": (1.0, float),
        "schedule_decay": (None, float),
    },
    "quant": {
        "mode": ("none", str),
        "bits": (4.0, float),
        "granularity": ("channel", str),
        "group_size": (None, int),
        "b_min": (1.0, float),
        "b_max": (16.0, float),
        "b_init": (8.0, float),
        "target": (4.0, float),
        "alpha": (1.0, float),
        "clip": (True, bool),
        "clip_mode": ("mean_gate", str),
        "axis": ("channel", str),
        "sites": ("boundary_only", str),
    },
    "network": {
        "role": ("local", str),
        "listen": ("127.0.0.1:7440", str),
        "connect": ("127.0.0.1:7440", str),
    },
}

TOP_LEVEL_EXTRAS = {"out_dir": (None, str)}


def default_config() -> dict:
    doc = {sect: {k: copy.deepcopy(v[0]) for k, v in fields.items()} for sect, fields in SCHEMA.items()}
    doc["out_dir"] = None
    return doc


def _check_type(path: str, value, want):
    if value is None:
        return None
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if want is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported schema type {want}")


def validate_config(doc: dict) -> dict:
    """Full document with defaults filled in; unknown keys rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    out = default_config()
    for section, payload in doc.items():
        if section in TOP_LEVEL_EXTRAS:
            out[section] = _check_type(section, payload, TOP_LEVEL_EXTRAS[section][1])
            continue
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(payload, dict):
            raise ConfigError(f"{section}: expected an object")
        for key, value in payload.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = _check_type(f"{section}.{key}", value, SCHEMA[section][key][1])
    return out


def apply_override(doc: dict, dotted: str):
    """Apply one `section.key=value` override; values parse as JSON when possible."""
    if "=" not in dotted:
        raise ConfigError(f"override needs key=value, got {dotted!r}")
    path, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = path.split(".")
    if len(parts) == 1 and parts[0] in TOP_LEVEL_EXTRAS:
        doc[parts[0]] = value
        return
    if len(parts) != 2:
        raise ConfigError(f"override path must be section.key, got {path!r}")
    section, key = parts
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {path}")
    doc.setdefault(section, {})[key] = value


def load_config(path, overrides=()) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    merged = json.loads(json.dumps(doc))
    for ov in overrides:
        apply_override(merged, ov)
    return validate_config(merged)


def config_digest(doc: dict) -> str:
    """Digest of everything numeric: model, task, optim, quant sections."""
    core = {k: doc[k] for k in ("model", "task", "optim", "quant")}
    canon = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def build_session(doc: dict) -> Session:
    """Construct the deterministic Session a validated config describes."""
    doc = validate_config(doc)
    t = doc["task"]
    o = doc["optim"]
    q = doc["quant"]
    m = doc["model"]

    if (t["name"] == "synth_classify") != (m["arch"] == "mlp"):
        raise ConfigError("task synth_classify pairs with arch mlp (and only it)")
    if t["seq_len"] > m["max_seq_len"]:
        raise ConfigError(f"task.seq_len {t['seq_len']} exceeds model.max_seq_len {m['max_seq_len']}")

    spec = TaskSpec(
        t["name"],
        seed=t["seed"],
        train_size=t["train_size"],
        eval_size=t["eval_size"],
        seq_len=t["seq_len"],
        batch_size=o["batch_size"],
        d_in=t["d_in"],
    )
    vocab = Task(spec).vocab_size

    try:
        model_cfg = ModelConfig(
            arch=m["arch"],
            d_model=m["d_model"],
            n_layers=m["n_layers"],
            n_heads=m["n_heads"],
            vocab_size=vocab,
            max_seq_len=m["max_seq_len"],
            d_in=t["d_in"],
            split=tuple(m["split"]),
            tuning=m["tuning"],
            lora_rank=m["lora_rank"],
            lora_alpha=m["lora_alpha"],
            init_scale=m["init_scale"],
            quant_sites=q["sites"],
        )
        optim_cfg = OptimConfig(
            model_lr=o["model_lr"],
            bits_lr=o["bits_lr"],
            beta=o["beta"],
            optimizer=o["optimizer"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            steps=o["steps"],
            batch_size=o["batch_size"],
            seed=o["seed"],
            clip_norm=o["clip_norm"],
            schedule_decay=o["schedule_decay"],
        )
        quant_cfg = QuantConfig(
            mode=q["mode"],
            bits=q["bits"],
            granularity=q["granularity"],
            group_size=q["group_size"],
            b_min=q["b_min"],
            b_max=q["b_max"],
            b_init=q["b_init"],
            target=q["target"],
            alpha=q["alpha"],
            clip=q["clip"],
            clip_mode=q["clip_mode"],
            axis=q["axis"],
            sites=q["sites"],
        )
    except ValueError as e:
        raise ConfigError(str(e))

    return Session(model_cfg, spec, optim_cfg, quant_cfg, digest=config_digest(doc))
