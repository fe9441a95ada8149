"""Run configuration files.

INI layout, one flat ``key = value`` per line under five sections.  Every key
is optional; the default is shown in brackets.

[model]
    pair            registry name of the teacher/student pair   [tiny-hetero-pair]
    mode            offline | online                            [offline]
    teacher_ckpt    FCFD-CKPT-1 file with a pretrained teacher  [empty: pre-train one]
    teacher_epochs  epochs for teacher pre-training             [same as optim.epochs]
    teacher_frozen  freeze teacher parameters offline           [true]
    reverse_kd      online mode: student-to-teacher KD term     [true]
[data]
    dir             directory holding {train,eval}-{images,labels}.idx  [empty: synthetic]
    num_classes     [10]
    per_class       synthetic train images per class            [300]
    eval_per_class  synthetic eval images per class             [300]
    image_size      [32]
    seed            synthetic data seed                         [0]
    batch_size      [64]
    augment         pad-crop-flip on the train split            [true]
[optim]
    epochs [30]  base_lr [0.05]  lr_milestones [18,24]  lr_decay [0.1]
    weight_decay [5e-4]  momentum [0.9]  eval_every [1]  seed [0]
[losses]
    w_task [1]  w_kd [1]  w_app [5]  w_func_kl [0.2]  temperature [4]
    func_mode full | partial [full]
    use_task use_kd use_app use_func_kl use_func_l2 use_func_prime [true]
    include_func_prime_l2 [false]
[sampler]
    candidate_positions [2,3]  paths_per_iter [2]  rng_seed [0]

A file ending in ``.json`` is read as ``{"section": {"key": value}}``.
Overrides use ``section.key=value`` strings.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import fields, replace
from pathlib import Path

from .losses import LossWeights
from .models import REGISTRY, pair_num_stages
from .pathing import ConfigError, SamplerConfig
from .trainer import TrainConfig


class ConfigNotFound(ConfigError):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int(v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


def _float(v):
    if isinstance(v, bool):
        raise ValueError(f"not a number: {v!r}")
    return float(v)


def _ints(v):
    if isinstance(v, (list, tuple)):
        return tuple(_int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)


def _opt_int(v):
    return None if v in (None, "", "none") else _int(v)


# section -> key -> (target, field, parser); target is "run", "weights" or "sampler"
SCHEMA = {
    "model": {
        "pair": ("run", "pair", str), "mode": ("run", "mode", str),
        "teacher_ckpt": ("run", "teacher_ckpt", str), "teacher_epochs": ("run", "teacher_epochs", _opt_int),
        "teacher_frozen": ("run", "teacher_frozen", _bool), "reverse_kd": ("run", "reverse_kd", _bool),
    },
    "data": {
        "dir": ("run", "data_dir", str), "num_classes": ("run", "num_classes", _int),
        "per_class": ("run", "per_class", _int), "eval_per_class": ("run", "eval_per_class", _int),
        "image_size": ("run", "image_size", _int), "seed": ("run", "data_seed", _int),
        "batch_size": ("run", "batch_size", _int), "augment": ("run", "augment", _bool),
    },
    "optim": {
        "epochs": ("run", "epochs", _int), "base_lr": ("run", "base_lr", _float),
        "lr_milestones": ("run", "lr_milestones", _ints), "lr_decay": ("run", "lr_decay", _float),
        "weight_decay": ("run", "weight_decay", _float), "momentum": ("run", "momentum", _float),
        "eval_every": ("run", "eval_every", _int), "seed": ("run", "seed", _int),
    },
    "losses": {
        **{f.name: ("weights", f.name, _float) for f in fields(LossWeights) if f.name.startswith("w_")},
        "temperature": ("weights", "temperature", _float), "func_mode": ("weights", "func_mode", str),
        **{f.name: ("weights", f.name, _bool) for f in fields(LossWeights)
           if f.name.startswith("use_") or f.name.startswith("include_")},
    },
    "sampler": {
        "candidate_positions": ("sampler", "candidate_positions", _ints),
        "paths_per_iter": ("sampler", "paths_per_iter", _int), "rng_seed": ("sampler", "rng_seed", _int),
    },
}


def _read(path: Path) -> dict[str, dict]:
    if not path.is_file():
        raise ConfigNotFound(f"config file {str(path)!r} does not exist")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise ConfigError(f"{path}: expected an object of sections")
        return raw
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}".replace("\n", " ")) from None
    return {s: dict(parser[s]) for s in parser.sections()}


def parse_override(item: str) -> tuple[str, str, str]:
    name, sep, value = item.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    return section, key, value.strip()


def apply_values(cfg: TrainConfig, values: dict[str, dict]) -> TrainConfig:
    run, weights, sampler = {}, {}, {}
    targets = {"run": run, "weights": weights, "sampler": sampler}
    for section, items in values.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] (valid: {', '.join(SCHEMA)})")
        for key, value in items.items():
            spec = SCHEMA[section].get(key)
            if spec is None:
                raise ConfigError(f"unknown key {section}.{key}")
            target, name, parse = spec
            try:
                targets[target][name] = parse(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{section}.{key}: {e}") from None
    return replace(cfg, **run, weights=replace(cfg.weights, **weights),
                   sampler=replace(cfg.sampler, **sampler))


def load_config(path=None, overrides=()) -> TrainConfig:
    """Build a validated :class:`TrainConfig` from a file (optional) and overrides."""
    values = _read(Path(path)) if path else {}
    cfg = apply_values(TrainConfig(), values)
    extra: dict[str, dict] = {}
    for item in overrides:
        section, key, value = parse_override(item)
        extra.setdefault(section, {})[key] = value
    cfg = apply_values(cfg, extra)
    validate_config(cfg)
    return cfg


def validate_config(cfg: TrainConfig) -> None:
    if cfg.pair not in REGISTRY:
        raise ConfigError(f"model.pair: unknown pair {cfg.pair!r} (valid: {', '.join(REGISTRY)})")
    for name in ("num_classes", "per_class", "eval_per_class", "image_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"data.{name} must be >= 1")
    cfg.validate(pair_num_stages(cfg.pair))


def config_to_ini(cfg: TrainConfig) -> str:
    """Inverse of :func:`load_config`; every key is written, defaults included."""
    sources = {"run": cfg, "weights": cfg.weights, "sampler": cfg.sampler}
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (target, name, _) in keys.items():
            v = getattr(sources[target], name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            out.append(f"{key} = {v}")
        out.append("")
    return "\n".join(out)


def config_from_dict(d: dict) -> TrainConfig:
    """Inverse of :meth:`TrainConfig.to_dict` (as stored in checkpoint metadata)."""
    d = dict(d)
    sampler = dict(d.pop("sampler", {}))
    for key in ("candidate_positions", "deltas"):
        if key in sampler:
            sampler[key] = tuple(sampler[key])
    weights = d.pop("weights", {})
    if "lr_milestones" in d:
        d["lr_milestones"] = tuple(d["lr_milestones"])
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config fields {unknown}")
    return TrainConfig(**d, sampler=SamplerConfig(**sampler), weights=LossWeights(**weights))


def config_hash(cfg: TrainConfig) -> str:
    """Git-style blob hash of the canonical JSON form of the resolved config."""
    body = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()
