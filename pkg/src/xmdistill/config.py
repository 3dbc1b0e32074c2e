"""Run configuration: JSON file sections plus ``--section.key value`` flag overrides.

A config file is a JSON object with optional top-level ``seed``, ``threads``,
``out`` and the sections below. Unknown keys anywhere are rejected by name.
Flags win over file values, and file values win over defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticSpec
from .distill import TrainConfig
from .errors import ConfigError
from .evaluation import FewShotSpec, RidgeConfig, Task
from .model import StudentConfig

COMMANDS = ("gen-data", "pretrain", "probe", "fewshot", "finetune", "avg-ckpt", "grad-check")

# share of total_steps spent warming up when warmup_steps is not given
WARMUP_FRACTION = {"pretrain": 0.1, "finetune": 0.1}
DEFAULT_WARMUP_FRACTION = 0.1
COMMAND_DEFAULTS = {
    "finetune": {"train": {"batch_size": 8}},
}

_ANY = object()


def _dc_defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


SECTIONS = {
    "student": _dc_defaults(StudentConfig),
    "train": {**_dc_defaults(TrainConfig), "warmup_fraction": None, "save_optimizer": False},
    "data": {**_dc_defaults(SyntheticSpec), "n_examples": 2000, "start": 0, "heldout_examples": 0},
    "task": {"kind": "classification", "n_classes": _ANY, "lo": -3, "hi": 3, "name": "task"},
    "ridge": {"alpha": 100.0, "target": "direct"},
    "fewshot": {"ks": (4, 8, 16, 32), "seeds": 5},
    "eval": {"split_seed": 0, "freeze_encoder": False, "random_init": False},
    "paths": {"dataset": None, "heldout": None, "checkpoint": None, "checkpoints": (), "run_dir": None},
}
TOP_LEVEL = {"seed": 0, "threads": 1, "out": "out"}
NULLABLE_FLOAT = {"train.warmup_fraction"}


@dataclass
class RunConfig:
    command: str
    seed: int
    threads: int
    out: Path
    student: StudentConfig
    train: TrainConfig
    data: SyntheticSpec
    task: Task
    ridge: RidgeConfig
    sections: dict
    explicit: set = field(default_factory=set)

    def get(self, dotted: str):
        section, key = dotted.split(".")
        return self.sections[section][key]

    def path(self, key: str) -> Path | None:
        value = self.sections["paths"][key]
        return Path(value) if value is not None else None

    def few_shot_specs(self) -> list:
        classes = tuple(range(self.task.lo, self.task.hi + 1)) if self.task.kind == "regression" \
            else tuple(range(int(self.task.n_classes)))
        fs = self.sections["fewshot"]
        return [FewShotSpec(k, classes, self.seed + s) for k in fs["ks"] for s in range(fs["seeds"])]


def _coerce(key: str, value, default):
    """Check ``value`` against the type of ``default``; return the normalised value."""
    def bad(expected):
        return ConfigError(f"{key}: expected {expected}, got {value!r}")

    if default is _ANY:
        if isinstance(value, bool) or not isinstance(value, (int, list, tuple)):
            raise bad("an integer or a list of integers")
        return tuple(value) if isinstance(value, (list, tuple)) else value
    if key in NULLABLE_FLOAT:
        if value is None:
            return None
        default = 0.0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise bad("a finite number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise bad("a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    # nullable path-like
    if value is not None and not isinstance(value, str):
        raise bad("a path string or null")
    return value


def _merge(target: dict, explicit: set, layer: dict, origin: str):
    for name, value in layer.items():
        if name in TOP_LEVEL:
            target[name] = _coerce(name, value, TOP_LEVEL[name])
            explicit.add(name)
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown key {name!r} in {origin}")
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected an object in {origin}")
        for key, v in value.items():
            dotted = f"{name}.{key}"
            if key not in SECTIONS[name]:
                raise ConfigError(f"unknown key {dotted!r} in {origin}")
            target[name][key] = _coerce(dotted, v, SECTIONS[name][key])
            explicit.add(dotted)


def parse_flag_value(raw: str):
    """Flag values are JSON when they parse as JSON, otherwise plain strings."""
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def flags_to_layer(pairs) -> dict:
    """``[("train.peak_lr", "1e-3"), ...]`` -> nested override dict."""
    layer: dict = {}
    for dotted, raw in pairs:
        if "." not in dotted:
            raise ConfigError(f"unknown flag --{dotted}")
        section, key = dotted.split(".", 1)
        layer.setdefault(section, {})[key] = parse_flag_value(raw)
    return layer


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"--config: {path} is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("--config: top level must be a JSON object")
    return doc


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc}") from None


REQUIRED_INPUTS = {
    "pretrain": ("dataset",),
    "probe": ("dataset",),
    "fewshot": ("dataset",),
    "finetune": ("dataset",),
}


def parse_config(command: str, file=None, overrides: dict | None = None, top: dict | None = None) -> RunConfig:
    """Resolve defaults <- command defaults <- file <- flags into a validated RunConfig.

    ``overrides`` uses the file's nested shape; ``top`` holds seed/threads/out
    given as global flags.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    values = {**TOP_LEVEL, **{s: dict(d) for s, d in SECTIONS.items()}}
    explicit: set = set()
    _merge(values, set(), COMMAND_DEFAULTS.get(command, {}), "command defaults")
    if file is not None:
        _merge(values, explicit, load_config_file(file), str(file))
    _merge(values, explicit, overrides or {}, "flags")
    _merge(values, explicit, {k: v for k, v in (top or {}).items() if v is not None}, "flags")

    seed, threads = values["seed"], values["threads"]
    if seed < 0:
        raise ConfigError("seed: must be non-negative")
    if threads < 1:
        raise ConfigError("threads: must be >= 1")
    for section in ("train", "data"):
        if f"{section}.seed" not in explicit:
            values[section]["seed"] = seed

    train = dict(values["train"])
    fraction = train.pop("warmup_fraction")
    train.pop("save_optimizer")
    if "train.warmup_steps" not in explicit:
        if fraction is None:
            fraction = WARMUP_FRACTION.get(command, DEFAULT_WARMUP_FRACTION)
        if not 0 < fraction <= 1:
            raise ConfigError("train.warmup_fraction: must be in (0, 1]")
        train["warmup_steps"] = max(1, round(fraction * train["total_steps"]))
    elif fraction is not None and "train.warmup_steps" in explicit:
        raise ConfigError("train.warmup_fraction: give either warmup_steps or warmup_fraction, not both")

    data = {k: v for k, v in values["data"].items() if k not in ("n_examples", "start", "heldout_examples")}
    for key in ("n_examples", "start", "heldout_examples"):
        if values["data"][key] < 0:
            raise ConfigError(f"data.{key}: must be non-negative")
    task = {k: v for k, v in values["task"].items() if v is not _ANY}
    task.setdefault("n_classes", values["data"]["n_classes"])

    ridge = values["ridge"]
    if ridge["target"] not in ("direct", "onehot"):
        raise ConfigError(f"ridge.target: expected 'direct' or 'onehot', got {ridge['target']!r}")
    fs = values["fewshot"]
    if not fs["ks"] or any(isinstance(k, bool) or not isinstance(k, int) or k < 1 for k in fs["ks"]):
        raise ConfigError("fewshot.ks: need a non-empty list of positive integers")
    if fs["seeds"] < 1:
        raise ConfigError("fewshot.seeds: must be >= 1")

    cfg = RunConfig(
        command=command,
        seed=seed,
        threads=threads,
        out=Path(values["out"]),
        student=_build(StudentConfig, values["student"], "student"),
        train=_build(TrainConfig, train, "train"),
        data=_build(SyntheticSpec, data, "data"),
        task=_build(Task, task, "task"),
        ridge=_build(RidgeConfig, {"alpha": ridge["alpha"]}, "ridge"),
        sections={s: values[s] for s in SECTIONS},
        explicit=explicit,
    )
    for key in REQUIRED_INPUTS.get(command, ()):
        if cfg.path(key) is None:
            raise ConfigError(f"paths.{key}: required by {command}")
    for key in ("dataset", "heldout", "checkpoint", "run_dir"):
        p = cfg.path(key)
        if p is not None and not p.exists():
            raise ConfigError(f"paths.{key}: {p} does not exist")
    for p in cfg.sections["paths"]["checkpoints"]:
        if not Path(p).exists():
            raise ConfigError(f"paths.checkpoints: {p} does not exist")
    return cfg
