"""INI run configuration: one section per pipeline component."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adapters import AdapterSpec
from .model import ModelConfig
from .probe import EndpointConfig
from .tasks import TaskConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_per_slot: int = 200
    slots: tuple[int, ...] | None = None
    seed: int = 12345

    def __post_init__(self):
        if self.n_per_slot < 1:
            raise ValueError("n_per_slot must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    n_pretrain: int = 8000
    head_prob: float = 0.5
    n_finetune: int = 400
    copies: int | None = None
    scheme: str = "cyclic"
    k_min: int | None = None

    def __post_init__(self):
        if self.n_pretrain < 1 or self.n_finetune < 1:
            raise ValueError("dataset sizes must be >= 1")
        if not 0 <= self.head_prob <= 1:
            raise ValueError("head_prob must lie in [0, 1]")
        if self.scheme not in ("cyclic", "random"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.k_min is not None and self.k_min < 1:
            raise ValueError("k_min must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    seed: int
    runs_dir: Path
    task: TaskConfig
    model: ModelConfig
    train: TrainConfig
    finetune: TrainConfig
    adapter: AdapterSpec
    data: DataConfig
    eval: EvalConfig
    probe: EndpointConfig
    model_seed: int = 0
    source: Path | None = None

    @property
    def run_dir(self) -> Path:
        return self.runs_dir / self.run_id


def _coerce(value: str, typ: Any, name: str):
    t = typ if isinstance(typ, type) else None
    text = value.strip()
    origin = str(typ)
    if text.lower() in ("none", "") and "None" in origin:
        return None
    try:
        if typ is bool or origin == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "tuple" in origin:
            return tuple(int(v) if v.strip().lstrip("-").isdigit() else v.strip()
                         for v in text.split(",") if v.strip())
        if t is int or origin.startswith("int"):
            return int(text)
        if t is float or origin.startswith("float"):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {value!r} as {origin}") from e


def _build(cls, section: configparser.SectionProxy | dict, name: str, **fixed):
    # INI keys arrive lower-cased, field names may not be (K)
    fields = {f.name.lower(): f for f in dataclasses.fields(cls)}
    kw = dict(fixed)
    for key, raw in section.items():
        if key.lower() not in fields:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        f = fields[key.lower()]
        kw[f.name] = _coerce(raw, f.type, f"[{name}] {key}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


SECTIONS = ("run", "task", "model", "train", "finetune", "adapter", "data", "eval", "probe")


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    sec = {s: (dict(cp[s]) if cp.has_section(s) else {}) for s in SECTIONS}

    run = sec["run"]
    allowed_run = {"id", "seed", "runs_dir", "model_seed"}
    if set(run) - allowed_run:
        raise ConfigError(f"[run] unknown key(s): {sorted(set(run) - allowed_run)}")
    run_id = run.get("id", "toy")
    if not run_id or "/" in run_id or run_id.startswith("."):
        raise ConfigError(f"[run] invalid id {run_id!r}")
    seed = _coerce(run.get("seed", "0"), int, "[run] seed")
    model_seed = _coerce(run.get("model_seed", "0"), int, "[run] model_seed")
    base = source.parent if source is not None else Path.cwd()
    runs_dir = Path(run.get("runs_dir", "runs"))
    if not runs_dir.is_absolute():
        runs_dir = base / runs_dir

    task = _build(TaskConfig, sec["task"], "task", **({} if "seed" in sec["task"] else {"seed": seed}))
    mkw = dict(sec["model"])
    model_fixed = {"vocab_size": task.vocab.size}
    if "vocab_size" in mkw:
        raise ConfigError("[model] vocab_size is derived from [task]")
    if "max_seq_len" not in mkw:
        model_fixed["max_seq_len"] = task.seq_len + task.K
    model = _build(ModelConfig, mkw, "model", **model_fixed)
    train = _build(TrainConfig, sec["train"], "train", **({} if "seed" in sec["train"] else {"seed": seed}))
    finetune = _build(TrainConfig, sec["finetune"], "finetune",
                      **({} if "seed" in sec["finetune"] else {"seed": seed}))
    akw = dict(sec["adapter"])
    adapter_fixed = {} if "output_dim" in akw else {"output_dim": model.d_model}
    adapter = _build(AdapterSpec, akw, "adapter", **adapter_fixed)
    if adapter.kind != "LowRank" and adapter.output_dim != model.d_model:
        raise ConfigError(f"[adapter] output_dim {adapter.output_dim} != [model] d_model {model.d_model}")
    data = _build(DataConfig, sec["data"], "data")
    if data.k_min is not None and data.k_min > task.K:
        raise ConfigError(f"[data] k_min {data.k_min} exceeds [task] K {task.K}")
    ev = _build(EvalConfig, sec["eval"], "eval")
    if ev.slots is not None and any(not 1 <= s <= task.K for s in ev.slots):
        raise ConfigError(f"[eval] slots must lie in 1..{task.K}")
    if task.seq_len + task.K > model.max_seq_len:
        raise ConfigError(f"[model] max_seq_len {model.max_seq_len} too small for the task "
                          f"({task.seq_len} tokens + {task.K} soft tokens)")
    probe = _build(EndpointConfig, sec["probe"], "probe")
    return RunConfig(run_id, seed, runs_dir, task, model, train, finetune, adapter, data, ev,
                     probe, model_seed, source)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), p.resolve())
