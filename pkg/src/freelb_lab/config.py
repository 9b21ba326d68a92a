"""Flat ``key = value`` run configuration with strict key checking."""
from __future__ import annotations

import difflib
from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    train_path: str = ""
    dev_path: str = ""
    eval_path: str = ""          # eval/attack/compare data; falls back to dev_path
    min_count: int = 1
    max_len: int = 16
    max_eval_samples: int = 0    # 0 = all
    # model
    dim: int = 32
    heads: int = 2
    blocks: int = 1
    ff_dim: int = 64
    dropout: float = 0.1
    # training
    method: str = "natural"
    steps: int = 3
    alpha: float = 3e-2
    eps: float = 1.5e-1
    inner_steps: int = 2
    split_after: int = 1
    lr: float = 0.1
    optimizer: str = "sgd"
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    reuse_mask: bool = True
    preset: str = ""
    preset_scale: str = "1.0"    # a number, or "auto" for the mean initial embedding norm
    # attack
    checkpoint: str = ""
    models: str = ""             # compare: name=path,name=path
    references: str = ""         # compare: comma list, default every model
    attack_steps: int = 2000
    attack_step_size: float = 5e-3
    eps_mode: str = "searched"
    attack_eps: float = 0.01
    restarts: int = 1
    eps_start: float = 0.0       # 0 = eps_start_factor x largest training eps
    eps_start_factor: float = 1.1
    eps_decrement: float = 0.0   # 0 = eps_start / 20
    attack_seed: int = 0
    # synthetic data
    task: str = "trigger-bigram"
    train_size: int = 2000
    dev_size: int = 500
    test_size: int = 0
    seq_len: int = 12
    vocab_size: int = 40
    noise: float = 0.0
    gen_seed: int = 0
    # output
    out_dir: str = ""
    record_timing: bool = True
    figures: bool = True


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _nearest(key: str) -> str:
    close = difflib.get_close_matches(key, FIELD_TYPES, n=1, cutoff=0.0)
    return close[0] if close else ""


def convert(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown key {key!r} (did you mean {_nearest(key)!r}?)")
    typ = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r} expects {typ}, got {raw!r}") from None
    return raw


def parse_lines(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        values[key] = convert(key, raw)
    return values


def parse_override(item: str) -> tuple:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} must look like key=value")
    key = key.strip().lstrip("-").replace("-", "_")
    return key, convert(key, raw)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_lines(p.read_text(encoding="utf-8"), str(path)))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    return replace(RunConfig(), **values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def require(cfg: RunConfig, *keys):
    missing = [k for k in keys if getattr(cfg, k) in ("", None)]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
