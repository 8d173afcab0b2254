"""Run configuration: one JSON file, validated up front, with dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .objectives import DampPolicy
from .pipeline import METHODS
from .pruners import SCORE_DENOMINATORS, Kind, SparsityPattern
from .evaluate import DEFAULT_GRID
from .hinv import Method


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    seed: int = 0
    n: int = 2000
    classes: int = 4
    dim: int = 16
    sigma: float = 1.0


@dataclass
class NetConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 32, 4])
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 3000
    lr: float = 0.05
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-3


@dataclass
class PruneConfig:
    method: str = "sparsegpt"
    lam: float = 0.5
    pattern: str = "0.6"
    B: int | None = None
    Bs: int | None = None
    K_p: int | None = None
    damp_policy: str = "sparsegpt"
    percdamp: float = 0.01
    recompute: bool = False
    score_denominator: str = "chol-squared"
    hinv_method: str = "auto"
    allocation: str | None = None  # JSON table path; None = uniform
    seed: int = 0


@dataclass
class SweepConfig:
    grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    # empty: sweep the checkpoint in ``paths``; otherwise one full replicate
    # (data, init, training) per seed
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class BenchConfig:
    sizes: list[list[int]] = field(default_factory=lambda: [[128, 32, 128], [256, 64, 256], [512, 128, 512]])
    lam: float = 0.5
    seed: int = 0


@dataclass
class PathsConfig:
    out: str = "out"
    dataset: str | None = None  # defaults below are relative to ``out``
    checkpoint: str | None = None
    capture: str | None = None

    def resolve(self, name: str) -> Path:
        explicit = getattr(self, name)
        default = {"dataset": "dataset.mspr", "checkpoint": "checkpoint.mspr", "capture": "capture.mspr"}[name]
        return Path(explicit) if explicit else Path(self.out) / default


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prune"]["lambda"] = d["prune"].pop("lam")
        d["bench"]["lambda"] = d["bench"].pop("lam")
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# JSON spells the blend weight "lambda"
_ALIASES = {"lambda": "lam"}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        path = f"{where}.{key}" if where else key
        if name not in names:
            raise ConfigError(f"{path}: unknown key")
        sub = _SECTIONS.get(names[name].type) if cls is RunConfig else None
        kwargs[name] = _build(sub, value, path) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "DatasetConfig": DatasetConfig, "NetConfig": NetConfig, "TrainConfig": TrainConfig,
    "PruneConfig": PruneConfig, "SweepConfig": SweepConfig, "BenchConfig": BenchConfig,
    "PathsConfig": PathsConfig,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Set leaves like ``prune.lambda=0.9``; values are parsed as JSON when possible."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value.strip())
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    raw = apply_overrides(raw, overrides or [])
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def _int(value, path: str, lo: int | None = None, optional: bool = False):
    if value is None and optional:
        return
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{path}: {value} must be >= {lo}")


def _num(value, path: str, lo: float | None = None, hi: float | None = None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if hi is None:
        if lo is not None and value < lo:
            raise ConfigError(f"{path}: {value} must be >= {lo}")
    elif not lo <= value <= hi:
        raise ConfigError(f"{path}: {value} outside [{lo}, {hi}]")


def _choice(value, path: str, choices):
    if value not in choices:
        raise ConfigError(f"{path}: {value!r} not one of {list(choices)}")


def validate(cfg: RunConfig) -> None:
    d, n, t, p, s, b = cfg.dataset, cfg.net, cfg.train, cfg.prune, cfg.sweep, cfg.bench
    _int(d.seed, "dataset.seed", 0)
    _int(d.n, "dataset.n", 10)
    _int(d.classes, "dataset.classes", 2)
    _int(d.dim, "dataset.dim", 1)
    _num(d.sigma, "dataset.sigma", 0.0)
    if not isinstance(n.widths, list) or len(n.widths) < 2:
        raise ConfigError("net.widths: need at least input and output widths")
    for i, w in enumerate(n.widths):
        _int(w, f"net.widths[{i}]", 1)
    if n.widths[0] != d.dim:
        raise ConfigError(f"net.widths: first width {n.widths[0]} != dataset.dim {d.dim}")
    if n.widths[-1] != d.classes:
        raise ConfigError(f"net.widths: last width {n.widths[-1]} != dataset.classes {d.classes}")
    _int(n.seed, "net.seed", 0)
    _int(t.epochs, "train.epochs", 1)
    _num(t.lr, "train.lr", 0.0)
    _int(t.seed, "train.seed", 0)
    _num(t.momentum, "train.momentum", 0.0, 1.0)
    _num(t.weight_decay, "train.weight_decay", 0.0)

    _choice(p.method, "prune.method", METHODS)
    _num(p.lam, "prune.lambda", 0.0, 1.0)
    try:
        pattern = SparsityPattern.parse(p.pattern)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"prune.pattern: {exc}") from exc
    p.pattern = str(pattern)
    if p.method == "osscar" and pattern.kind is not Kind.COLUMNS:
        raise ConfigError("prune.pattern: osscar needs a column pattern like 'cols:4'")
    if p.method in ("sparsegpt", "wanda", "obs-greedy") and pattern.kind is Kind.COLUMNS:
        raise ConfigError(f"prune.pattern: {p.method} does not take column patterns")
    d_ins = n.widths[:-1]
    for i, d_in in enumerate(d_ins):
        try:
            pattern.validate(d_in)
        except ValueError as exc:
            raise ConfigError(f"prune.pattern: layer{i}: {exc}") from exc
    _int(p.B, "prune.B", 1, optional=True)
    if p.B is not None and p.B > min(d_ins):
        raise ConfigError(f"prune.B: {p.B} exceeds the smallest layer input width {min(d_ins)}")
    _int(p.Bs, "prune.Bs", 1, optional=True)
    _int(p.K_p, "prune.K_p", 1, optional=True)
    if p.Bs is not None:
        for i, d_in in enumerate(d_ins):
            B = min(128, d_in) if p.B is None else p.B
            if B % p.Bs:
                raise ConfigError(f"prune.Bs: {p.Bs} does not divide B={B} (layer{i})")
    _choice(p.damp_policy, "prune.damp_policy", [m.value for m in DampPolicy])
    _num(p.percdamp, "prune.percdamp", 0.0)
    if not isinstance(p.recompute, bool):
        raise ConfigError("prune.recompute: expected true or false")
    _choice(p.score_denominator, "prune.score_denominator", SCORE_DENOMINATORS)
    _choice(p.hinv_method, "prune.hinv_method", [m.value for m in Method])
    _int(p.seed, "prune.seed", 0)

    if not isinstance(s.grid, list) or not s.grid:
        raise ConfigError("sweep.grid: expected a non-empty list")
    for i, g in enumerate(s.grid):
        _num(g, f"sweep.grid[{i}]", 0.0, 1.0)
    if not isinstance(s.seeds, list):
        raise ConfigError("sweep.seeds: expected a list")
    for i, v in enumerate(s.seeds):
        _int(v, f"sweep.seeds[{i}]", 0)

    if not isinstance(b.sizes, list) or not b.sizes:
        raise ConfigError("bench.sizes: expected a non-empty list of [d_in, N, K]")
    for i, size in enumerate(b.sizes):
        if not isinstance(size, list) or len(size) != 3:
            raise ConfigError(f"bench.sizes[{i}]: expected [d_in, N, K]")
        for j, v in enumerate(size):
            _int(v, f"bench.sizes[{i}][{j}]", 1)
    _num(b.lam, "bench.lambda", 0.0, 1.0)
    _int(b.seed, "bench.seed", 0)
