"""Command-line entry point.

    moprune gen-data   --config run.json
    moprune train      --config run.json
    moprune prune      --config run.json --set prune.lambda=0.9
    moprune sweep      --config run.json
    moprune verify     [--only 1,5]
    moprune bench-hinv --config run.json

Exit codes: 0 ok, 1 invalid configuration or inputs, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .alloc import layer_infos, load_table, table_alloc, uniform_alloc
from .bench import bench_csv, bench_hinv
from .config import ConfigError, RunConfig, load_config
from .evaluate import format_summary, format_table, lambda_sweep, multi_seed_sweep, network_eval, write_csv
from .matrixcore import NumericalError
from .objectives import ObjectiveSpec
from .pipeline import prune_network
from .pruners import PrunerConfig, SparsityPattern
from .serialize import ContainerError
from .toynet import CalibrationCapture, Dataset, ToyNet, capture, generate_dataset, init_net, train

log = logging.getLogger("moprune")

COMMANDS = ("gen-data", "train", "prune", "sweep", "verify", "bench-hinv")
EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 1, 2, 3


class VerificationFailed(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command: str, outputs: list[Path], seed: int) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": seed,
        "versions": {"moprune": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": {str(p): _sha256(p) for p in outputs if p.exists()},
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found at {path}; run '{hint}' first")
    return path


def _pattern(cfg: RunConfig) -> SparsityPattern:
    return SparsityPattern.parse(cfg.prune.pattern)


def _spec(cfg: RunConfig, lam: float | None = None) -> ObjectiveSpec:
    p = cfg.prune
    return ObjectiveSpec(lam=p.lam if lam is None else lam, damp=p.damp_policy, percdamp=p.percdamp)


def _pruner_cfg(cfg: RunConfig) -> PrunerConfig:
    p = cfg.prune
    return PrunerConfig(B=p.B, Bs=p.Bs, Kp=p.K_p, seed=p.seed, score_denominator=p.score_denominator,
                        hinv_method=p.hinv_method)


def _plan(cfg: RunConfig, net: ToyNet):
    infos = layer_infos(net)
    if cfg.prune.allocation:
        path = _require(Path(cfg.prune.allocation), "allocation table", "write the table")
        try:
            return table_alloc(load_table(path), infos)
        except KeyError as exc:
            raise ConfigError(f"prune.allocation: {exc.args[0]}") from exc
    return uniform_alloc(_pattern(cfg), infos)


def _train_replicate(cfg: RunConfig, seed: int):
    d, t = cfg.dataset, cfg.train
    data = generate_dataset(seed, d.n, d.classes, d.dim, d.sigma)
    res = train(init_net(cfg.net.widths, seed), data, t.epochs, t.lr, seed=seed,
                momentum=t.momentum, weight_decay=t.weight_decay)
    return res.net, data


# ---- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    d = cfg.dataset
    data = generate_dataset(d.seed, d.n, d.classes, d.dim, d.sigma)
    path = cfg.paths.resolve("dataset")
    path.parent.mkdir(parents=True, exist_ok=True)
    data.save(path)
    sizes = ", ".join(f"{s} {len(data.index[s])}" for s in ("train", "calibration", "test"))
    print(f"dataset: {d.n} points, {d.classes} classes, dim {d.dim} ({sizes}) -> {path}")
    return [path]


def cmd_train(cfg: RunConfig) -> list[Path]:
    data = Dataset.load(_require(cfg.paths.resolve("dataset"), "dataset", "gen-data"))
    t = cfg.train
    res = train(init_net(cfg.net.widths, cfg.net.seed), data, t.epochs, t.lr, seed=t.seed,
                momentum=t.momentum, weight_decay=t.weight_decay)
    ck = cfg.paths.resolve("checkpoint")
    ck.parent.mkdir(parents=True, exist_ok=True)
    res.net.save(ck)
    X, y = data.split("calibration")
    cap_path = cfg.paths.resolve("capture")
    capture(res.net, X, y).save(cap_path)
    test = network_eval(res.net, *data.split("test"))
    print(f"trained {t.epochs} epochs: train objective {res.losses[-1]:.5f}, gradient norm "
          f"{res.initial_grad_norm:.3g} -> {res.final_grad_norm:.3g}, test loss {test.loss:.5f}, "
          f"test acc {test.accuracy:.4f}")
    return [ck, cap_path]


def cmd_prune(cfg: RunConfig) -> list[Path]:
    data = Dataset.load(_require(cfg.paths.resolve("dataset"), "dataset", "gen-data"))
    net = ToyNet.load(_require(cfg.paths.resolve("checkpoint"), "checkpoint", "train"))
    X, y = data.split("calibration")
    cap = None
    cap_path = cfg.paths.resolve("capture")
    if not cfg.prune.recompute and cap_path.exists():
        cap = CalibrationCapture.load(cap_path)
    res = prune_network(net, X, y, cfg.prune.method, _plan(cfg, net), _spec(cfg), _pruner_cfg(cfg),
                        recompute=cfg.prune.recompute, cap=cap)
    out = Path(cfg.paths.out) / "prune"
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    print(f"{'layer':<8} {'pattern':>8} {'L_R':>12} {'L_F':>12} {'L_lambda':>12} {'zeros':>7}")
    for i, r in enumerate(res.layers):
        path = out / f"layer{i}.mspr"
        r.save(path)
        outputs.append(path)
        zeros = 1.0 - r.mask.mean()
        print(f"layer{i:<3} {str(r.pattern):>8} {r.losses.L_R:>12.5g} {r.losses.L_F:>12.5g} "
              f"{r.losses.L_lambda:>12.5g} {zeros:>7.4f}")
    pruned = out / "pruned.mspr"
    res.net.save(pruned)
    outputs.append(pruned)
    metrics = {s: network_eval(res.net, *data.split(s)).__dict__ for s in ("train", "test")}
    dense = {s: network_eval(net, *data.split(s)).__dict__ for s in ("train", "test")}
    (out / "summary.json").write_text(json.dumps({"pruned": metrics, "dense": dense}, indent=2) + "\n")
    print(f"dense  test loss {dense['test']['loss']:.5f} acc {dense['test']['accuracy']:.4f}")
    print(f"pruned test loss {metrics['test']['loss']:.5f} acc {metrics['test']['accuracy']:.4f}")
    return outputs


def cmd_sweep(cfg: RunConfig) -> list[Path]:
    s = cfg.sweep
    kwargs = dict(spec=_spec(cfg), cfg=_pruner_cfg(cfg), recompute=cfg.prune.recompute)
    pattern = _pattern(cfg)
    if s.seeds:
        multi = multi_seed_sweep(s.seeds, lambda seed: _train_replicate(cfg, seed), cfg.prune.method,
                                 pattern, s.grid, **kwargs)
        reports = multi.reports
    else:
        data = Dataset.load(_require(cfg.paths.resolve("dataset"), "dataset", "gen-data"))
        net = ToyNet.load(_require(cfg.paths.resolve("checkpoint"), "checkpoint", "train"))
        reports = [lambda_sweep(net, data, cfg.prune.method, _plan(cfg, net), s.grid,
                                seed=cfg.train.seed, **kwargs)]
        multi = None
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    write_csv(reports, path)
    for r in reports:
        print(format_table(r))
        print()
    if multi is not None and len(reports) > 1:
        print(format_summary(multi))
    return [path]


def cmd_verify(cfg: RunConfig, only: list[int] | None) -> list[Path]:
    from .verify import all_required_passed, run_all
    results = run_all(only)
    if not all_required_passed(results):
        failed = [r.number for r in results if not r.passed and not r.advisory]
        raise VerificationFailed(f"criteria failed: {failed}")
    return []


def cmd_bench(cfg: RunConfig) -> list[Path]:
    rows = bench_hinv(cfg.bench.sizes, cfg.bench.lam, cfg.bench.seed)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench_hinv.csv"
    print(bench_csv(rows, path), end="")
    return [path]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moprune", description="Blended-objective one-shot pruning of toy networks.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    ap.add_argument("--set", dest="overrides", nargs="+", action="extend", default=[], metavar="KEY=VALUE",
                    help="override a config leaf, e.g. prune.lambda=0.9")
    ap.add_argument("--only", help="verify: comma-separated criterion numbers")
    ap.add_argument("--quiet", action="store_true", help="only warnings on stderr")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        only = [int(x) for x in args.only.split(",")] if args.only else None
        if args.command == "gen-data":
            outputs, seed = cmd_gen_data(cfg), cfg.dataset.seed
        elif args.command == "train":
            outputs, seed = cmd_train(cfg), cfg.train.seed
        elif args.command == "prune":
            outputs, seed = cmd_prune(cfg), cfg.prune.seed
        elif args.command == "sweep":
            outputs, seed = cmd_sweep(cfg), cfg.train.seed
        elif args.command == "verify":
            outputs, seed = cmd_verify(cfg, only), 0
        else:
            outputs, seed = cmd_bench(cfg), cfg.bench.seed
        write_manifest(cfg, args.command, outputs, seed)
    except (ConfigError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error in {type(exc).__module__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as exc:
        # inputs the config could not rule out ahead of time (e.g. a loaded checkpoint's widths)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
