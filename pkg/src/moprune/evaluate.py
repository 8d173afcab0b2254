"""Network metrics and the lambda sweep with selection by training loss."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .objectives import Losses, ObjectiveSpec
from .pipeline import prune_network
from .pruners import PrunerConfig, SparsityPattern
from .toynet import Dataset, ToyNet, capture, per_sample_loss

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)


@dataclass(frozen=True)
class Metrics:
    loss: float
    accuracy: float


def network_eval(net: ToyNet, X, y) -> Metrics:
    """Mean cross-entropy (no weight decay) and top-1 accuracy."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[1] == 0:
        raise ValueError("empty split")
    logits = net.forward(X)
    loss = float(per_sample_loss(logits, y).mean())
    acc = float(np.mean(np.argmax(logits, axis=0) == y))
    return Metrics(loss, acc)


@dataclass
class SweepRow:
    lam: float
    layer_losses: list[Losses]
    train: Metrics
    test: Metrics
    wall_s: float
    seed: int = 0


@dataclass
class SweepReport:
    rows: list[SweepRow]
    seed: int = 0

    @property
    def selected_lambda(self) -> float:
        """Lowest training loss; ties go to the smaller lambda."""
        return min(self.rows, key=lambda r: (r.train.loss, r.lam)).lam

    def row(self, lam: float) -> SweepRow:
        for r in self.rows:
            if r.lam == lam:
                return r
        raise KeyError(f"lambda {lam} not in sweep")


def lambda_sweep(net: ToyNet, data: Dataset, method: str, pattern, grid: Sequence[float] = DEFAULT_GRID,
                 spec: ObjectiveSpec | None = None, cfg: PrunerConfig | None = None,
                 recompute: bool = False, seed: int = 0) -> SweepReport:
    """Prune the same dense network once per lambda and evaluate each result."""
    grid = [float(g) for g in grid]
    bad = [g for g in grid if not 0.0 <= g <= 1.0]
    if bad:
        raise ValueError(f"lambda grid values outside [0, 1]: {bad}")
    if not grid:
        raise ValueError("empty lambda grid")
    spec = spec or ObjectiveSpec()
    X_cal, y_cal = data.split("calibration")
    cap = None if recompute else capture(net, X_cal, y_cal)
    X_tr, y_tr = data.split("train")
    X_te, y_te = data.split("test")
    rows = []
    for lam in grid:
        t0 = time.perf_counter()
        try:
            res = prune_network(net, X_cal, y_cal, method, pattern, replace(spec, lam=lam), cfg,
                                recompute=recompute, cap=cap)
        except Exception as exc:
            exc.lam = lam
            log.error("lambda=%g failed: %s", lam, exc)
            raise
        wall = time.perf_counter() - t0
        rows.append(SweepRow(lam, [r.losses for r in res.layers], network_eval(res.net, X_tr, y_tr),
                             network_eval(res.net, X_te, y_te), wall, seed))
    return SweepReport(rows, seed)


@dataclass
class MultiSeedReport:
    reports: list[SweepReport] = field(default_factory=list)

    @property
    def grid(self) -> list[float]:
        return [r.lam for r in self.reports[0].rows]

    def summary(self, attr: str) -> list[tuple[float, float, float]]:
        """(lambda, mean, standard error) of ``test.loss``-style attributes across seeds."""
        out = []
        for lam in self.grid:
            vals = np.array([_get(rep.row(lam), attr) for rep in self.reports])
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            out.append((lam, float(vals.mean()), se))
        return out

    def selected(self) -> list[float]:
        return [rep.selected_lambda for rep in self.reports]


def _get(row: SweepRow, attr: str) -> float:
    obj = row
    for part in attr.split("."):
        obj = getattr(obj, part)
    return float(obj)


def multi_seed_sweep(seeds: Sequence[int], make_replicate: Callable[[int], tuple[ToyNet, Dataset]],
                     method: str, pattern, grid: Sequence[float] = DEFAULT_GRID, **kwargs) -> MultiSeedReport:
    """One full replicate (data, training, sweep) per seed."""
    reports = []
    for s in seeds:
        net, data = make_replicate(s)
        reports.append(lambda_sweep(net, data, method, pattern, grid, seed=s, **kwargs))
    return MultiSeedReport(reports)


def selection_beats_endpoints(report: SweepReport, margin: float = 0.01) -> bool:
    """Test loss at the selected lambda is within ``margin`` of the better endpoint."""
    best_end = min(report.row(0.0).test.loss, report.row(1.0).test.loss)
    return report.row(report.selected_lambda).test.loss <= best_end + margin


# ---- output ----------------------------------------------------------------

def _csv_header(n_layers: int) -> list[str]:
    cols = ["seed", "lambda", "train_loss", "test_loss", "test_acc"]
    for i in range(n_layers):
        cols += [f"layer{i}.L_R", f"layer{i}.L_F", f"layer{i}.L_lambda"]
    return cols + ["selected"]


def write_csv(reports: Sequence[SweepReport], path=None) -> str:
    """CSV with full-precision values; wall-clock is left out so reruns match bitwise."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_csv_header(len(reports[0].rows[0].layer_losses)))
    for rep in reports:
        sel = rep.selected_lambda
        for r in rep.rows:
            vals = [r.train.loss, r.test.loss, r.test.accuracy]
            for ls in r.layer_losses:
                vals += [ls.L_R, ls.L_F, ls.L_lambda]
            w.writerow([rep.seed, repr(r.lam)] + [repr(float(v)) for v in vals] + [int(r.lam == sel)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def format_table(report: SweepReport) -> str:
    """Aligned text table of one sweep, selected row marked with '*'."""
    sel = report.selected_lambda
    head = f"{'lambda':>7} {'train_loss':>11} {'test_loss':>10} {'test_acc':>9} {'L_lambda(sum)':>14} {'wall_s':>8}"
    lines = [f"seed {report.seed}", head]
    for r in report.rows:
        total = sum(ls.L_lambda for ls in r.layer_losses)
        mark = "*" if r.lam == sel else " "
        lines.append(f"{r.lam:>7.3f} {r.train.loss:>11.5f} {r.test.loss:>10.5f} {r.test.accuracy:>9.4f} "
                     f"{total:>14.6g} {r.wall_s:>8.3f}{mark}")
    lines.append(f"selected lambda = {sel:g}")
    return "\n".join(lines)


def format_summary(multi: MultiSeedReport) -> str:
    lines = [f"{'lambda':>7} {'test_loss':>22} {'test_acc':>22}"]
    for (lam, m, se), (_, ma, sea) in zip(multi.summary("test.loss"), multi.summary("test.accuracy")):
        lines.append(f"{lam:>7.3f} {m:>12.5f} +/- {se:<7.5f} {ma:>12.4f} +/- {sea:<7.4f}")
    lines.append("selected per seed: " + ", ".join(f"{s:g}" for s in multi.selected()))
    return "\n".join(lines)
