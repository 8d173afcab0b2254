"""Prune every layer of a trained network from one calibration capture."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .alloc import AllocationPlan, layer_infos, uniform_alloc
from .objectives import DampPolicy, ObjectiveSpec, build_bundle
from .pruners import (
    Kind,
    PrunerConfig,
    PruneResult,
    SparsityPattern,
    magnitude_prune,
    obs_greedy_layer,
    osscar_prune,
    sparsegpt_prune,
    wanda_prune,
)
from .toynet import CalibrationCapture, ToyNet, capture, recalibrate

log = logging.getLogger(__name__)

METHODS = ("sparsegpt", "wanda", "osscar", "obs-greedy", "magnitude")


@dataclass
class NetworkPruneResult:
    net: ToyNet
    layers: list[PruneResult] = field(default_factory=list)

    @property
    def timings(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.layers:
            for k, v in r.timings.items():
                out[k] = out.get(k, 0.0) + v
        return out


def prune_layer(method: str, W_hat, layer_capture, pattern: SparsityPattern, spec: ObjectiveSpec,
                cfg: PrunerConfig) -> PruneResult:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in ("wanda", "magnitude"):
        # diagonal scores ignore damping
        spec = replace(spec, damp=DampPolicy.NONE)
    bundle = build_bundle(layer_capture, W_hat, spec)
    if cfg.Kp is not None and cfg.Kp > bundle.d_out:
        # one row-block size serves layers of different heights
        cfg = replace(cfg, Kp=bundle.d_out)
    if method == "sparsegpt":
        return sparsegpt_prune(W_hat, bundle, pattern, cfg)
    if method == "wanda":
        return wanda_prune(W_hat, bundle, pattern, seed=cfg.seed)
    if method == "osscar":
        if pattern.kind is not Kind.COLUMNS:
            raise ValueError("osscar needs a column pattern such as 'cols:4'")
        return osscar_prune(W_hat, bundle, pattern, cfg)
    if method == "obs-greedy":
        return obs_greedy_layer(W_hat, bundle, pattern, seed=cfg.seed)
    return magnitude_prune(W_hat, pattern, bundle, seed=cfg.seed)


def prune_network(net: ToyNet, X_cal, y_cal, method: str, plan: AllocationPlan | SparsityPattern,
                  spec: ObjectiveSpec | None = None, cfg: PrunerConfig | None = None,
                  recompute: bool = False, cap: CalibrationCapture | None = None) -> NetworkPruneResult:
    """Prune all layers, first to last.

    By default one capture of the dense network serves every layer. With
    ``recompute`` the capture is redone before each layer on the network
    whose earlier layers are already pruned.
    """
    spec = spec or ObjectiveSpec()
    cfg = cfg or PrunerConfig()
    if isinstance(plan, SparsityPattern):
        plan = uniform_alloc(plan, layer_infos(net))
    if len(plan.layers) != len(net.layers):
        raise ValueError(f"plan covers {len(plan.layers)} layers, net has {len(net.layers)}")
    if cap is None and not recompute:
        cap = capture(net, X_cal, y_cal)
    out = net.copy()
    results = []
    for i, (info, pattern) in enumerate(zip(plan.layers, plan.patterns)):
        if recompute:
            cap = recalibrate(out, X_cal, y_cal)
        W_hat = net.layers[i].W
        r = prune_layer(method, W_hat, cap[i], pattern, spec, cfg)
        out.layers[i].W = r.W.copy()
        log.info("%s %s pattern %s: L_lambda %.4g", method, info.name, pattern, r.losses.L_lambda)
        results.append(r)
    return NetworkPruneResult(out, results)

