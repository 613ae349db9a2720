"""Experiment harness: per-node baseline, context gain and grid sweeps."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import replace
from typing import Callable, Sequence

from .graph import GraphSegment
from .model import param_count
from .synth import DatasetConfig, make_dataset
from .train import TrainConfig, train

log = logging.getLogger(__name__)

SWEEP_KEYS = ("tau", "nodes_per_graph", "filter_dim")


def baseline_mlp(dataset: Sequence[GraphSegment], cfg: TrainConfig):
    """Per-node classifier on the fused features, no graph, same budget as ``cfg``.

    Returns ``(best_val_map, history)``.
    """
    params, hist = train(dataset, replace(cfg, graph=False, bi_dir=False))
    return hist.best_val_map, hist


def context_gain(dataset: Sequence[GraphSegment], cfg: TrainConfig) -> dict:
    """Train the graph model and the per-node baseline on the same split."""
    t0 = time.perf_counter()
    _, hist = train(dataset, cfg)
    t1 = time.perf_counter()
    base, bhist = baseline_mlp(dataset, cfg)
    t2 = time.perf_counter()
    return {"graph_map": hist.best_val_map, "baseline_map": base,
            "gain": hist.best_val_map - base, "graph_seconds": t1 - t0,
            "baseline_seconds": t2 - t1, "graph_history": hist, "baseline_history": bhist}


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{key: [values]}`` in key order."""
    for k in grid:
        if k not in SWEEP_KEYS:
            raise ValueError(f"cannot sweep {k!r}; choose from {SWEEP_KEYS}")
        if not grid[k]:
            raise ValueError(f"empty value list for {k!r}")
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def run_sweep(grid: dict, cfg: TrainConfig, dcfg: DatasetConfig,
              dataset_fn: Callable[[DatasetConfig, int, float], list] | None = None,
              progress=None) -> list[tuple[dict, float]]:
    """Train one model per grid point; returns ``(point_config, best_val_map)`` pairs.

    Segments are rebuilt whenever ``tau`` or ``nodes_per_graph`` change; the
    scenes themselves are the same for every point.
    """
    dataset_fn = dataset_fn or (lambda d, n, tau: make_dataset(
        d, n, tau, directed_same_frame=cfg.directed_same_frame))
    results = []
    for point in expand_grid(grid):
        pcfg = replace(cfg, **point)
        t0 = time.perf_counter()
        data = dataset_fn(dcfg, pcfg.nodes_per_graph, pcfg.tau)
        _, hist = train(data, pcfg)
        seconds = time.perf_counter() - t0
        row = dict(point)
        if "filter_dim" in point:
            mcfg = pcfg.model_config(data[0].visual.shape[1], data[0].audio.shape[1])
            row["params_m"] = round(param_count(mcfg)["millions"], 2)
        row["best_epoch"] = hist.best_epoch
        row["seconds"] = round(seconds, 1)
        log.info("sweep point %s: mAP %.4f (%.0f s)", point, hist.best_val_map, seconds)
        results.append((row, hist.best_val_map))
        if progress is not None:
            progress(row, hist.best_val_map)
    return results
