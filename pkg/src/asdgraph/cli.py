"""Command-line interface: synthetic data, graph building, training, scoring and reports.

Exit codes: 0 success, 1 internal error (or failed check), 2 bad input,
3 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .graph import build_segment, edge_table, segment_summary
from .metrics import (Prediction, evaluate_predictions, read_predictions, sweep_report,
                      write_predictions)
from .model import (CheckpointError, ModelConfig, init_params, load_checkpoint, model_forward,
                    param_count, read_checkpoint_meta, save_checkpoint)
from .records import RecordError, parse_records, sort_and_partition, stream_stats, write_records
from .synth import DatasetConfig, SceneConfig, gen_scene, make_dataset
from .train import TrainConfig, check_gradients, train

log = logging.getLogger("asdgraph")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT, EXIT_CHECKPOINT = 0, 1, 2, 3
RECORD_SUFFIXES = (".jsonl", ".jsonl.gz", ".ndjson", ".ndjson.gz")
CONFIG_SECTIONS = ("train", "scene", "dataset")


class BadInput(Exception):
    """User-facing input problem (missing path, bad config, bad flag value)."""


# --- config ----------------------------------------------------------------

def load_config(path) -> dict:
    """Read a JSON config with optional sections ``train``, ``scene``, ``dataset``."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise BadInput(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BadInput(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise BadInput(f"{path}: top level must be an object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise BadInput(f"{path}: unknown config section(s) {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, cls, overrides: dict):
    values = dict(cfg.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls.from_dict(values) if hasattr(cls, "from_dict") else cls(**values)
    except (TypeError, ValueError) as exc:
        raise BadInput(f"config section {name!r}: {exc}") from None


def train_config(cfg: dict, args) -> TrainConfig:
    over = {k: getattr(args, k, None) for k in
            ("tau", "epochs", "seed", "precision", "filter_dim", "batch_size", "lr0",
             "pos_weight")}
    over["nodes_per_graph"] = getattr(args, "n", None)
    for flag in ("graph", "bi_dir", "spatial_feat", "directed_same_frame"):
        over[flag] = getattr(args, flag, None)
    return _section(cfg, "train", TrainConfig, over)


def scene_config(cfg: dict, args) -> SceneConfig:
    return _section(cfg, "scene", SceneConfig, {"seed": getattr(args, "scene_seed", None)})


def dataset_config(cfg: dict, args) -> DatasetConfig:
    d = dict(cfg.get("dataset", {}))
    if getattr(args, "n_scenes", None) is not None:
        d["n_scenes"] = args.n_scenes
    unknown = set(d) - {"n_scenes", "seed"}
    if unknown:
        raise BadInput(f"config section 'dataset': unknown keys {sorted(unknown)}")
    try:
        return DatasetConfig(scene=scene_config(cfg, args), **d)
    except (TypeError, ValueError) as exc:
        raise BadInput(f"config section 'dataset': {exc}") from None


# --- data ------------------------------------------------------------------

def record_files(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise BadInput(f"data path not found: {path}")
    files = sorted(p for p in path.iterdir() if p.name.endswith(RECORD_SUFFIXES))
    if not files:
        raise BadInput(f"no record files ({', '.join(RECORD_SUFFIXES)}) in {path}")
    return files


def _source_id(path: Path) -> str:
    name = path.name
    for suf in sorted(RECORD_SUFFIXES, key=len, reverse=True):
        if name.endswith(suf):
            return name[: -len(suf)]
    return path.stem


def load_segments(data, n: int, tau: float, dims=None, directed_same_frame=True):
    """Every record file under ``data`` cut into graph segments of ``n`` nodes."""
    segments = []
    for path in record_files(data):
        src = _source_id(path)
        stream = parse_records(path, dims=dims, source_id=src)
        if dims is None:
            dims = (stream.d_visual, stream.d_audio)
        for k, chunk in enumerate(sort_and_partition(stream, n)):
            segments.append(build_segment(chunk, tau, segment_id=f"{src}/{k}", source_id=src,
                                          directed_same_frame=directed_same_frame))
    return segments


def dataset_for(args, cfg: dict, tcfg: TrainConfig):
    if args.data is not None:
        dims = tuple(args.dims) if getattr(args, "dims", None) else None
        return load_segments(args.data, tcfg.nodes_per_graph, tcfg.tau, dims,
                             tcfg.directed_same_frame)
    if "dataset" in cfg or "scene" in cfg or getattr(args, "n_scenes", None):
        return make_dataset(dataset_config(cfg, args), tcfg.nodes_per_graph, tcfg.tau,
                            tcfg.directed_same_frame)
    raise BadInput("give --data or a config with a 'dataset'/'scene' section")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_path(path) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise BadInput(f"output directory does not exist: {path.parent}")
    return path


# --- commands --------------------------------------------------------------

def cmd_ingest(args) -> int:
    dims = tuple(args.dims) if args.dims else None
    out = []
    for path in record_files(args.data):
        stream = parse_records(path, dims=dims, source_id=_source_id(path))
        info = {"source_id": stream.source_id, "d_visual": stream.d_visual,
                "d_audio": stream.d_audio, "labelled": stream.labelled}
        info.update(stream_stats(stream).as_dict())
        info["segment_sizes"] = [len(c) for c in sort_and_partition(stream, args.n)]
        out.append(info)
    print(json.dumps(out if len(out) > 1 else out[0], indent=2))
    return EXIT_OK


def cmd_build_graph(args) -> int:
    dims = tuple(args.dims) if args.dims else None
    segs = load_segments(args.data, args.n, args.tau, dims, args.directed_same_frame)
    print(json.dumps([segment_summary(s) for s in segs], indent=2))
    if args.edges:
        with open(_out_path(args.edges), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["segment_id", "src", "dst", "edge_set"])
            for seg in segs:
                for src, dst, name in edge_table(seg):
                    w.writerow([seg.segment_id, src, dst, name])
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    dcfg = dataset_config(cfg, args)
    out = Path(args.out)
    if dcfg.n_scenes == 1 and out.name.endswith(RECORD_SUFFIXES):
        _out_path(out)
        write_records(gen_scene(dcfg.scene_config(0), source_id="scene000"), out)
        written = [out]
    else:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for k in range(dcfg.n_scenes):
            path = out / f"scene{k:03d}.jsonl.gz"
            write_records(gen_scene(dcfg.scene_config(k), source_id=f"scene{k:03d}"), path)
            written.append(path)
    print(json.dumps({"files": [str(p) for p in written],
                      "scene": dcfg.scene.to_dict(), "n_scenes": dcfg.n_scenes}, indent=2))
    return EXIT_OK


def _history_outputs(hist, stem: Path, title: str | None = None):
    from .plots import plot_history

    csv_path = stem.with_name(stem.name + ".history.csv")
    with open(csv_path, "w") as fh:
        hist.to_csv(fh)
    if hist.rows:
        plot_history(hist.rows, stem.with_name(stem.name + ".history.png"), title)
    return csv_path


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = train_config(cfg, args)
    out = _out_path(args.out)
    data = dataset_for(args, cfg, tcfg)
    effective = {"train": tcfg.to_dict()}
    if args.data is None:
        effective["dataset"] = {"n_scenes": dataset_config(cfg, args).n_scenes,
                                "seed": dataset_config(cfg, args).seed}
        effective["scene"] = scene_config(cfg, args).to_dict()
    _write_json(out.with_name(out.name + ".config.json"), effective)
    best, hist = train(data, tcfg)
    save_checkpoint(out, best, extra={"train_config": tcfg.to_dict(),
                                      "best_epoch": hist.best_epoch,
                                      "best_val_map": hist.best_val_map})
    csv_path = _history_outputs(hist, out, f"tau={tcfg.tau:g}, n={tcfg.nodes_per_graph}")
    print(json.dumps({"checkpoint": str(out), "history": str(csv_path),
                      "best_epoch": hist.best_epoch, "best_val_map": hist.best_val_map}))
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise BadInput(f"checkpoint not found: {args.checkpoint}")
    meta = read_checkpoint_meta(args.checkpoint)
    saved = meta.get("extra", {}).get("train_config", {})
    tau = args.tau if args.tau is not None else saved.get("tau", TrainConfig.tau)
    n = args.n if args.n is not None else saved.get("nodes_per_graph", TrainConfig.nodes_per_graph)
    dsf = saved.get("directed_same_frame", True)
    dims = tuple(args.dims) if args.dims else None
    segs = load_segments(args.data, n, tau, dims, dsf)
    try:
        mcfg = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{args.checkpoint}: bad model config ({exc})") from None
    expect = replace(mcfg, d_visual=segs[0].visual.shape[1], d_audio=segs[0].audio.shape[1])
    params, _ = load_checkpoint(args.checkpoint, expect=expect)
    rows = []
    for seg in segs:
        scores = model_forward(seg, params, "eval")
        for i, s in enumerate(scores):
            label = None if seg.labels is None else int(seg.labels[i])
            rows.append(Prediction(seg.segment_id, i, float(s), label))
    with open(_out_path(args.out), "w", newline="") as fh:
        write_predictions(rows, fh)
    print(json.dumps({"predictions": str(args.out), "n": len(rows), "segments": len(segs)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.predictions)
    if not path.is_file():
        raise BadInput(f"predictions file not found: {path}")
    with open(path, newline="") as fh:
        rows = read_predictions(fh)
    res = evaluate_predictions(rows, args.group_by, args.ties)
    res["ties"] = args.ties
    print(json.dumps(res))
    if args.out:
        out = _out_path(args.out)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(res))
            w.writerow(list(res.values()))
        from .plots import plot_scores

        lab = [r for r in rows if r.label is not None]
        plot_scores([r.score for r in lab], [r.label for r in lab],
                    out.with_suffix(".scores.png"))
    return EXIT_OK


def _parse_grid(items) -> dict:
    grid = {}
    casts = {"tau": float, "nodes_per_graph": int, "n": int, "filter_dim": int}
    for item in items or []:
        key, _, vals = item.partition("=")
        key = key.strip()
        if key not in casts or not vals:
            raise BadInput(f"bad --grid item {item!r}; use tau=..., n=... or filter_dim=...")
        try:
            values = [casts[key](v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise BadInput(f"bad value in --grid {item!r}") from None
        grid["nodes_per_graph" if key == "n" else key] = values
    if not grid:
        raise BadInput("sweep needs at least one --grid")
    return grid


def cmd_sweep(args) -> int:
    from .bench import run_sweep
    from .plots import plot_sweep

    cfg = load_config(args.config)
    tcfg = train_config(cfg, args)
    grid = _parse_grid(args.grid)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_fn, dcfg = None, None
    if args.data is not None:
        dims = tuple(args.dims) if args.dims else None
        record_files(args.data)  # fail on a bad path before any training

        def dataset_fn(_, n, tau):
            return load_segments(args.data, n, tau, dims, tcfg.directed_same_frame)
    else:
        dcfg = dataset_config(cfg, args)
    _write_json(out_dir / "sweep.config.json",
                {"train": tcfg.to_dict(), "grid": grid,
                 **({} if dcfg is None else {"dataset": {"n_scenes": dcfg.n_scenes,
                                                         "seed": dcfg.seed},
                                             "scene": dcfg.scene.to_dict()})})
    results = run_sweep(grid, tcfg, dcfg or DatasetConfig(), dataset_fn)
    report = sweep_report(results, params=list(grid))
    (out_dir / "sweep.csv").write_text(report)
    for key in grid:
        if len(grid[key]) > 1:
            plot_sweep(results, key, out_dir / f"sweep_{key}.png")
    sys.stdout.write(report)
    return EXIT_OK


def cmd_check_grad(args) -> int:
    from .graph import segment_from_arrays

    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_visual=args.d_visual, d_audio=args.d_audio, filter_dim=args.filter_dim,
                      spatial_dim=args.spatial_dim)
    segs = []
    for k in range(args.segments):
        n = int(rng.integers(args.min_nodes, args.max_nodes + 1))
        n_ids = 3
        slots = rng.choice(n_ids * (n // n_ids + 3), size=n, replace=False)
        labels = (rng.random(n) < 0.4).astype(np.int8)
        labels[0] = 1
        segs.append(segment_from_arrays(
            rng.uniform(0, 1, (n, 4)), (slots // n_ids) / 5.0,
            [f"id{j}" for j in slots % n_ids], rng.standard_normal((n, cfg.d_visual)),
            rng.standard_normal((n, cfg.d_audio)), labels, args.tau, segment_id=f"g{k}"))
    params = init_params(cfg, seed=seed)
    # random biases and BN affine terms keep ReLU inputs off their kinks
    for name in params.trainable():
        if name.endswith("bias") or ".bn." in name:
            params[name] = params[name] + rng.normal(0, 0.1, params[name].shape)
    worst = 0.0
    print("tensor,max_rel_error")
    for seg in segs:
        errs = check_gradients(seg, params, max_entries=args.max_entries, seed=seed,
                               discount_noise=args.noise_band)
        worst = max(worst, max(errs.values()))
        for name, e in errs.items():
            print(f"{seg.segment_id}:{name},{e:.3e}")
    ok = worst <= args.tol
    print(json.dumps({"max_rel_error": worst, "tolerance": args.tol, "passed": ok}))
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_param_count(args) -> int:
    rows = []
    for f in args.filter_dim:
        cfg = ModelConfig(d_visual=args.d_visual, d_audio=args.d_audio, filter_dim=f,
                          edge_hidden=args.edge_hidden)
        pc = param_count(cfg)
        rows.append((f, pc))
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.per_layer:
        w.writerow(["filter_dim", "layer", "params"])
        for f, pc in rows:
            for layer, k in pc["per_layer"].items():
                w.writerow([f, layer, k])
    w.writerow(["filter_dim", "params", "params_m", "mb_fp32", "mib_fp32"])
    for f, pc in rows:
        w.writerow([f, pc["total"], f"{pc['millions']:.2f}", f"{pc['mb_fp32']:.3f}",
                    f"{pc['mib_fp32']:.3f}"])
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _add_data(p, required=True):
    p.add_argument("--data", required=required, default=None,
                   help="record file or directory of record files (.jsonl[.gz])")
    p.add_argument("--dims", type=int, nargs=2, metavar=("D_VISUAL", "D_AUDIO"),
                   help="expected feature lengths (default: inferred from the first record)")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config with train/scene/dataset sections")
    p.add_argument("--tau", type=float, help="temporal edge window in seconds (default 0.9)")
    p.add_argument("--n", type=int, help="nodes per graph segment (default 2000)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr0", type=float, help="initial learning rate (default 5e-3)")
    p.add_argument("--filter-dim", type=int, dest="filter_dim")
    p.add_argument("--pos-weight", type=float, dest="pos_weight")
    p.add_argument("--precision", choices=["float64", "float32"])
    p.add_argument("--n-scenes", type=int, dest="n_scenes",
                   help="synthetic scenes to generate when --data is not given")
    for flag, help_ in [("graph", "graph edges (off = per-node baseline)"),
                        ("bi-dir", "three-stream forward/undirected/backward model"),
                        ("spatial-feat", "box projection into the visual branch"),
                        ("directed-same-frame", "same-frame edges in forward/backward sets")]:
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), default=None,
                       action=argparse.BooleanOptionalAction, help=help_)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asdgraph", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version",
                    version=json.dumps({"name": "asdgraph", "version": __version__}))
    ap.add_argument("--log-level", default="WARNING",
                    choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    ap.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate record files and print stream statistics")
    _add_data(p)
    p.add_argument("--n", type=int, default=2000)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-graph", help="build the three edge sets and summarise them")
    _add_data(p)
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--directed-same-frame", default=True,
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--edges", help="write every edge to this CSV file")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("synth", help="generate labelled synthetic scenes")
    p.add_argument("--config")
    p.add_argument("--out", required=True,
                   help="record file (one scene) or directory (several scenes)")
    p.add_argument("--n-scenes", type=int, dest="n_scenes")
    p.add_argument("--scene-seed", type=int, dest="scene_seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoint, history CSV and plot")
    _add_train_flags(p)
    _add_data(p, required=False)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score every node with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.add_argument("--tau", type=float, help="default: value stored in the checkpoint")
    p.add_argument("--n", type=int, help="default: value stored in the checkpoint")
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="AP / mAP of a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ties", choices=["stable", "pessimistic"], default="stable")
    p.add_argument("--group-by", choices=["segment", "all"], default="segment")
    p.add_argument("--out", help="report CSV (a score histogram is written next to it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train over a grid of tau / n / filter_dim")
    _add_train_flags(p)
    _add_data(p, required=False)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...",
                   help="swept values, e.g. tau=0.1,0.9,3 (repeatable)")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-grad", help="finite-difference check of every gradient")
    p.add_argument("--segments", type=int, default=2)
    p.add_argument("--min-nodes", type=int, default=10, dest="min_nodes")
    p.add_argument("--max-nodes", type=int, default=20, dest="max_nodes")
    p.add_argument("--filter-dim", type=int, default=8, dest="filter_dim")
    p.add_argument("--d-visual", type=int, default=12, dest="d_visual")
    p.add_argument("--d-audio", type=int, default=10, dest="d_audio")
    p.add_argument("--spatial-dim", type=int, default=8, dest="spatial_dim")
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--max-entries", type=int, default=None, dest="max_entries",
                   help="check at most this many entries per tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--no-noise-band", dest="noise_band", action="store_false",
                   help="do not discount finite-difference round-off")
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("param-count", help="trainable parameter table")
    p.add_argument("--filter-dim", type=int, nargs="+", default=[64], dest="filter_dim")
    p.add_argument("--d-visual", type=int, default=512, dest="d_visual")
    p.add_argument("--d-audio", type=int, default=512, dest="d_audio")
    p.add_argument("--edge-hidden", type=int, default=None, dest="edge_hidden")
    p.add_argument("--per-layer", action="store_true", dest="per_layer")
    p.set_defaults(func=cmd_param_count)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (BadInput, RecordError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
