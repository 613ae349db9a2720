"""Three-stream graph network for per-node speaking scores.

Layer map (tensor name prefix -> layer):

    spatial            4-D box -> 64-D spatial projection
    visual, visual.bn  [visual, spatial] -> F, batch norm, ReLU
    audio, audio.bn    audio -> F, batch norm, ReLU       (the two are summed)
    edge.<s>           EDGE-CONV of stream s, MLP 2F -> H -> F, then BN, ReLU
    sage_mid           SAGE-CONV F -> F, weights shared by all streams
    sage_mid.bn.<s>    per-stream BN, ReLU after the shared layer
    sage_out.<s>       SAGE-CONV F -> 1 per stream

Streams ``s`` are ``fwd``, ``und`` and ``bwd``; the three scalar outputs are
summed and squashed by a sigmoid.  F is the filter dimension (64 by
default) and H the EDGE-CONV hidden width (defaults to F).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import layers
from .graph import STREAMS, EdgeSet, GraphSegment
from .layers import EdgeMLP

CHECKPOINT_FORMAT = 1

LAYER_ROWS = {
    "spatial": "(4) Linear 4 -> 64",
    "visual": "(5)-(6) concat + Linear 576 -> 64, BN, ReLU",
    "audio": "(7) Linear 512 -> 64, BN, ReLU",
    "edge.fwd": "(9) EDGE-CONV forward, BN, ReLU",
    "edge.und": "(10) EDGE-CONV undirected, BN, ReLU",
    "edge.bwd": "(11) EDGE-CONV backward, BN, ReLU",
    "sage_mid": "(12)-(14) SAGE-CONV shared, per-stream BN, ReLU",
    "sage_out.fwd": "(15) SAGE-CONV forward -> 1",
    "sage_out.und": "(16) SAGE-CONV undirected -> 1",
    "sage_out.bwd": "(17) SAGE-CONV backward -> 1",
}


class CheckpointError(Exception):
    """Checkpoint missing, malformed or incompatible with the requested model."""


@dataclass(frozen=True)
class ModelConfig:
    d_visual: int = 512
    d_audio: int = 512
    filter_dim: int = 64
    edge_hidden: int | None = None
    spatial_dim: int = 64
    bi_dir: bool = True
    graph: bool = True
    spatial_feat: bool = True
    share_mid: bool = True
    bn_eps: float = layers.BN_EPS
    bn_momentum: float = layers.BN_MOMENTUM

    def __post_init__(self):
        for name in ("d_visual", "d_audio", "filter_dim", "spatial_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.edge_hidden is not None and self.edge_hidden < 1:
            raise ValueError("edge_hidden must be positive")

    @property
    def hidden(self) -> int:
        return self.edge_hidden or self.filter_dim

    @property
    def streams(self) -> tuple[str, ...]:
        # without graph edges the directed streams collapse to the same per-node map
        return STREAMS if (self.bi_dir and self.graph) else ("und",)

    def mid_name(self, stream: str) -> str:
        return "sage_mid" if self.share_mid else f"sage_mid.{stream}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _bn_shapes(prefix, width):
    return {f"{prefix}.weight": (width,), f"{prefix}.bias": (width,),
            f"{prefix}.running_mean": (width,), f"{prefix}.running_var": (width,)}


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor (trainable and running statistics)."""
    F, H = cfg.filter_dim, cfg.hidden
    shapes = {}
    vis_in = cfg.d_visual
    if cfg.spatial_feat:
        shapes["spatial.weight"] = (cfg.spatial_dim, 4)
        shapes["spatial.bias"] = (cfg.spatial_dim,)
        vis_in += cfg.spatial_dim
    shapes["visual.weight"] = (F, vis_in)
    shapes["visual.bias"] = (F,)
    shapes.update(_bn_shapes("visual.bn", F))
    shapes["audio.weight"] = (F, cfg.d_audio)
    shapes["audio.bias"] = (F,)
    shapes.update(_bn_shapes("audio.bn", F))
    for s in cfg.streams:
        shapes[f"edge.{s}.lin1.weight"] = (H, 2 * F)
        shapes[f"edge.{s}.lin1.bias"] = (H,)
        shapes[f"edge.{s}.lin2.weight"] = (F, H)
        shapes[f"edge.{s}.lin2.bias"] = (F,)
        shapes.update(_bn_shapes(f"edge.{s}.bn", F))
    for s in cfg.streams:
        mid = cfg.mid_name(s)
        shapes[f"{mid}.weight"] = (F, F)
        shapes[f"{mid}.bias"] = (F,)
    for s in cfg.streams:
        shapes.update(_bn_shapes(f"sage_mid.bn.{s}", F))
    for s in cfg.streams:
        shapes[f"sage_out.{s}.weight"] = (1, F)
        shapes[f"sage_out.{s}.bias"] = (1,)
    return shapes


def is_trainable(name: str) -> bool:
    return not (name.endswith(".running_mean") or name.endswith(".running_var"))


class ModelParams:
    """Named tensor store.  The shared SAGE layer is held exactly once."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    @property
    def dtype(self):
        return self.tensors["visual.weight"].dtype

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if is_trainable(k)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def edge_mlp(self, s: str) -> EdgeMLP:
        t = self.tensors
        return EdgeMLP(t[f"edge.{s}.lin1.weight"], t[f"edge.{s}.lin1.bias"],
                       t[f"edge.{s}.lin2.weight"], t[f"edge.{s}.lin2.bias"])

    def bn(self, prefix: str) -> dict:
        return {k: self.tensors[f"{prefix}.{k}"]
                for k in ("weight", "bias", "running_mean", "running_var")}


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith(".running_var") or (".bn" in name and name.endswith(".weight")):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".weight"):
            fan_out, fan_in = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(cfg, tensors)


def param_count(params_or_cfg) -> dict:
    """Count trainable scalars (running statistics excluded) and their byte sizes."""
    cfg = params_or_cfg.cfg if isinstance(params_or_cfg, ModelParams) else params_or_cfg
    shapes = tensor_shapes(cfg)
    per_layer = {}
    total = 0
    for name, shape in shapes.items():
        if not is_trainable(name):
            continue
        n = int(np.prod(shape))
        layer = _layer_of(name)
        per_layer[layer] = per_layer.get(layer, 0) + n
        total += n
    return {
        "total": total,
        "millions": total / 1e6,
        "bytes_fp32": 4 * total,
        "bytes_fp64": 8 * total,
        "mb_fp32": 4 * total / 1e6,
        "mib_fp32": 4 * total / 2**20,
        "per_layer": per_layer,
    }


def _layer_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("edge", "sage_out"):
        return ".".join(parts[:2])
    if parts[0] == "sage_mid" and len(parts) > 2 and parts[1] == "bn":
        return "sage_mid.bn"
    return parts[0]


# --- forward / backward ----------------------------------------------------

def _as_list(segments) -> list[GraphSegment]:
    if isinstance(segments, GraphSegment):
        return [segments]
    segments = list(segments)
    if not segments:
        raise ValueError("no segments given")
    return segments


def _offsets(segments):
    sizes = [s.n_nodes for s in segments]
    return np.concatenate(([0], np.cumsum(sizes)))


def _edges(seg: GraphSegment, stream: str, cfg: ModelConfig) -> EdgeSet:
    return seg.edge_set(stream) if cfg.graph else seg.self_loops


def _inputs(segments, cfg: ModelConfig, dtype):
    box = np.concatenate([s.box for s in segments]).astype(dtype, copy=False)
    vis = np.concatenate([s.visual for s in segments]).astype(dtype, copy=False)
    aud = np.concatenate([s.audio for s in segments]).astype(dtype, copy=False)
    if vis.shape[1] != cfg.d_visual or aud.shape[1] != cfg.d_audio:
        raise ValueError(
            f"feature dims ({vis.shape[1]}, {aud.shape[1]}) do not match model "
            f"({cfg.d_visual}, {cfg.d_audio})")
    return box, vis, aud


class _BN:
    """Runs one batch-norm layer and remembers where its statistics live."""

    def __init__(self, params: ModelParams, prefix: str, mode: str, updates: dict):
        self.params, self.prefix, self.mode, self.updates = params, prefix, mode, updates

    def __call__(self, X):
        p, cfg = self.params, self.params.cfg
        Y, cache, (m, v) = layers.batch_norm_forward(
            X, p[f"{self.prefix}.weight"], p[f"{self.prefix}.bias"],
            p[f"{self.prefix}.running_mean"], p[f"{self.prefix}.running_var"],
            self.mode, cfg.bn_eps, cfg.bn_momentum)
        if self.mode == "train":
            self.updates[f"{self.prefix}.running_mean"] = m
            self.updates[f"{self.prefix}.running_var"] = v
        return Y, cache


def fuse_features(segments, params: ModelParams, mode: str = "eval", *, _cache=None,
                  _updates=None) -> np.ndarray:
    """Fused 64-D node features: ReLU(BN(visual branch)) + ReLU(BN(audio branch))."""
    segments = _as_list(segments)
    cfg, p = params.cfg, params
    box, vis, aud = _inputs(segments, cfg, p.dtype)
    updates = {} if _updates is None else _updates
    if cfg.spatial_feat:
        spat = box @ p["spatial.weight"].T + p["spatial.bias"]
        vin = np.concatenate([vis, spat], axis=1)
    else:
        vin = vis
    zv = vin @ p["visual.weight"].T + p["visual.bias"]
    yv, bnv = _BN(p, "visual.bn", mode, updates)(zv)
    za = aud @ p["audio.weight"].T + p["audio.bias"]
    ya, bna = _BN(p, "audio.bn", mode, updates)(za)
    h = np.maximum(yv, 0.0) + np.maximum(ya, 0.0)
    if _cache is not None:
        _cache.update(box=box, vin=vin, aud=aud, yv=yv, ya=ya, bnv=bnv, bna=bna, h=h)
    if _updates is None and mode == "train":
        for k, v in updates.items():
            p[k] = v
    return h


def _per_segment(fn, X, segments, offsets, cfg, stream):
    outs, caches = [], []
    for k, seg in enumerate(segments):
        o0, o1 = offsets[k], offsets[k + 1]
        y, c = fn(X[o0:o1], _edges(seg, stream, cfg))
        outs.append(y)
        caches.append(c)
    return np.concatenate(outs), caches


def model_forward(segments, params: ModelParams, mode: str = "eval", *,
                  update_stats: bool = True, return_cache: bool = False):
    """Per-node scores in (0, 1) for one segment or a batch of segments.

    In train mode batch-norm statistics are taken over every node of the
    batch; the running statistics are updated in ``params`` unless
    ``update_stats`` is False.  With ``return_cache`` the function returns
    ``(scores, cache)`` for :func:`model_backward`.
    """
    segments = _as_list(segments)
    cfg, p = params.cfg, params
    offsets = _offsets(segments)
    cache = {"mode": mode, "segments": segments, "offsets": offsets}
    updates = {}
    h = fuse_features(segments, p, mode, _cache=cache, _updates=updates)
    logits = np.zeros((h.shape[0], 1), dtype=h.dtype)
    for s in cfg.streams:
        g = p.edge_mlp(s)
        z1, ec = _per_segment(lambda X, es: layers.edge_conv_forward(X, es, g),
                              h, segments, offsets, cfg, s)
        y1, bn1 = _BN(p, f"edge.{s}.bn", mode, updates)(z1)
        a = np.maximum(y1, 0.0)
        mid = cfg.mid_name(s)
        W, b = p[f"{mid}.weight"], p[f"{mid}.bias"]
        z2, sc2 = _per_segment(lambda X, es: layers.sage_conv_forward(X, es, W, b),
                               a, segments, offsets, cfg, s)
        y2, bn2 = _BN(p, f"sage_mid.bn.{s}", mode, updates)(z2)
        bact = np.maximum(y2, 0.0)
        Wo, bo = p[f"sage_out.{s}.weight"], p[f"sage_out.{s}.bias"]
        c, sc3 = _per_segment(lambda X, es: layers.sage_conv_forward(X, es, Wo, bo),
                              bact, segments, offsets, cfg, s)
        logits += c
        cache[s] = dict(ec=ec, y1=y1, bn1=bn1, a=a, sc2=sc2, y2=y2, bn2=bn2,
                        bact=bact, sc3=sc3)
    logits = logits[:, 0]
    scores = np.clip(layers.sigmoid(logits), np.finfo(logits.dtype).tiny,
                     1.0 - np.finfo(logits.dtype).epsneg)
    cache["logits"] = logits
    if mode == "train" and update_stats:
        for k, v in updates.items():
            p[k] = v
    if return_cache:
        return scores, cache
    return scores


def _per_segment_back(fn, dY, segments, offsets, caches, cfg, stream):
    dX = np.empty_like(dY) if dY.ndim == 2 else None
    grads = None
    outs = []
    for k, seg in enumerate(segments):
        o0, o1 = offsets[k], offsets[k + 1]
        res = fn(dY[o0:o1], _edges(seg, stream, cfg), caches[k])
        outs.append(res[0])
        grads = list(res[1:]) if grads is None else [a + b for a, b in zip(grads, res[1:])]
    return np.concatenate(outs), grads


def model_backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> dict:
    """Reverse-mode gradients of every trainable tensor.

    ``dlogits`` is the loss gradient with respect to the pre-sigmoid node
    logits.  The returned dict mirrors the trainable tensor names; the
    shared SAGE weight accumulates the contributions of all streams.
    """
    if not cache or "logits" not in cache:
        raise ValueError("model_backward needs the cache of a forward pass")
    cfg, p = params.cfg, params
    segments, offsets = cache["segments"], cache["offsets"]
    grads = {k: np.zeros_like(p[k]) for k in p.trainable()}
    dlog = np.asarray(dlogits, dtype=p.dtype).reshape(-1, 1)
    dh = np.zeros_like(cache["h"])

    for s in cfg.streams:
        c = cache[s]
        Wo = p[f"sage_out.{s}.weight"]
        dbact, (dWo, dbo) = _per_segment_back(
            lambda dY, es, S: layers.sage_conv_backward(dY, es, Wo, S),
            dlog, segments, offsets, c["sc3"], cfg, s)
        grads[f"sage_out.{s}.weight"] += dWo
        grads[f"sage_out.{s}.bias"] += dbo
        dy2 = dbact * (c["y2"] > 0)
        dz2, dg, db = layers.batch_norm_backward(dy2, c["bn2"])
        grads[f"sage_mid.bn.{s}.weight"] += dg
        grads[f"sage_mid.bn.{s}.bias"] += db
        mid = cfg.mid_name(s)
        W = p[f"{mid}.weight"]
        da, (dW, dbm) = _per_segment_back(
            lambda dY, es, S: layers.sage_conv_backward(dY, es, W, S),
            dz2, segments, offsets, c["sc2"], cfg, s)
        grads[f"{mid}.weight"] += dW
        grads[f"{mid}.bias"] += dbm
        dy1 = da * (c["y1"] > 0)
        dz1, dg, db = layers.batch_norm_backward(dy1, c["bn1"])
        grads[f"edge.{s}.bn.weight"] += dg
        grads[f"edge.{s}.bn.bias"] += db
        g = p.edge_mlp(s)
        dhs, (dW1, db1, dW2, db2) = _per_segment_back(
            lambda dY, es, ec: layers.edge_conv_backward(dY, es, g, ec),
            dz1, segments, offsets, c["ec"], cfg, s)
        grads[f"edge.{s}.lin1.weight"] += dW1
        grads[f"edge.{s}.lin1.bias"] += db1
        grads[f"edge.{s}.lin2.weight"] += dW2
        grads[f"edge.{s}.lin2.bias"] += db2
        dh += dhs

    # fusion: h = relu(yv) + relu(ya)
    dyv = dh * (cache["yv"] > 0)
    dzv, dg, db = layers.batch_norm_backward(dyv, cache["bnv"])
    grads["visual.bn.weight"] += dg
    grads["visual.bn.bias"] += db
    grads["visual.weight"] += dzv.T @ cache["vin"]
    grads["visual.bias"] += dzv.sum(axis=0)
    dya = dh * (cache["ya"] > 0)
    dza, dg, db = layers.batch_norm_backward(dya, cache["bna"])
    grads["audio.bn.weight"] += dg
    grads["audio.bn.bias"] += db
    grads["audio.weight"] += dza.T @ cache["aud"]
    grads["audio.bias"] += dza.sum(axis=0)
    if cfg.spatial_feat:
        dspat = dzv @ p["visual.weight"][:, cfg.d_visual:]
        grads["spatial.weight"] += dspat.T @ cache["box"]
        grads["spatial.bias"] += dspat.sum(axis=0)
    return grads


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Write a ``.npz`` archive of named tensors plus a JSON header.

    The header (``__meta__``) records the format version, the model config,
    tensor shapes and the layer map; ``extra`` is stored alongside.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": params.cfg.to_dict(),
        "dtype": str(params.dtype),
        "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
        "layers": LAYER_ROWS,
        "extra": extra or {},
    }
    arrays = {k: v for k, v in params.tensors.items()}
    arrays["__meta__"] = np.array(json.dumps(meta))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_meta(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            return json.loads(str(z["__meta__"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[ModelParams, dict]:
    """Load a checkpoint; validate every tensor against ``expect`` if given.

    Raises :class:`CheckpointError` naming the first offending tensor.
    """
    meta = read_checkpoint_meta(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')!r}")
    cfg = ModelConfig.from_dict(meta["model_config"])
    shapes = tensor_shapes(expect or cfg)
    tensors = {}
    with np.load(path, allow_pickle=False) as z:
        stored = set(z.files) - {"__meta__"}
        for name, shape in shapes.items():
            if name not in stored:
                raise CheckpointError(f"tensor {name!r} missing from checkpoint")
            arr = z[name]
            if tuple(arr.shape) != tuple(shape):
                raise CheckpointError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
            tensors[name] = arr
        extra = stored - set(shapes)
        if extra:
            raise CheckpointError(f"unexpected tensor {sorted(extra)[0]!r} in checkpoint")
    return ModelParams(expect or cfg, tensors), meta
