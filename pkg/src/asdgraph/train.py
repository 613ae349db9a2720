"""Loss, optimiser, learning-rate schedule and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .graph import GraphSegment
from .metrics import map_over_groups
from .model import ModelConfig, ModelParams, init_params, model_backward, model_forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    tau: float = 0.9
    nodes_per_graph: int = 2000
    filter_dim: int = 64
    edge_hidden: int | None = None
    lr0: float = 5e-3
    epochs: int = 70
    batch_size: int = 16
    seed: int = 0
    bi_dir: bool = True
    graph: bool = True
    spatial_feat: bool = True
    directed_same_frame: bool = True
    pos_weight: float = 1.0
    val_fraction: float = 0.2
    precision: str = "float64"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.graph:
            self.bi_dir = False
        for name in ("tau",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("nodes_per_graph", "filter_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr0 < 0:
            raise ValueError("epochs and lr0 must be >= 0")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def model_config(self, d_visual: int, d_audio: int) -> ModelConfig:
        return ModelConfig(d_visual=d_visual, d_audio=d_audio, filter_dim=self.filter_dim,
                           edge_hidden=self.edge_hidden, bi_dir=self.bi_dir,
                           graph=self.graph, spatial_feat=self.spatial_feat)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --- loss ------------------------------------------------------------------

def bce_with_logits(logits, labels, pos_weight: float = 1.0):
    """Mean (optionally positive-weighted) binary cross-entropy.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the exact gradient of
    the mean loss with respect to the logits.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty label set")
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    # -log sigmoid(z) = logaddexp(0, -z); -log(1 - sigmoid(z)) = logaddexp(0, z)
    per = pos_weight * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    grad = (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / y.size
    return float(per.mean()), grad


def bce_loss(scores, labels, pos_weight: float = 1.0):
    """BCE of probabilities; the gradient is taken with respect to the logits."""
    s = np.asarray(scores, dtype=np.float64)
    if np.any((s <= 0) | (s >= 1)):
        raise ValueError("scores must lie strictly inside (0, 1)")
    return bce_with_logits(np.log(s) - np.log1p(-s), labels, pos_weight)


# --- optimiser -------------------------------------------------------------

class Adam:
    """Adam with bias correction; state is keyed by tensor name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr:
                params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: ModelParams, grads: dict, state: Adam, lr: float) -> Adam:
    state.step(params, grads, lr)
    return state


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to 0 at ``cfg.epochs``."""
    if cfg.epochs <= 0:
        return cfg.lr0
    frac = min(max(epoch / cfg.epochs, 0.0), 1.0)
    return max(0.0, cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac)))


# --- epoch loop ------------------------------------------------------------

@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_map: float | None = None

    def to_csv(self, fh) -> None:
        fh.write("epoch,lr,train_loss,val_map\n")
        for r in self.rows:
            val = "" if r["val_map"] is None else repr(r["val_map"])
            fh.write(f"{r['epoch']},{r['lr']!r},{r['train_loss']!r},{val}\n")


def _labels(segments: Sequence[GraphSegment]) -> np.ndarray:
    for s in segments:
        if s.labels is None:
            raise ValueError(f"segment {s.segment_id!r} has unlabelled nodes")
    return np.concatenate([s.labels for s in segments]).astype(np.float64)


def split_segments(segments: Sequence[GraphSegment], val_fraction: float, seed: int):
    """Seeded split by segment; both parts are non-empty when possible."""
    n = len(segments)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    if n > 1:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    val = [segments[i] for i in sorted(order[:n_val])]
    train = [segments[i] for i in sorted(order[n_val:])]
    return train, val


def evaluate(segments: Sequence[GraphSegment], params: ModelParams) -> float | None:
    """mAP over source scenes in eval mode, or None without any positive."""
    if not segments:
        return None
    groups, scores, labels = [], [], []
    for seg in segments:
        s = model_forward(seg, params, "eval")
        scores.append(s)
        labels.append(seg.labels)
        groups.extend([seg.source_id or seg.segment_id] * seg.n_nodes)
    try:
        return map_over_groups(np.concatenate(scores), np.concatenate(labels), groups)
    except ValueError:
        return None


def train_step(batch: Sequence[GraphSegment], params: ModelParams, opt: Adam, lr: float,
               pos_weight: float = 1.0) -> float:
    labels = _labels(batch)
    _, cache = model_forward(batch, params, "train", return_cache=True)
    loss, dlogits = bce_with_logits(cache["logits"], labels, pos_weight)
    grads = model_backward(params, cache, dlogits)
    opt.step(params, grads, lr)
    return loss


def train(dataset: Sequence[GraphSegment], cfg: TrainConfig,
          val: Sequence[GraphSegment] | None = None,
          params: ModelParams | None = None, progress=None):
    """Train on ``dataset``; returns ``(best_params, history)``.

    Without an explicit ``val`` set the segments are split 80/20 (seeded).
    Each epoch reshuffles the training segments into mini-batches of
    ``cfg.batch_size`` segments.  The parameters with the best validation
    mAP are returned (the last ones when there is no validation signal).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    _labels(dataset)
    if val is None:
        train_set, val = split_segments(dataset, cfg.val_fraction, cfg.seed)
    else:
        train_set, val = dataset, list(val)
        _labels(val)
    if params is None:
        mcfg = cfg.model_config(train_set[0].visual.shape[1], train_set[0].audio.shape[1])
        params = init_params(mcfg, seed=cfg.seed, dtype=cfg.dtype)
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    hist = History()
    best = params.copy()

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(len(train_set))
        losses, weights = [], []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b0:b0 + cfg.batch_size]]
            losses.append(train_step(batch, params, opt, lr, cfg.pos_weight))
            weights.append(sum(s.n_nodes for s in batch))
        train_loss = float(np.average(losses, weights=weights))
        val_map = evaluate(val, params)
        hist.rows.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_map": val_map})
        if val_map is not None and (hist.best_val_map is None or val_map > hist.best_val_map):
            hist.best_val_map, hist.best_epoch = val_map, epoch
            best = params.copy()
        elif hist.best_val_map is None:
            best = params.copy()
        log.info("epoch %d lr %.3g loss %.4f val mAP %s", epoch, lr, train_loss,
                 "n/a" if val_map is None else f"{val_map:.4f}")
        if progress is not None:
            progress(hist.rows[-1])

    if cfg.epochs == 0:
        hist.best_val_map = evaluate(val, params)
    return best, hist


# --- gradient check --------------------------------------------------------

def numeric_gradient(segments, params: ModelParams, name: str, labels, pos_weight=1.0,
                     h: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of the train-mode loss with respect to ``params[name]``.

    Only the flat ``indices`` are evaluated (all by default); the rest of the
    returned array is NaN.
    """
    base = params[name]
    out = np.full(base.size, np.nan)
    idx = range(base.size) if indices is None else indices
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            t = base.copy().reshape(-1)
            t[i] += sgn * h
            params[name] = t.reshape(base.shape)
            _, cache = model_forward(segments, params, "train", update_stats=False,
                                     return_cache=True)
            vals.append(bce_with_logits(cache["logits"], labels, pos_weight)[0])
        out[i] = (vals[0] - vals[1]) / (2 * h)
    params[name] = base
    return out.reshape(base.shape)


def relative_error(analytic, numeric, noise: float = 0.0) -> float:
    """Largest elementwise ``max(|a - n| - noise, 0) / max(|a|, |n|, 1e-6)``.

    The 1e-6 floor keeps tiny gradients from dominating.  ``noise`` is the
    absolute resolution of the finite difference: disagreement below it is
    round-off, not a gradient error.  Typical cases are a bias feeding a
    train-mode batch norm (exact gradient zero) and entries near 1e-6 where
    round-off alone exceeds 1e-4 relative.
    """
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    ok = ~np.isnan(n)
    if not ok.any():
        return 0.0
    a, n = a[ok], n[ok]
    big = np.maximum(np.abs(a), np.abs(n))
    err = np.maximum(np.abs(a - n) - noise, 0.0) / np.maximum(big, 1e-6)
    return float(np.max(err))


def fd_noise(loss: float, h: float, dtype=np.float64) -> float:
    """Round-off resolution of a central difference: 16 ulps of the loss over 2h."""
    return 16.0 * np.finfo(dtype).eps * max(1.0, abs(loss)) / (2.0 * h)


def check_gradients(segments, params: ModelParams, labels=None, pos_weight=1.0, h=1e-6,
                    max_entries: int | None = None, seed: int = 0,
                    discount_noise: bool = True) -> dict[str, float]:
    """Max relative error of the analytic gradient per trainable tensor.

    With ``discount_noise`` the finite-difference round-off band (``fd_noise``)
    is subtracted from each absolute gap before dividing.

    Tensors with more than ``max_entries`` entries are checked on a seeded
    random subset of entries; ``None`` checks every entry.
    """
    segments = [segments] if isinstance(segments, GraphSegment) else list(segments)
    if labels is None:
        labels = _labels(segments)
    params = params.astype(np.float64)
    _, cache = model_forward(segments, params, "train", update_stats=False, return_cache=True)
    loss, dlogits = bce_with_logits(cache["logits"], labels, pos_weight)
    grads = model_backward(params, cache, dlogits)
    noise = fd_noise(loss, h) if discount_noise else 0.0
    rng = np.random.default_rng(seed)
    out = {}
    for name in params.trainable():
        size = params[name].size
        idx = None
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        num = numeric_gradient(segments, params, name, labels, pos_weight, h, idx)
        out[name] = relative_error(grads[name], num, noise)
    return out
