"""Labelled multi-speaker scenes with a planted, noisy audio-visual signal.

Every identity is visible in every frame.  An alternating renewal process
switches between speech turns (one random identity talks) and silences.
Per node::

    visual = identity_embedding + speaking * strength * u_visual + noise
    audio  = anyone_speaking * strength * u_audio + noise      (shared per frame)

``u_visual`` and ``u_audio`` are fixed unit directions shared by all scenes,
so a model trained on some scenes transfers to others.  Noise is i.i.d.
Gaussian with standard deviation ``feature_noise_sigma`` per component.
A single frame is therefore ambiguous, while the speaking state persists
over a turn, so evidence pooled over time is far more reliable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, stats

from .graph import GraphSegment, segment_from_arrays
from .records import FaceRecord, RecordStream

# directions are drawn from this fixed seed, independent of the scene seed
_WORLD_SEED = 20220707


@dataclass(frozen=True)
class SceneConfig:
    n_identities: int = 2
    duration: float = 120.0
    fps: float = 25.0
    turn_length_mean: float = 3.0
    gap_length_mean: float = 1.0
    feature_noise_sigma: float = 0.86
    signal_strength: float = 1.0
    identity_scale: float = 1.0
    box_drift: float = 0.004
    speaker_position_bias: float = 0.0
    d_visual: int = 512
    d_audio: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("n_identities", "duration", "fps", "turn_length_mean",
                     "gap_length_mean", "d_visual", "d_audio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("feature_noise_sigma", "signal_strength", "identity_scale", "box_drift",
                     "speaker_position_bias"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.fps * self.duration < 1:
            raise ValueError("fps * duration must be >= 1")

    @property
    def n_frames(self) -> int:
        return max(1, int(round(self.fps * self.duration)))

    @property
    def speech_fraction(self) -> float:
        return self.turn_length_mean / (self.turn_length_mean + self.gap_length_mean)

    @property
    def positive_rate(self) -> float:
        return self.speech_fraction / self.n_identities

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@lru_cache(maxsize=8)
def signal_directions(d_visual: int, d_audio: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_WORLD_SEED)
    u_v = rng.standard_normal(d_visual)
    u_a = rng.standard_normal(d_audio)
    u_v /= np.linalg.norm(u_v)
    u_a /= np.linalg.norm(u_a)
    u_v.setflags(write=False)
    u_a.setflags(write=False)
    return u_v, u_a


def speaker_track(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Active identity index per frame, -1 during silence."""
    n = cfg.n_frames
    out = np.full(n, -1, dtype=np.int64)
    t = 0.0
    speaking = rng.random() < cfg.speech_fraction
    end = cfg.n_frames / cfg.fps
    while t < end:
        if speaking:
            dur = rng.exponential(cfg.turn_length_mean)
            who = int(rng.integers(cfg.n_identities))
            k0, k1 = int(np.ceil(t * cfg.fps)), int(np.ceil((t + dur) * cfg.fps))
            out[k0:min(k1, n)] = who
        else:
            dur = rng.exponential(cfg.gap_length_mean)
        t += dur
        speaking = not speaking
    return out


def _boxes(cfg: SceneConfig, rng, speaker):
    n, k = cfg.n_frames, cfg.n_identities
    cx0 = (np.arange(k) + 0.5) / k
    base = np.stack([cx0, np.full(k, 0.4), np.full(k, 0.3), np.full(k, 0.2)], axis=1)
    steps = rng.normal(0.0, cfg.box_drift, size=(n, k, 4))
    walk = base[None] + np.cumsum(steps, axis=0)
    # reflect into a band around the start so boxes stay plausible
    lo, hi = base[None] - 0.15, base[None] + 0.15
    walk = np.where(walk > hi, 2 * hi - walk, walk)
    walk = np.where(walk < lo, 2 * lo - walk, walk)
    if cfg.speaker_position_bias:
        active = speaker[:, None] == np.arange(k)[None]
        walk[..., 0] += cfg.speaker_position_bias * active * (0.5 - walk[..., 0])
    return np.clip(walk, 0.0, 1.0)


def gen_scene_arrays(cfg: SceneConfig) -> dict:
    """Generate one scene as frame-major arrays (node = frame * n_ids + identity)."""
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_frames, cfg.n_identities
    u_v, u_a = signal_directions(cfg.d_visual, cfg.d_audio)
    speaker = speaker_track(cfg, rng)
    boxes = _boxes(cfg, rng, speaker)

    emb = rng.standard_normal((k, cfg.d_visual))
    emb -= np.outer(emb @ u_v, u_v)
    emb *= cfg.identity_scale / np.linalg.norm(emb, axis=1, keepdims=True)

    labels = (speaker[:, None] == np.arange(k)[None]).astype(np.int8)
    anyone = (speaker >= 0).astype(np.float64)
    sig = cfg.signal_strength
    visual = (emb[None, :, :] + (sig * labels)[..., None] * u_v
              + cfg.feature_noise_sigma * rng.standard_normal((n, k, cfg.d_visual)))
    audio_f = (sig * anyone)[:, None] * u_a + cfg.feature_noise_sigma * rng.standard_normal(
        (n, cfg.d_audio))
    audio = np.broadcast_to(audio_f[:, None, :], (n, k, cfg.d_audio))
    time = np.arange(n) / cfg.fps
    return {
        "time": np.repeat(time, k),
        "identity": [f"id{j}" for j in range(k)] * n,
        "box": boxes.reshape(n * k, 4),
        "visual": visual.reshape(n * k, cfg.d_visual),
        "audio": audio.reshape(n * k, cfg.d_audio),
        "labels": labels.reshape(n * k),
        "speaker": speaker,
    }


def gen_scene(cfg: SceneConfig, source_id: str | None = None) -> RecordStream:
    """One labelled scene as a record stream sorted by (time, identity)."""
    a = gen_scene_arrays(cfg)
    records = [
        FaceRecord(tuple(float(x) for x in a["box"][i]), float(a["time"][i]), a["identity"][i],
                   a["visual"][i], a["audio"][i], int(a["labels"][i]))
        for i in range(a["time"].size)
    ]
    return RecordStream(records, cfg.d_visual, cfg.d_audio,
                        source_id if source_id is not None else f"scene{cfg.seed}")


def scene_segments(cfg: SceneConfig, n: int, tau: float, source_id: str | None = None,
                   directed_same_frame: bool = True) -> list[GraphSegment]:
    """Generate a scene and cut it straight into graph segments of ``n`` nodes."""
    a = gen_scene_arrays(cfg)
    src = source_id if source_id is not None else f"scene{cfg.seed}"
    total = a["time"].size
    out = []
    for k, i0 in enumerate(range(0, total, n)):
        sl = slice(i0, min(i0 + n, total))
        out.append(segment_from_arrays(
            a["box"][sl], a["time"][sl], a["identity"][sl], a["visual"][sl], a["audio"][sl],
            a["labels"][sl], tau, segment_id=f"{src}/{k}", source_id=src,
            directed_same_frame=directed_same_frame))
    return out


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 10
    scene: SceneConfig = SceneConfig()
    seed: int = 0

    def scene_config(self, k: int) -> SceneConfig:
        return replace(self.scene, seed=self.seed * 100_003 + k)


def make_dataset(dcfg: DatasetConfig, n: int, tau: float,
                 directed_same_frame: bool = True) -> list[GraphSegment]:
    segs = []
    for k in range(dcfg.n_scenes):
        segs.extend(scene_segments(dcfg.scene_config(k), n, tau, f"scene{k:03d}",
                                   directed_same_frame))
    return segs


# --- per-frame oracle ------------------------------------------------------

def frame_oracle_accuracy(cfg: SceneConfig, n_samples: int = 400_000, seed: int = 1) -> float:
    """Bayes accuracy of classifying one node from its own visual and audio evidence.

    The sufficient statistics are the projections of the node's visual and
    audio features on the signal directions, Gaussian with means
    ``(strength * speaking, strength * anyone)``.  Estimated by Monte Carlo
    with the exact posterior as decision rule.
    """
    rng = np.random.default_rng(seed)
    a, s = cfg.signal_strength, cfg.feature_noise_sigma
    p = cfg.speech_fraction
    k = cfg.n_identities
    priors = np.array([p / k, p * (k - 1) / k, 1.0 - p])
    means = np.array([[a, a], [0.0, a], [0.0, 0.0]])
    cls = rng.choice(3, size=n_samples, p=priors)
    x = means[cls] + s * rng.standard_normal((n_samples, 2))
    if s == 0:
        return 1.0
    ll = np.stack([stats.norm.logpdf(x, m, s).sum(axis=1) for m in means], axis=1) + np.log(
        np.maximum(priors, 1e-300))
    post_pos = ll[:, 0] - np.logaddexp(ll[:, 1], ll[:, 2])
    pred = post_pos > 0
    return float(np.mean(pred == (cls == 0)))


def calibrate_noise(cfg: SceneConfig, target: float = 0.75) -> float:
    """Noise level at which :func:`frame_oracle_accuracy` equals ``target``."""
    floor = max(1.0 - cfg.positive_rate, cfg.positive_rate)
    if not floor < target < 1.0:
        raise ValueError(f"target accuracy must lie in ({floor:.3f}, 1)")

    def gap(sig):
        return frame_oracle_accuracy(replace(cfg, feature_noise_sigma=sig)) - target

    return float(optimize.brentq(gap, 1e-3, 50.0, xtol=1e-4))
