"""Average precision, grouped mAP, prediction files and sweep tables."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

TIE_POLICIES = ("stable", "pessimistic")


def average_precision(scores, labels, ties: str = "stable") -> float:
    """Mean over positives of the precision at each positive's rank.

    Entries are ranked by descending score.  Equal scores keep input order
    (``ties="stable"``) or put negatives first (``ties="pessimistic"``).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    if ties == "stable":
        order = np.argsort(-s, kind="stable")
    elif ties == "pessimistic":
        order = np.lexsort((y, -s))
    else:
        raise ValueError(f"ties must be one of {TIE_POLICIES}, got {ties!r}")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


def map_over_groups(scores, labels, groups, ties: str = "stable",
                    return_skipped: bool = False):
    """Arithmetic mean of per-group AP; groups without positives are skipped."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    g = np.asarray(groups).reshape(-1)
    if not (s.size == y.size == g.size):
        raise ValueError("scores, labels and groups differ in length")
    keys, inv = np.unique(g, return_inverse=True)
    aps, skipped = [], 0
    for k in range(keys.size):
        sel = inv == k
        if not y[sel].any():
            skipped += 1
            continue
        aps.append(average_precision(s[sel], y[sel], ties))
    if skipped:
        log.warning("%d group(s) without positive labels skipped", skipped)
    if not aps:
        raise ValueError("no group has a positive label")
    value = float(np.mean(aps))
    return (value, skipped) if return_skipped else value


@dataclass(frozen=True)
class Prediction:
    segment_id: str
    node_index: int
    score: float
    label: int | None


def write_predictions(rows: Iterable[Prediction], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["segment_id", "node_index", "score", "label"])
    for r in rows:
        w.writerow([r.segment_id, r.node_index, repr(float(r.score)),
                    "" if r.label is None else int(r.label)])


def read_predictions(fh) -> list[Prediction]:
    rows = []
    reader = csv.DictReader(fh)
    missing = {"segment_id", "node_index", "score", "label"} - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"predictions file lacks columns {sorted(missing)}")
    for k, row in enumerate(reader, start=2):
        try:
            label = row["label"].strip()
            rows.append(Prediction(row["segment_id"], int(row["node_index"]),
                                   float(row["score"]), int(label) if label else None))
        except ValueError as exc:
            raise ValueError(f"line {k}: {exc}") from None
    return rows


def evaluate_predictions(rows: Sequence[Prediction], group_by: str = "segment",
                         ties: str = "stable") -> dict:
    """AP over all labelled rows plus mAP grouped by segment (or ``group_by="all"``)."""
    rows = [r for r in rows if r.label is not None]
    if not rows:
        raise ValueError("no labelled predictions")
    s = np.array([r.score for r in rows])
    y = np.array([r.label for r in rows])
    out = {"n": len(rows), "positives": int(y.sum()), "ap": average_precision(s, y, ties)}
    if group_by == "segment":
        value, skipped = map_over_groups(s, y, [r.segment_id for r in rows], ties,
                                         return_skipped=True)
        out.update(map=value, skipped_groups=skipped)
    else:
        out.update(map=out["ap"], skipped_groups=0)
    return out


def sweep_report(results: Sequence[tuple[dict, float]], params: Sequence[str] | None = None) -> str:
    """CSV table of a hyper-parameter sweep, rows ordered by the swept values.

    ``results`` holds ``(config, mAP)`` pairs.  Columns are the swept
    parameters (those named in ``params``, else every key whose value
    varies), any remaining keys, then ``map``.
    """
    results = list(results)
    keys: list[str] = []
    for cfg, _ in results:
        for k in cfg:
            if k not in keys:
                keys.append(k)
    if params is None:
        params = [k for k in keys if len({repr(c.get(k)) for c, _ in results}) > 1]
    params = list(params)
    other = [k for k in keys if k not in params]
    header = params + other + ["map"]

    def sort_key(item):
        return tuple((c is None, c) for c in (item[0].get(k) for k in params))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for cfg, value in sorted(results, key=sort_key):
        w.writerow([cfg.get(k, "") for k in params + other] + [value])
    return buf.getvalue()
