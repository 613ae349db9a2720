import numpy as np
import pytest

from asdgraph.graph import segment_from_arrays
from asdgraph.records import FaceRecord


def make_record(identity="a", time=0.0, dv=4, da=3, label=None, seed=0, box=None):
    rng = np.random.default_rng(seed)
    if box is None:
        box = tuple(rng.uniform(0, 1, 4))
    return FaceRecord(tuple(box), float(time), identity, rng.standard_normal(dv),
                      rng.standard_normal(da), label)


def random_segment(n_nodes, rng, dv=6, da=5, n_ids=3, tau=0.9, fps=5.0, labels=True,
                   segment_id="s"):
    """Random small segment: identities on a frame grid, each (id, frame) used once."""
    n_frames = max(1, int(np.ceil(n_nodes / n_ids)) + 2)
    slots = rng.choice(n_frames * n_ids, size=n_nodes, replace=False)
    time = (slots // n_ids) / fps
    ident = [f"id{k}" for k in slots % n_ids]
    box = rng.uniform(0, 1, (n_nodes, 4))
    vis = rng.standard_normal((n_nodes, dv))
    aud = rng.standard_normal((n_nodes, da))
    y = None
    if labels:
        y = (rng.random(n_nodes) < 0.4).astype(np.int8)
        y[0] = 1
        y[-1] = 0
    return segment_from_arrays(box, time, ident, vis, aud, y, tau, segment_id=segment_id,
                               source_id=segment_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
