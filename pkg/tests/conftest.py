from __future__ import annotations

import numpy as np
import pytest

from pers.codefeat import PrecomputedSource
from pers.dataio import Interaction, LearnerSequence, MaskedWindow, Vocabulary


def interaction(
    lid="u1",
    eid="p0",
    ts=0,
    status="accepted",
    t_ms=8,
    m_kb=64,
    code=None,
    ref=None,
):
    return Interaction(lid, eid, ts, status, t_ms, m_kb, code=code, code_vec_ref=ref)


def window_of(exercise_ids, lid="u1", statuses=None, with_refs=False, target_steps=None):
    """A MaskedWindow over the given exercise ids, one event per second."""
    events = []
    for t, eid in enumerate(exercise_ids):
        status = statuses[t] if statuses else "accepted"
        ref = f"{lid}:{t}" if with_refs else None
        events.append(interaction(lid, eid, ts=t, status=status, ref=ref))
    if target_steps is None:
        target_steps = tuple(range(len(events) - 1))
    return MaskedWindow(LearnerSequence(lid, tuple(events)), tuple(target_steps))


def vocab_for(exercise_ids):
    return Vocabulary(exercise_ids)


def source_for(windows, d_c, seed=0):
    """Deterministic precomputed vectors covering every ref in the windows."""
    rng = np.random.default_rng(seed)
    table = {}
    for mw in windows:
        for ev in mw.window.events:
            if ev.code_vec_ref is not None and ev.code_vec_ref not in table:
                table[ev.code_vec_ref] = rng.normal(size=d_c)
    return PrecomputedSource(table, d_c)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
