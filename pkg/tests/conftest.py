from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from plpbench.features import N_DENSE, DesignMatrix
from plpbench.omop_lite import DOMAIN_CODES, Concept, EventStore, parse_date


def make_store(persons, periods=(), visits=(), events=(), name="fixture", concepts=None) -> EventStore:
    """Build an EventStore from plain tuples.

    persons: (person_id, "F"/"M", year_of_birth); periods: (person_id, start, end);
    visits: (person_id, date); events: (person_id, concept_id, date, domain).
    Dates may be ISO strings or day numbers.
    """

    def day(d):
        return parse_date(d) if isinstance(d, str) else int(d)

    persons = list(persons)
    periods = [(p, day(a), day(b)) for p, a, b in periods]
    visits = [(p, day(d)) for p, d in visits]
    events = [(p, c, day(d), dom) for p, c, d, dom in events]
    if concepts is None:
        seen = {}
        for _, c, _, dom in events:
            seen.setdefault(c, dom)
        concepts = [Concept(c, dom, f"concept {c}") for c, dom in sorted(seen.items())]
    cols = lambda rows, n: [np.array([r[i] for r in rows], dtype=np.int64) for i in range(n)]  # noqa: E731
    pp, ps, pe = cols(periods, 3) if periods else [np.empty(0, np.int64)] * 3
    vp, vd = cols(visits, 2) if visits else [np.empty(0, np.int64)] * 2
    if events:
        ep = np.array([e[0] for e in events]); ec = np.array([e[1] for e in events])  # noqa: E702
        ed = np.array([e[2] for e in events]); edom = np.array([DOMAIN_CODES[e[3]] for e in events])  # noqa: E702
    else:
        ep = ec = ed = np.empty(0, np.int64)
        edom = np.empty(0, np.int8)
    return EventStore(
        name,
        [p[0] for p in persons], [p[1] == "F" for p in persons], [p[2] for p in persons],
        pp, ps, pe, vp, vd, ep, ec, ed, edom, concepts,
    )


def make_matrix(dense, rows, labels, n_sparse=None, dictionary_hash="h") -> DesignMatrix:
    """DesignMatrix from a dense (n, 3) block and per-row lists of sparse
    column offsets (0-based within the sparse block)."""
    dense = np.asarray(dense, dtype=np.float64)
    n = len(dense)
    rows = [sorted(set(int(c) for c in r)) for r in rows]
    if n_sparse is None:
        n_sparse = max((max(r) + 1 for r in rows if r), default=0)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum([len(r) for r in rows], out=indptr[1:])
    indices = np.array([c + N_DENSE for r in rows for c in r], dtype=np.int32)
    return DesignMatrix(dense, indptr, indices, np.asarray(labels, dtype=np.int8),
                        np.arange(1, n + 1, dtype=np.int64), N_DENSE + n_sparse, dictionary_hash)


def random_matrix(rng, n=300, n_sparse=40, density=0.1, signal=None, dictionary_hash="h") -> DesignMatrix:
    """Random binary design with an optional linear signal on the sparse block."""
    S = rng.random((n, n_sparse)) < density
    dense = np.column_stack([rng.integers(40, 90, n) / 100.0, rng.random(n) < 0.5, rng.integers(0, 4, n)])
    if signal is None:
        y = rng.random(n) < 0.3
    else:
        eta = S.astype(float) @ signal - 1.0
        y = rng.random(n) < 1.0 / (1.0 + np.exp(-eta))
    y[0], y[1] = True, False
    return make_matrix(dense, [np.flatnonzero(r) for r in S], y.astype(int), n_sparse, dictionary_hash)


@pytest.fixture
def tmp_out(tmp_path) -> Path:
    return tmp_path


# Acceptance results, filled by tests/test_acceptance.py and printed after the run.
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k:>2} {status}  {title}: {detail}")
