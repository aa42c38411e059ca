from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_store
from plpbench.cohort import CohortEntry, EmptyCohortError, ProblemDefinition, build_cohort
from plpbench.features import (
    N_DENSE,
    CharlsonCategory,
    CharlsonMap,
    DesignMatrix,
    FeatureDictionary,
    FeatureError,
    build_dictionary,
    build_matrix,
    charlson_score,
    synthetic_charlson_map,
)

IDX = 20_000
TASK = ProblemDefinition("t", 365, (IDX - 10, IDX + 10), frozenset({999}))


def entry(pid, idx=IDX, label=0, age=60, sex="female"):
    return CohortEntry(pid, idx, age, sex, idx + 1, idx + 100, 100, label, idx + 50 if label else None)


def store_with(events_by_person):
    pids = sorted(events_by_person)
    events = [(p, c, d, dom) for p in pids for c, d, dom in events_by_person[p]]
    return make_store([(p, "F", 1950) for p in pids], [(p, IDX - 2000, IDX + 2000) for p in pids],
                      [(p, IDX) for p in pids], events)


def test_no_lookback_events_gives_three_columns():
    s = store_with({1: [(5, IDX + 3, "condition")], 2: []})
    d = build_dictionary(s, [entry(1), entry(2)], TASK)
    assert d.n_cols == 3 and d.keys() == ["age", "sex", "charlson"]
    m = build_matrix(s, [entry(1), entry(2)], d)
    assert m.nnz == 0 and m.dense[0, 0] == 0.6 and m.dense[0, 1] == 1.0


def test_union_of_lookback_concepts():
    s = store_with({1: [(10, IDX - 5, "condition"), (12, IDX - 9, "condition")], 2: [(12, IDX - 1, "condition")]})
    d = build_dictionary(s, [entry(1), entry(2)], TASK)
    assert d.n_cols == 5
    assert d.keys()[3:] == ["concept:10:condition", "concept:12:condition"]


def test_condition_sorts_before_drug_at_equal_id():
    s = store_with({1: [(7, IDX - 5, "drug"), (7, IDX - 6, "condition"), (3, IDX - 7, "drug")]})
    d = build_dictionary(s, [entry(1)], TASK)
    assert d.keys()[3:] == ["concept:3:drug", "concept:7:condition", "concept:7:drug"]


def test_dictionary_bytes_are_deterministic(tmp_path):
    s = store_with({1: [(10, IDX - 5, "condition")], 2: [(11, IDX - 50, "drug")]})
    a = build_dictionary(s, [entry(1), entry(2)], TASK)
    b = build_dictionary(s, [entry(1), entry(2)], TASK)
    assert a.to_json() == b.to_json()
    a.save(tmp_path / "d.json")
    back = FeatureDictionary.load(tmp_path / "d.json")
    assert back == a and back.hash == a.hash


def test_empty_cohort_dictionary_error():
    with pytest.raises(EmptyCohortError):
        build_dictionary(store_with({1: []}), [], TASK)


def test_window_filter_fixture():
    s = store_with({1: [(7, IDX - 10, "condition"), (7, IDX - 400, "condition"), (9, IDX, "condition")],
                    2: [(9, IDX - 3, "condition")]})
    cohort = [entry(1), entry(2)]
    d = build_dictionary(s, cohort, TASK)
    m = build_matrix(s, cohort, d)
    assert m.row_columns(0).tolist() == [d.column_of("concept:7:condition")]
    assert m.row_columns(1).tolist() == [d.column_of("concept:9:condition")]


def test_unknown_concept_is_dropped_on_transport():
    a = store_with({1: [(7, IDX - 10, "condition")]})
    d = build_dictionary(a, [entry(1)], TASK)
    b = store_with({5: [(7, IDX - 3, "condition"), (4242, IDX - 3, "drug")]})
    m = build_matrix(b, [entry(5)], d)
    assert m.n_cols == d.n_cols and m.row_columns(0).tolist() == [3]
    assert m.dictionary_hash == d.hash


def test_charlson_examples():
    cmap = CharlsonMap((CharlsonCategory("a", frozenset({1, 2}), 1), CharlsonCategory("b", frozenset({3}), 2)))
    s = store_with({1: [], 2: [(1, IDX - 5, "condition"), (2, IDX - 700, "condition")],
                    3: [(1, IDX - 5, "condition"), (3, IDX - 3000, "condition")],
                    4: [(1, IDX, "condition"), (3, IDX - 1, "drug")]})
    assert charlson_score(s, 1, IDX, cmap) == 0
    assert charlson_score(s, 2, IDX, cmap) == 1
    assert charlson_score(s, 3, IDX, cmap) == 3
    assert charlson_score(s, 3, IDX, cmap, lookback_days=365) == 1
    assert charlson_score(s, 4, IDX, cmap) == 0  # on-index and drug-domain events do not count
    m = build_matrix(s, [entry(p) for p in (1, 2, 3, 4)], build_dictionary(s, [entry(1)], TASK), cmap)
    assert m.dense[:, 2].tolist() == [0, 1, 3, 0]


def test_charlson_map_validation_and_json():
    with pytest.raises(FeatureError):
        CharlsonMap((CharlsonCategory("a", frozenset(), 1), CharlsonCategory("a", frozenset(), 1)))
    with pytest.raises(FeatureError):
        CharlsonMap((CharlsonCategory("a", frozenset(), 0),))
    cmap = synthetic_charlson_map(range(1, 100))
    assert len(cmap.categories) == 17
    assert CharlsonMap.from_json_dict(cmap.to_json_dict()) == cmap


def test_plpm_and_triplets_round_trip(tmp_path):
    s = store_with({1: [(7, IDX - 10, "condition")], 2: [(8, IDX - 20, "drug"), (7, IDX - 2, "condition")]})
    cohort = [entry(1, label=1), entry(2, sex="male", age=71)]
    d = build_dictionary(s, cohort, TASK)
    m = build_matrix(s, cohort, d)
    m.write_plpm(tmp_path / "m.plpm")
    assert (tmp_path / "m.plpm").read_bytes()[:4] == b"PLPM"
    back = DesignMatrix.read_plpm(tmp_path / "m.plpm")
    for attr in ("dense", "indptr", "indices", "labels", "row_ids"):
        assert np.array_equal(getattr(back, attr), getattr(m, attr))
    assert (back.n_cols, back.dictionary_hash) == (m.n_cols, m.dictionary_hash)
    m.write_triplets_csv(tmp_path / "t.csv", d)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "row,person_id,column,key,value"
    assert sum(",concept:" in ln for ln in lines) == m.nnz


def test_subset_preserves_rows():
    s = store_with({p: [(p % 3 + 1, IDX - p, "condition")] for p in range(1, 8)})
    cohort = [entry(p, label=p % 2) for p in range(1, 8)]
    m = build_matrix(s, cohort, build_dictionary(s, cohort, TASK))
    sub = m.subset([5, 1, 3])
    assert sub.row_ids.tolist() == [6, 2, 4]
    assert [sub.row_columns(i).tolist() for i in range(3)] == [m.row_columns(i).tolist() for i in (5, 1, 3)]
    assert np.array_equal(sub.to_dense(), m.to_dense()[[5, 1, 3]])


# -- properties ------------------------------------------------------------

@st.composite
def store_and_cohort(draw):
    n = draw(st.integers(1, 5))
    events = {}
    for p in range(1, n + 1):
        events[p] = [(draw(st.integers(1, 8)), IDX - draw(st.integers(-20, 420)), draw(st.sampled_from(["condition", "drug"])))
                     for _ in range(draw(st.integers(0, 10)))]
    store = store_with(events)
    return store, events, build_cohort(store, TASK)


@settings(max_examples=100, deadline=None)
@given(store_and_cohort())
def test_nnz_matches_brute_force(case):
    store, events, cohort = case
    if not cohort:
        return
    d = build_dictionary(store, cohort, TASK)
    m = build_matrix(store, cohort, d)
    keys = set(d.keys())
    brute = 0
    for e in cohort:
        brute += len({(c, dom) for c, day, dom in events[e.person_id]
                      if e.index_date - 365 <= day <= e.index_date - 1 and f"concept:{c}:{dom}" in keys})
    assert m.nnz == brute
    for i in range(m.n_rows):
        cols = m.row_columns(i)
        assert np.all(np.diff(cols) > 0) and np.all(cols >= N_DENSE)
    assert np.allclose(m.dense[:, 0] * 100, [e.age_at_index for e in cohort])


@settings(max_examples=60, deadline=None)
@given(store_and_cohort())
def test_duplicating_events_changes_nothing(case):
    store, events, cohort = case
    if not cohort:
        return
    doubled = store_with({p: ev + ev for p, ev in events.items()})
    d1 = build_dictionary(store, cohort, TASK)
    d2 = build_dictionary(doubled, cohort, TASK)
    assert d1 == d2
    m1, m2 = build_matrix(store, cohort, d1), build_matrix(doubled, cohort, d2)
    assert np.array_equal(m1.indices, m2.indices) and np.array_equal(m1.indptr, m2.indptr)


@settings(max_examples=60, deadline=None)
@given(store_and_cohort(), store_and_cohort())
def test_transport_uses_only_source_columns(a, b):
    sa, _, ca = a
    sb, _, cb = b
    if not ca or not cb:
        return
    d = build_dictionary(sa, ca, TASK)
    m = build_matrix(sb, cb, d)
    assert m.n_cols == d.n_cols
    assert np.all(m.indices < d.n_cols)
