from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_store
from plpbench.omop_lite import (
    ClinicalEvent,
    IntegrityError,
    LoadError,
    NotFoundError,
    ParseError,
    events_in_window,
    format_date,
    load_store,
    parse_date,
    validate_store,
    write_store,
)


def fixture_store():
    return make_store(
        persons=[(1, "F", 1950)],
        periods=[(1, "2012-01-01", "2016-12-31")],
        visits=[(1, "2014-06-01"), (1, "2014-09-01")],
        events=[(1, 10, "2013-01-05", "condition"), (1, 20, "2013-03-01", "drug"), (1, 10, "2014-02-01", "condition")],
    )


def test_empty_directory_lists_all_missing_files(tmp_path):
    with pytest.raises(LoadError) as err:
        load_store(tmp_path)
    for name in ("person.csv", "observation_period.csv", "visit.csv", "event.csv", "concept.csv"):
        assert name in str(err.value)


def test_one_person_fixture_counts(tmp_path):
    write_store(fixture_store(), tmp_path / "s")
    assert load_store(tmp_path / "s").counts() == (1, 1, 2, 3)


def test_dangling_event_person_is_integrity_error(tmp_path):
    write_store(fixture_store(), tmp_path / "s")
    with open(tmp_path / "s" / "event.csv", "a") as fh:
        fh.write("77,10,2013-01-01,condition\n")
    with pytest.raises(IntegrityError, match="77"):
        load_store(tmp_path / "s")


def test_malformed_row_reports_file_and_line(tmp_path):
    write_store(fixture_store(), tmp_path / "s")
    with open(tmp_path / "s" / "visit.csv", "a") as fh:
        fh.write("1,not-a-date\n")
    with pytest.raises(ParseError) as err:
        load_store(tmp_path / "s")
    assert "visit.csv" in str(err.value) and "4" in str(err.value)


def test_round_trip_is_field_for_field(tmp_path):
    s = fixture_store()
    back = load_store(write_store(s, tmp_path / "s"), name=s.name)
    assert back.persons() == s.persons()
    assert back.observation_periods() == s.observation_periods()
    assert back.visits() == s.visits()
    assert back.events() == s.events()
    assert back.concepts == s.concepts


def test_well_formed_store_validates_clean():
    rep = validate_store(fixture_store())
    assert rep.errors == [] and rep.warnings == []


def test_event_before_only_period_warns():
    s = make_store([(1, "M", 1960)], [(1, "2012-01-01", "2016-12-31")], [],
                   [(1, 5, "2011-05-01", "condition")])
    rep = validate_store(s)
    assert rep.ok and len(rep.warnings) == 1


def test_birth_year_1850_warns():
    s = make_store([(1, "M", 1850)], [(1, "2012-01-01", "2016-12-31")])
    rep = validate_store(s)
    assert rep.ok and len(rep.warnings) == 1


def test_window_boundaries():
    s = make_store([(1, "F", 1950)], [(1, 0, 100)], [],
                   [(1, 7, 10, "condition"), (1, 8, 20, "drug"), (1, 9, 30, "condition")])
    assert [e.event_date for e in events_in_window(s, 1, 10, 10)] == [10]
    assert events_in_window(s, 1, 0, 5) == []
    assert [e.event_date for e in events_in_window(s, 1, 15, 30)] == [20, 30]
    assert [e.concept_id for e in events_in_window(s, 1, 0, 100, "drug")] == [8]


def test_unknown_person_not_found():
    with pytest.raises(NotFoundError):
        events_in_window(fixture_store(), 99, 0, 1)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(0, 200), st.sampled_from(["condition", "drug"])),
             max_size=60),
    st.integers(0, 200), st.integers(0, 200), st.sampled_from([None, "condition", "drug"]),
)
def test_window_matches_full_scan(events, a, b, dom):
    lo, hi = min(a, b), max(a, b)
    s = make_store([(p, "F", 1950) for p in (1, 2, 3)], [(p, 0, 300) for p in (1, 2, 3)], [], events)
    for p in (1, 2, 3):
        got = events_in_window(s, p, lo, hi, dom)
        want = sorted(
            (ClinicalEvent(p, c, d, m) for q, c, d, m in events if q == p and lo <= d <= hi and dom in (None, m)),
            key=lambda e: (e.event_date, e.concept_id, e.domain),
        )
        assert sorted(got, key=lambda e: (e.event_date, e.concept_id, e.domain)) == want
        assert [e.event_date for e in got] == sorted(e.event_date for e in got)


@given(st.dates(min_value=dt.date(1900, 1, 1), max_value=dt.date(2100, 12, 31)))
def test_date_round_trip(d):
    assert format_date(parse_date(d.isoformat())) == d.isoformat()


def test_day_numbers_are_days_since_epoch():
    assert parse_date("1970-01-01") == 0
    assert parse_date("2014-01-01") == (dt.date(2014, 1, 1) - dt.date(1970, 1, 1)).days


def test_store_is_immutable():
    s = fixture_store()
    with pytest.raises(ValueError):
        s.event_date[0] = 0
    assert isinstance(s.person_id, np.ndarray)
