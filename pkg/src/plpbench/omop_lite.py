"""Reduced observational-data schema ("OMOP-lite").

Five tables: person, observation_period, visit, event and concept. Dates are
integer day numbers since 1970-01-01 in memory and ISO-8601 text on disk.
The store keeps every table as numpy arrays sorted by person so that
per-person access is a pair of offsets.
"""

from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CONDITION = 0
DRUG = 1
DOMAINS = ("condition", "drug")
DOMAIN_CODES = {name: code for code, name in enumerate(DOMAINS)}

FEMALE = "female"
MALE = "male"

TABLE_FILES = (
    "person.csv",
    "observation_period.csv",
    "visit.csv",
    "event.csv",
    "concept.csv",
)

HEADERS = {
    "person.csv": ["person_id", "sex", "year_of_birth"],
    "observation_period.csv": ["person_id", "start_date", "end_date"],
    "visit.csv": ["person_id", "visit_date"],
    "event.csv": ["person_id", "concept_id", "event_date", "domain"],
    "concept.csv": ["concept_id", "domain", "name"],
}

_EPOCH = _dt.date(1970, 1, 1)


class StoreError(Exception):
    """Base class for data-store problems."""


class LoadError(StoreError):
    pass


class ParseError(StoreError):
    def __init__(self, filename: str, line: int, message: str):
        self.filename = filename
        self.line = line
        super().__init__(f"{filename}:{line}: {message}")


class IntegrityError(StoreError):
    pass


class NotFoundError(StoreError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


def parse_date(text: str) -> int:
    return (_dt.date.fromisoformat(text.strip()) - _EPOCH).days


def format_date(day: int) -> str:
    return (_EPOCH + _dt.timedelta(days=int(day))).isoformat()


def date_to_day(d: _dt.date) -> int:
    return (d - _EPOCH).days


def day_to_date(day: int) -> _dt.date:
    return _EPOCH + _dt.timedelta(days=int(day))


def _format_dates(days: np.ndarray) -> np.ndarray:
    return np.datetime_as_string(np.asarray(days, dtype="int64").astype("datetime64[D]"), unit="D")


@dataclass(frozen=True)
class Concept:
    concept_id: int
    domain: str
    name: str


@dataclass(frozen=True)
class Person:
    person_id: int
    sex: str
    year_of_birth: int


@dataclass(frozen=True)
class ObservationPeriod:
    person_id: int
    start_date: int
    end_date: int


@dataclass(frozen=True)
class Visit:
    person_id: int
    visit_date: int


@dataclass(frozen=True)
class ClinicalEvent:
    person_id: int
    concept_id: int
    event_date: int
    domain: str


def _frozen(a, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _offsets(owner_rows: np.ndarray, n_persons: int) -> np.ndarray:
    counts = np.bincount(owner_rows, minlength=n_persons)
    out = np.zeros(n_persons + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return _frozen(out, np.int64)


class EventStore:
    """Immutable, person-indexed collection of the five tables.

    Child tables are sorted by (person_id, date, ...) and addressed through
    ``*_offsets`` arrays of length ``n_persons + 1``.
    """

    def __init__(
        self,
        name: str,
        person_ids,
        female,
        year_of_birth,
        period_person,
        period_start,
        period_end,
        visit_person,
        visit_date,
        event_person,
        event_concept,
        event_date,
        event_domain,
        concepts: Iterable[Concept] = (),
    ):
        self.name = name
        pid = np.asarray(person_ids, dtype=np.int64)
        order = np.argsort(pid, kind="stable")
        pid = pid[order]
        if len(pid) and np.any(np.diff(pid) == 0):
            dup = int(pid[np.flatnonzero(np.diff(pid) == 0)[0]])
            raise IntegrityError(f"duplicate person_id {dup}")
        self.person_id = _frozen(pid, np.int64)
        self.female = _frozen(np.asarray(female, dtype=bool)[order], bool)
        self.year_of_birth = _frozen(np.asarray(year_of_birth, dtype=np.int64)[order], np.int64)
        self._index = {int(p): i for i, p in enumerate(self.person_id)}
        n = len(pid)

        def rows_for(persons, table):
            persons = np.asarray(persons, dtype=np.int64)
            if len(persons) == 0:
                return persons.copy()
            pos = np.searchsorted(self.person_id, persons)
            pos_c = np.minimum(pos, max(n - 1, 0))
            bad = (pos >= n) | (self.person_id[pos_c] != persons) if n else np.ones(len(persons), bool)
            if np.any(bad):
                missing = int(persons[np.flatnonzero(bad)[0]])
                raise IntegrityError(f"{table} references unknown person_id {missing}")
            return pos

        prow = rows_for(period_person, "observation_period")
        ps = np.asarray(period_start, dtype=np.int64)
        pe = np.asarray(period_end, dtype=np.int64)
        o = np.lexsort((pe, ps, prow))
        self.period_row = _frozen(prow[o], np.int64)
        self.period_start = _frozen(ps[o], np.int64)
        self.period_end = _frozen(pe[o], np.int64)
        self.period_offsets = _offsets(self.period_row, n)

        vrow = rows_for(visit_person, "visit")
        vd = np.asarray(visit_date, dtype=np.int64)
        o = np.lexsort((vd, vrow))
        self.visit_row = _frozen(vrow[o], np.int64)
        self.visit_date = _frozen(vd[o], np.int64)
        self.visit_offsets = _offsets(self.visit_row, n)

        erow = rows_for(event_person, "event")
        ec = np.asarray(event_concept, dtype=np.int64)
        ed = np.asarray(event_date, dtype=np.int64)
        edom = np.asarray(event_domain, dtype=np.int8)
        o = np.lexsort((edom, ec, ed, erow))
        self.event_row = _frozen(erow[o], np.int64)
        self.event_concept = _frozen(ec[o], np.int64)
        self.event_date = _frozen(ed[o], np.int64)
        self.event_domain = _frozen(edom[o], np.int8)
        self.event_offsets = _offsets(self.event_row, n)

        self.concepts = {c.concept_id: c for c in sorted(concepts, key=lambda c: c.concept_id)}

    # -- sizes ---------------------------------------------------------
    @property
    def n_persons(self) -> int:
        return len(self.person_id)

    def counts(self) -> tuple[int, int, int, int]:
        return (self.n_persons, len(self.period_row), len(self.visit_row), len(self.event_row))

    # -- per-person access ---------------------------------------------
    def row_of(self, person_id: int) -> int:
        try:
            return self._index[int(person_id)]
        except KeyError:
            raise NotFoundError(f"unknown person_id {person_id} in store {self.name!r}") from None

    def has_person(self, person_id: int) -> bool:
        return int(person_id) in self._index

    def person(self, person_id: int) -> Person:
        r = self.row_of(person_id)
        return Person(int(self.person_id[r]), FEMALE if self.female[r] else MALE, int(self.year_of_birth[r]))

    def periods_of_row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.period_offsets[r], self.period_offsets[r + 1]
        return self.period_start[a:b], self.period_end[a:b]

    def visits_of_row(self, r: int) -> np.ndarray:
        return self.visit_date[self.visit_offsets[r] : self.visit_offsets[r + 1]]

    def events_of_row(self, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a, b = self.event_offsets[r], self.event_offsets[r + 1]
        return self.event_concept[a:b], self.event_date[a:b], self.event_domain[a:b]

    def persons(self) -> list[Person]:
        return [
            Person(int(p), FEMALE if f else MALE, int(y))
            for p, f, y in zip(self.person_id, self.female, self.year_of_birth)
        ]

    def observation_periods(self) -> list[ObservationPeriod]:
        return [
            ObservationPeriod(int(self.person_id[r]), int(s), int(e))
            for r, s, e in zip(self.period_row, self.period_start, self.period_end)
        ]

    def visits(self) -> list[Visit]:
        return [Visit(int(self.person_id[r]), int(d)) for r, d in zip(self.visit_row, self.visit_date)]

    def events(self) -> list[ClinicalEvent]:
        return [
            ClinicalEvent(int(self.person_id[r]), int(c), int(d), DOMAINS[int(m)])
            for r, c, d, m in zip(self.event_row, self.event_concept, self.event_date, self.event_domain)
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStore):
            return NotImplemented
        arrays = (
            "person_id", "female", "year_of_birth",
            "period_row", "period_start", "period_end",
            "visit_row", "visit_date",
            "event_row", "event_concept", "event_date", "event_domain",
        )
        return (
            self.name == other.name
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.concepts == other.concepts
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        n, p, v, e = self.counts()
        return f"EventStore({self.name!r}, persons={n}, periods={p}, visits={v}, events={e})"


def events_in_window(
    store: EventStore,
    person_id: int,
    window_start: int,
    window_end: int,
    domain_filter: str | Iterable[str] | None = None,
) -> list[ClinicalEvent]:
    """Events with ``window_start <= event_date <= window_end``, sorted by date."""
    if window_start > window_end:
        raise ValueError("window_start must not exceed window_end")
    r = store.row_of(person_id)
    concept, date, domain = store.events_of_row(r)
    lo = np.searchsorted(date, window_start, side="left")
    hi = np.searchsorted(date, window_end, side="right")
    if domain_filter is None:
        allowed = {CONDITION, DRUG}
    elif isinstance(domain_filter, str):
        allowed = {DOMAIN_CODES[domain_filter]}
    else:
        allowed = {DOMAIN_CODES[d] for d in domain_filter}
    pid = int(store.person_id[r])
    return [
        ClinicalEvent(pid, int(concept[i]), int(date[i]), DOMAINS[int(domain[i])])
        for i in range(lo, hi)
        if int(domain[i]) in allowed
    ]


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    store_name: str
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_store(store: EventStore, current_year: int | None = None) -> ValidationReport:
    """Errors block a study run; warnings (temporal plausibility) do not."""
    if current_year is None:
        current_year = _dt.date.today().year
    report = ValidationReport(store.name)

    bad_birth = np.flatnonzero((store.year_of_birth < 1900) | (store.year_of_birth > current_year))
    for r in bad_birth:
        report.warnings.append(
            f"person {store.person_id[r]}: year_of_birth {store.year_of_birth[r]} outside [1900, {current_year}]"
        )

    inverted = np.flatnonzero(store.period_start > store.period_end)
    for i in inverted:
        report.errors.append(
            f"person {store.person_id[store.period_row[i]]}: observation period starts after it ends"
        )
    same_owner = store.period_row[1:] == store.period_row[:-1]
    overlap = np.flatnonzero(same_owner & (store.period_start[1:] <= store.period_end[:-1]))
    for i in overlap:
        report.errors.append(f"person {store.person_id[store.period_row[i]]}: overlapping observation periods")

    for r in range(store.n_persons):
        starts, ends = store.periods_of_row(r)
        _, dates, _ = store.events_of_row(r)
        if len(dates) == 0:
            continue
        if len(starts) == 0:
            covered = np.zeros(len(dates), dtype=bool)
        else:
            k = np.searchsorted(starts, dates, side="right") - 1
            kc = np.maximum(k, 0)
            covered = (k >= 0) & (dates <= ends[kc])
        n_out = int(np.count_nonzero(~covered))
        if n_out:
            report.warnings.append(
                f"person {store.person_id[r]}: {n_out} event(s) outside observation periods"
            )

    unknown = np.setdiff1d(np.unique(store.event_concept), np.fromiter(store.concepts, dtype=np.int64, count=len(store.concepts)))
    if len(unknown) and store.concepts:
        report.warnings.append(f"{len(unknown)} event concept(s) missing from concept table")
    return report


# ---------------------------------------------------------------------------
# CSV boundary


def _read_table(path: Path, expected: list[str]) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path.name, 1, "missing header row") from None
        if [h.strip() for h in header] != expected:
            raise ParseError(path.name, 1, f"expected header {','.join(expected)}, got {','.join(header)}")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(path.name, reader.line_num, f"expected {len(expected)} fields, got {len(row)}")
            rows.append(row)
        # line numbers are needed again for value errors
        return rows


def _column_ints(rows, col, filename, line_numbers):
    out = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        try:
            out[i] = int(row[col])
        except ValueError:
            raise ParseError(filename, line_numbers[i], f"invalid integer {row[col]!r}") from None
    return out


def _column_dates(rows, col, filename, line_numbers):
    raw = [row[col].strip() for row in rows]
    try:
        return np.array(raw, dtype="datetime64[D]").astype(np.int64) if raw else np.empty(0, np.int64)
    except ValueError:
        pass
    out = np.empty(len(rows), dtype=np.int64)
    for i, text in enumerate(raw):
        try:
            out[i] = parse_date(text)
        except ValueError:
            raise ParseError(filename, line_numbers[i], f"invalid date {text!r}") from None
    return out


def _line_numbers(path: Path) -> list[int]:
    # physical 1-based line of each data record (handles quoted newlines)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        lines = []
        start = reader.line_num + 1
        for row in reader:
            if row:
                lines.append(start)
            start = reader.line_num + 1
        return lines


def load_store(directory, name: str | None = None) -> EventStore:
    directory = Path(directory)
    missing = [f for f in TABLE_FILES if not (directory / f).is_file()]
    if missing:
        raise LoadError(f"missing file(s) in {directory}: {', '.join(missing)}")

    tables = {}
    for fname in TABLE_FILES:
        path = directory / fname
        tables[fname] = (_read_table(path, HEADERS[fname]), _line_numbers(path))

    rows, lines = tables["person.csv"]
    pid = _column_ints(rows, 0, "person.csv", lines)
    female = np.empty(len(rows), dtype=bool)
    for i, row in enumerate(rows):
        sex = row[1].strip()
        if sex not in ("F", "M"):
            raise ParseError("person.csv", lines[i], f"sex must be F or M, got {sex!r}")
        female[i] = sex == "F"
    yob = _column_ints(rows, 2, "person.csv", lines)
    if np.any(pid <= 0):
        i = int(np.flatnonzero(pid <= 0)[0])
        raise ParseError("person.csv", lines[i], "person_id must be positive")

    rows, lines = tables["observation_period.csv"]
    op_pid = _column_ints(rows, 0, "observation_period.csv", lines)
    op_start = _column_dates(rows, 1, "observation_period.csv", lines)
    op_end = _column_dates(rows, 2, "observation_period.csv", lines)

    rows, lines = tables["visit.csv"]
    v_pid = _column_ints(rows, 0, "visit.csv", lines)
    v_date = _column_dates(rows, 1, "visit.csv", lines)

    rows, lines = tables["event.csv"]
    e_pid = _column_ints(rows, 0, "event.csv", lines)
    e_concept = _column_ints(rows, 1, "event.csv", lines)
    e_date = _column_dates(rows, 2, "event.csv", lines)
    e_domain = np.empty(len(rows), dtype=np.int8)
    for i, row in enumerate(rows):
        code = DOMAIN_CODES.get(row[3].strip())
        if code is None:
            raise ParseError("event.csv", lines[i], f"domain must be condition or drug, got {row[3]!r}")
        e_domain[i] = code

    rows, lines = tables["concept.csv"]
    concepts = []
    seen = set()
    for i, row in enumerate(rows):
        try:
            cid = int(row[0])
        except ValueError:
            raise ParseError("concept.csv", lines[i], f"invalid integer {row[0]!r}") from None
        if cid <= 0:
            raise ParseError("concept.csv", lines[i], "concept_id must be positive")
        if row[1].strip() not in DOMAIN_CODES:
            raise ParseError("concept.csv", lines[i], f"domain must be condition or drug, got {row[1]!r}")
        if cid in seen:
            raise ParseError("concept.csv", lines[i], f"duplicate concept_id {cid}")
        seen.add(cid)
        concepts.append(Concept(cid, row[1].strip(), row[2]))

    return EventStore(
        name or directory.name,
        pid, female, yob,
        op_pid, op_start, op_end,
        v_pid, v_date,
        e_pid, e_concept, e_date, e_domain,
        concepts,
    )


def write_store(store: EventStore, directory) -> Path:
    """Write the five CSV tables; output is a pure function of the store."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pid = store.person_id

    def dump(fname, columns):
        with open(directory / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADERS[fname])
            w.writerows(zip(*columns))

    dump("person.csv", [pid.tolist(), np.where(store.female, "F", "M").tolist(), store.year_of_birth.tolist()])
    dump(
        "observation_period.csv",
        [pid[store.period_row].tolist(), _format_dates(store.period_start).tolist(), _format_dates(store.period_end).tolist()],
    )
    dump("visit.csv", [pid[store.visit_row].tolist(), _format_dates(store.visit_date).tolist()])
    dump(
        "event.csv",
        [
            pid[store.event_row].tolist(),
            store.event_concept.tolist(),
            _format_dates(store.event_date).tolist(),
            np.asarray(DOMAINS)[store.event_domain.astype(np.int64)].tolist(),
        ],
    )
    concepts = list(store.concepts.values())
    dump("concept.csv", [[c.concept_id for c in concepts], [c.domain for c in concepts], [c.name for c in concepts]])
    return directory
