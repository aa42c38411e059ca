"""Target-cohort construction, outcome labelling and characterization.

Time windows for one person::

    |-- lookback [index-365, index-1] --|index|-- TAR [index+1, min(index+tar, obs_end)] --|

The index date is the earliest visit inside the task's index window that
meets every inclusion rule; each person contributes at most one entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .omop_lite import FEMALE, MALE, EventStore, date_to_day, day_to_date, format_date, parse_date


class DefinitionError(ValueError):
    pass


class EmptyCohortError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemDefinition:
    name: str
    tar_days: int
    index_window: tuple[int, int]
    outcome_concepts: frozenset[int]
    age_min: int | None = None
    age_max: int | None = None
    lookback_days: int = 365
    entry_concepts: frozenset[int] | None = None
    entry_first_occurrence: bool = False
    exclusion_concepts: frozenset[int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcome_concepts", frozenset(int(c) for c in self.outcome_concepts))
        for attr in ("entry_concepts", "exclusion_concepts"):
            value = getattr(self, attr)
            if value is not None:
                object.__setattr__(self, attr, frozenset(int(c) for c in value))
        object.__setattr__(self, "index_window", (int(self.index_window[0]), int(self.index_window[1])))
        if not self.outcome_concepts:
            raise DefinitionError(f"task {self.name!r}: outcome concept set is empty")
        if self.tar_days < 1:
            raise DefinitionError("tar_days must be >= 1")
        if self.lookback_days < 1:
            raise DefinitionError("lookback_days must be >= 1")
        if self.index_window[0] > self.index_window[1]:
            raise DefinitionError("index_window start after end")
        if self.age_min is not None and self.age_max is not None and self.age_min > self.age_max:
            raise DefinitionError("age_min exceeds age_max")

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "age_min": self.age_min,
            "age_max": self.age_max,
            "lookback_days": self.lookback_days,
            "tar_days": self.tar_days,
            "index_window": [format_date(self.index_window[0]), format_date(self.index_window[1])],
            "outcome_concepts": sorted(self.outcome_concepts),
            "entry_concepts": None if self.entry_concepts is None else sorted(self.entry_concepts),
            "entry_first_occurrence": self.entry_first_occurrence,
            "exclusion_concepts": None if self.exclusion_concepts is None else sorted(self.exclusion_concepts),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProblemDefinition":
        known = {
            "name", "age_min", "age_max", "lookback_days", "tar_days", "index_window",
            "outcome_concepts", "entry_concepts", "entry_first_occurrence", "exclusion_concepts",
        }
        unknown = set(d) - known
        if unknown:
            raise DefinitionError(f"unknown problem-definition keys: {sorted(unknown)}")
        window = d["index_window"]
        return cls(
            name=d["name"],
            tar_days=int(d["tar_days"]),
            index_window=(_as_day(window[0]), _as_day(window[1])),
            outcome_concepts=frozenset(d["outcome_concepts"]),
            age_min=d.get("age_min"),
            age_max=d.get("age_max"),
            lookback_days=int(d.get("lookback_days", 365)),
            entry_concepts=None if d.get("entry_concepts") is None else frozenset(d["entry_concepts"]),
            entry_first_occurrence=bool(d.get("entry_first_occurrence", False)),
            exclusion_concepts=None if d.get("exclusion_concepts") is None else frozenset(d["exclusion_concepts"]),
        )


def _as_day(v) -> int:
    return parse_date(v) if isinstance(v, str) else int(v)


def load_problem(path) -> ProblemDefinition:
    return ProblemDefinition.from_json_dict(json.loads(Path(path).read_text()))


def _window(y0, m0, d0, y1, m1, d1):
    import datetime as dt

    return (date_to_day(dt.date(y0, m0, d0)), date_to_day(dt.date(y1, m1, d1)))


def dementia_task(outcome_concepts: Iterable[int], **overrides) -> ProblemDefinition:
    """Persons aged 55-84, 1825-day TAR, index in 2014."""
    kw = dict(name="dementia", age_min=55, age_max=84, tar_days=1825, index_window=_window(2014, 1, 1, 2014, 12, 31))
    kw.update(overrides)
    return ProblemDefinition(outcome_concepts=frozenset(outcome_concepts), **kw)


def lung_cancer_task(outcome_concepts: Iterable[int], cancer_concepts: Iterable[int] = (), **overrides) -> ProblemDefinition:
    """Persons aged 45-65, cancer-free before index, 1095-day TAR, index in 2016."""
    excl = frozenset(cancer_concepts) | frozenset(outcome_concepts)
    kw = dict(
        name="lung_cancer", age_min=45, age_max=65, tar_days=1095,
        index_window=_window(2016, 1, 1, 2016, 12, 31), exclusion_concepts=excl,
    )
    kw.update(overrides)
    return ProblemDefinition(outcome_concepts=frozenset(outcome_concepts), **kw)


def bipolar_task(outcome_concepts: Iterable[int], mdd_concepts: Iterable[int], **overrides) -> ProblemDefinition:
    """Persons newly diagnosed with major depressive disorder, 365-day TAR, index 2017-2019."""
    kw = dict(
        name="bipolar", tar_days=365, index_window=_window(2017, 1, 1, 2019, 12, 31),
        entry_concepts=frozenset(mdd_concepts), entry_first_occurrence=True,
        exclusion_concepts=frozenset(outcome_concepts),
    )
    kw.update(overrides)
    return ProblemDefinition(outcome_concepts=frozenset(outcome_concepts), **kw)


@dataclass(frozen=True)
class CohortEntry:
    person_id: int
    index_date: int
    age_at_index: int
    sex: str
    tar_start: int
    tar_end: int
    observed_tar_days: int
    label: int
    outcome_date: int | None = None


def year_of(day: int) -> int:
    return day_to_date(day).year


def select_index(
    problem: ProblemDefinition,
    year_of_birth: int,
    visits: np.ndarray,
    period_starts: np.ndarray,
    period_ends: np.ndarray,
    event_concepts: np.ndarray,
    event_dates: np.ndarray,
) -> tuple[int, int] | None:
    """Earliest qualifying visit as ``(index_date, tar_end)`` or ``None``.

    ``event_dates`` must be sorted ascending; ``period_starts`` too.
    """
    w0, w1 = problem.index_window
    lo = np.searchsorted(visits, w0, side="left")
    hi = np.searchsorted(visits, w1, side="right")
    if lo == hi:
        return None

    first_entry = None
    if problem.entry_concepts is not None:
        hits = np.flatnonzero(np.isin(event_concepts, list(problem.entry_concepts)))
        if len(hits) == 0:
            return None
        first_entry = int(event_dates[hits[0]])
    first_excl = None
    if problem.exclusion_concepts:
        hits = np.flatnonzero(np.isin(event_concepts, list(problem.exclusion_concepts)))
        if len(hits):
            first_excl = int(event_dates[hits[0]])

    last = None
    for idx in visits[lo:hi]:
        idx = int(idx)
        if idx == last:
            continue
        last = idx
        age = year_of(idx) - year_of_birth
        if problem.age_min is not None and age < problem.age_min:
            continue
        if problem.age_max is not None and age > problem.age_max:
            continue
        if first_entry is not None:
            if first_entry > idx:
                continue
            if problem.entry_first_occurrence and idx - first_entry > problem.lookback_days:
                continue
        if first_excl is not None and first_excl < idx:
            # exclusion is permanent once it has happened; later visits fail too
            return None
        k = np.searchsorted(period_starts, idx - problem.lookback_days, side="right") - 1
        if k < 0:
            continue
        # the covering period must contain the whole lookback and at least one TAR day
        if period_ends[k] < idx + 1:
            continue
        tar_end = min(idx + problem.tar_days, int(period_ends[k]))
        return idx, tar_end
    return None


def first_outcome(
    outcome_concepts: frozenset[int],
    event_concepts: np.ndarray,
    event_dates: np.ndarray,
    tar_start: int,
    tar_end: int,
) -> int | None:
    lo = np.searchsorted(event_dates, tar_start, side="left")
    hi = np.searchsorted(event_dates, tar_end, side="right")
    for i in range(lo, hi):
        if int(event_concepts[i]) in outcome_concepts:
            return int(event_dates[i])
    return None


def assign_label(entry: CohortEntry, store: EventStore, outcome_concepts: Iterable[int]) -> tuple[int, int | None]:
    """``(label, outcome_date)`` using outcome events in ``[tar_start, tar_end]``."""
    r = store.row_of(entry.person_id)
    concepts, dates, _ = store.events_of_row(r)
    d = first_outcome(frozenset(int(c) for c in outcome_concepts), concepts, dates, entry.tar_start, entry.tar_end)
    return (0, None) if d is None else (1, d)


def build_cohort(store: EventStore, problem: ProblemDefinition) -> list[CohortEntry]:
    if not problem.outcome_concepts:
        raise DefinitionError(f"task {problem.name!r}: outcome concept set is empty")
    cohort = []
    for r in range(store.n_persons):
        visits = store.visits_of_row(r)
        if len(visits) == 0:
            continue
        starts, ends = store.periods_of_row(r)
        concepts, dates, _ = store.events_of_row(r)
        yob = int(store.year_of_birth[r])
        picked = select_index(problem, yob, visits, starts, ends, concepts, dates)
        if picked is None:
            continue
        idx, tar_end = picked
        outcome = first_outcome(problem.outcome_concepts, concepts, dates, idx + 1, tar_end)
        cohort.append(
            CohortEntry(
                person_id=int(store.person_id[r]),
                index_date=idx,
                age_at_index=year_of(idx) - yob,
                sex=FEMALE if store.female[r] else MALE,
                tar_start=idx + 1,
                tar_end=tar_end,
                observed_tar_days=tar_end - idx,
                label=0 if outcome is None else 1,
                outcome_date=outcome,
            )
        )
    return cohort  # store rows are person_id-sorted, so the cohort is too


# ---------------------------------------------------------------------------
# characterization


@dataclass(frozen=True)
class CohortCharacterization:
    population_n: int
    outcomes_n: int
    outcome_pct: float
    median_tar_days: int
    tar_iqr: int
    female_n: int
    female_pct: float
    male_n: int
    male_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


def _lower_quantile(values: np.ndarray, q: float) -> int:
    return int(np.quantile(values, q, method="lower"))


def characterize(cohort: Sequence[CohortEntry]) -> CohortCharacterization:
    if len(cohort) == 0:
        raise EmptyCohortError("cannot characterize an empty cohort")
    n = len(cohort)
    tar = np.array([e.observed_tar_days for e in cohort])
    outcomes = sum(e.label for e in cohort)
    female = sum(e.sex == FEMALE for e in cohort)
    return CohortCharacterization(
        population_n=n,
        outcomes_n=outcomes,
        outcome_pct=100.0 * outcomes / n,
        median_tar_days=_lower_quantile(tar, 0.5),
        tar_iqr=_lower_quantile(tar, 0.75) - _lower_quantile(tar, 0.25),
        female_n=female,
        female_pct=100.0 * female / n,
        male_n=n - female,
        male_pct=100.0 * (n - female) / n,
    )


def _n_pct(n: int, pct: float) -> str:
    return f"{n:,} ({pct:.1f})"


def characterization_markdown(
    title: str,
    columns: dict[str, CohortCharacterization | None],
    min_cell_count: int = 5,
) -> str:
    """Render a Table-2-style block; ``None`` or small-outcome columns are suppressed."""
    names = list(columns)
    rows = {
        "Population, n": [],
        "Outcomes, n (%)": [],
        "Median time-at-risk, days (IQR)": [],
        "Sex": [],
        "Female, n (%)": [],
        "Male, n (%)": [],
    }
    for name in names:
        c = columns[name]
        if c is None or c.outcomes_n < min_cell_count:
            rows["Population, n"].append("")
            rows["Outcomes, n (%)"].append(f"<{min_cell_count} outcomes")
            for key in ("Median time-at-risk, days (IQR)", "Sex", "Female, n (%)", "Male, n (%)"):
                rows[key].append("")
            continue
        rows["Population, n"].append(f"{c.population_n:,}")
        rows["Outcomes, n (%)"].append(_n_pct(c.outcomes_n, c.outcome_pct))
        rows["Median time-at-risk, days (IQR)"].append(f"{c.median_tar_days:,} ({c.tar_iqr})")
        rows["Sex"].append("")
        rows["Female, n (%)"].append(_n_pct(c.female_n, c.female_pct))
        rows["Male, n (%)"].append(_n_pct(c.male_n, c.male_pct))
    lines = [f"### {title}", "", "| | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for label, cells in rows.items():
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_cohort_csv(cohort: Sequence[CohortEntry], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["person_id", "index_date", "age", "sex", "observed_tar_days", "label", "outcome_date"])
        for e in cohort:
            w.writerow([
                e.person_id, format_date(e.index_date), e.age_at_index, "F" if e.sex == FEMALE else "M",
                e.observed_tar_days, e.label, "" if e.outcome_date is None else format_date(e.outcome_date),
            ])


def labels_of(cohort: Sequence[CohortEntry]) -> np.ndarray:
    return np.fromiter((e.label for e in cohort), dtype=np.int8, count=len(cohort))


def outcome_standard_error(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
