"""Study orchestration: development, internal and external validation,
learning curves, performance matrices and the report bundle."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import learners
from .cohort import (
    CohortEntry,
    ProblemDefinition,
    build_cohort,
    characterization_markdown,
    characterize,
)
from .evalstats import (
    CalibrationResult,
    DiscriminationResult,
    MetricError,
    PerformanceMatrix,
    auroc,
    auroc_ci,
    e_avg,
    emit_cd_diagram,
    friedman,
    nemenyi,
    results_json,
)
from .features import CharlsonMap, DesignMatrix, FeatureDictionary, FeatureError, build_dictionary, build_matrix
from .learners import TrainConfig, TrainedModel
from .omop_lite import EventStore, StoreError, load_store, validate_store
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

DIRECTIONS = ("internal", "external")
STATUSES = ("ok", "suppressed", "failed")
PROFILES = {"desk": {"bootstrap_reps": 500, "n_hyperparameter_samples": 8},
            "full": {"bootstrap_reps": 2000, "n_hyperparameter_samples": 100}}


class StudyError(RuntimeError):
    pass


class SplitError(StudyError):
    pass


class SuppressedError(StudyError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Subgroup:
    """A slice of the record grid that gets its own matrix and rank tests."""

    name: str
    metric: str = "auroc"  # auroc | e_avg
    direction: str = "both"  # internal | external | both
    development_stores: tuple = ()  # empty = all
    gate: bool = False  # keep only contexts whose AUROC reaches the calibration gate

    def __post_init__(self):
        if self.metric not in ("auroc", "e_avg"):
            raise StudyError(f"subgroup {self.name}: unknown metric {self.metric!r}")
        if self.direction not in ("internal", "external", "both"):
            raise StudyError(f"subgroup {self.name}: unknown direction {self.direction!r}")


DEFAULT_SUBGROUPS = (
    Subgroup("internal_auroc", "auroc", "internal"),
    Subgroup("external_auroc", "auroc", "external"),
    Subgroup("all_auroc", "auroc", "both"),
    Subgroup("calibration", "e_avg", "both", gate=True),
)


@dataclass(frozen=True)
class StudyConfig:
    tasks: tuple
    development_stores: dict  # name -> directory
    validation_stores: dict
    methods: tuple = learners.FAMILIES
    split_fraction: float = 0.75
    master_seed: int = 0
    learning_curve_outcome_targets: tuple = ()
    learning_curve_methods: tuple | None = None  # None = every method
    min_cell_count: int = 5
    calibration_auroc_gate: float = 0.70
    bootstrap_reps: int = 2000
    profile: str = "full"
    train_overrides: dict = field(default_factory=dict)  # method -> TrainConfig fields
    subgroups: tuple = DEFAULT_SUBGROUPS
    charlson_map: CharlsonMap | None = None
    output_dir: str = "study_output"

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise StudyError("split_fraction must lie in (0, 1)")
        t = list(self.learning_curve_outcome_targets)
        if t != sorted(t) or len(set(t)) != len(t) or any(x < 1 for x in t):
            raise StudyError("learning_curve_outcome_targets must be strictly ascending positive integers")
        unknown = [m for m in self.methods if m not in learners.FAMILIES]
        if unknown or not self.methods:
            raise StudyError(f"unknown methods {unknown}; choose from {learners.FAMILIES}")
        if self.profile not in PROFILES:
            raise StudyError(f"unknown profile {self.profile!r}")
        if not self.tasks or not self.development_stores:
            raise StudyError("a study needs at least one task and one development store")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise StudyError("task names must be unique")
        for m, kw in self.train_overrides.items():
            if m not in learners.FAMILIES:
                raise StudyError(f"train_overrides for unknown method {m!r}")
            TrainConfig().with_overrides(**kw)
        both = set(self.development_stores) & set(self.validation_stores)
        for name in both:
            if self.development_stores[name] != self.validation_stores[name]:
                raise StudyError(f"store {name!r} is listed with two different paths")

    @property
    def curve_methods(self) -> tuple:
        return tuple(self.methods) if self.learning_curve_methods is None else tuple(self.learning_curve_methods)

    def train_config(self, method: str) -> TrainConfig:
        base = TrainConfig(n_hyperparameter_samples=PROFILES[self.profile]["n_hyperparameter_samples"])
        return base.with_overrides(**self.train_overrides.get(method, {}))

    def with_profile(self, profile: str) -> "StudyConfig":
        from dataclasses import replace

        if profile not in PROFILES:
            raise StudyError(f"unknown profile {profile!r}")
        return replace(self, profile=profile, bootstrap_reps=PROFILES[profile]["bootstrap_reps"])

    def store_path(self, name: str) -> str:
        if name in self.development_stores:
            return self.development_stores[name]
        return self.validation_stores[name]

    # -- JSON ------------------------------------------------------------------
    def to_json_dict(self) -> dict:
        return {
            "tasks": [t.to_json_dict() for t in self.tasks],
            "development_stores": dict(self.development_stores),
            "validation_stores": dict(self.validation_stores),
            "methods": list(self.methods),
            "split_fraction": self.split_fraction,
            "master_seed": self.master_seed,
            "learning_curve_outcome_targets": list(self.learning_curve_outcome_targets),
            "learning_curve_methods": None if self.learning_curve_methods is None else list(self.learning_curve_methods),
            "min_cell_count": self.min_cell_count,
            "calibration_auroc_gate": self.calibration_auroc_gate,
            "bootstrap_reps": self.bootstrap_reps,
            "profile": self.profile,
            "train_overrides": {k: dict(v) for k, v in sorted(self.train_overrides.items())},
            "subgroups": [asdict(s) | {"development_stores": list(s.development_stores)} for s in self.subgroups],
            "charlson_map": None if self.charlson_map is None else self.charlson_map.to_json_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json_dict(cls, d: dict, base_dir=None) -> "StudyConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise StudyError(f"unknown config key(s): {sorted(unknown)}")
        kw = dict(d)
        kw["tasks"] = tuple(ProblemDefinition.from_json_dict(t) for t in d.get("tasks", []))
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p):
            p = Path(p)
            return str(p if p.is_absolute() or base is None else base / p)

        for key in ("development_stores", "validation_stores"):
            kw[key] = {str(k): resolve(v) for k, v in d.get(key, {}).items()}
        for key in ("methods", "learning_curve_outcome_targets"):
            if key in d:
                kw[key] = tuple(d[key])
        if d.get("learning_curve_methods") is not None:
            kw["learning_curve_methods"] = tuple(d["learning_curve_methods"])
        if "subgroups" in d:
            subs = []
            for s in d["subgroups"]:
                extra = set(s) - set(Subgroup.__dataclass_fields__)
                if extra:
                    raise StudyError(f"unknown subgroup key(s): {sorted(extra)}")
                s = dict(s)
                s["development_stores"] = tuple(s.get("development_stores", ()))
                subs.append(Subgroup(**s))
            kw["subgroups"] = tuple(subs)
        if d.get("charlson_map") is not None:
            kw["charlson_map"] = CharlsonMap.from_json_dict(d["charlson_map"])
        if "output_dir" in d:
            kw["output_dir"] = resolve(d["output_dir"])
        if "profile" in d and "bootstrap_reps" not in d:
            kw["bootstrap_reps"] = PROFILES[d["profile"]]["bootstrap_reps"] if d["profile"] in PROFILES else 2000
        return cls(**kw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path) -> StudyConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StudyError(f"{path}: invalid JSON ({exc})") from None
    return StudyConfig.from_json_dict(doc, base_dir=path.parent)


# ---------------------------------------------------------------------------
# records


@dataclass
class StudyRecord:
    task: str
    development_store: str
    validation_store: str
    method: str
    direction: str
    discrimination: DiscriminationResult | None = None
    calibration: CalibrationResult | None = None
    status: str = "ok"
    reason: str = ""
    n_rows: int | None = None
    n_outcomes: int | None = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise StudyError(f"bad direction {self.direction!r}")
        if self.status not in STATUSES:
            raise StudyError(f"bad status {self.status!r}")
        if (self.status == "ok") != (self.discrimination is not None and self.calibration is not None):
            raise StudyError("status 'ok' requires both discrimination and calibration results, and only then")

    @property
    def sort_key(self) -> tuple:
        return (self.task, self.development_store, self.direction != "internal", self.validation_store, self.method)

    @property
    def auroc(self) -> float | None:
        return None if self.discrimination is None else self.discrimination.auroc

    @property
    def context(self) -> str:
        return f"{self.task}|{self.development_store}|{self.validation_store}|{self.direction}"


RECORD_COLUMNS = [
    "task", "development_store", "validation_store", "method", "direction", "status",
    "auroc", "ci_low", "ci_high", "n_bootstrap", "e_avg", "calibration_method", "n_rows", "n_outcomes", "reason",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(round(x, 12))
    return str(x)


def records_csv(records: Sequence[StudyRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in sorted(records, key=lambda r: r.sort_key):
        d, c = r.discrimination, r.calibration
        w.writerow([_fmt(v) for v in (
            r.task, r.development_store, r.validation_store, r.method, r.direction, r.status,
            d and d.auroc, d and d.ci_low, d and d.ci_high, d and d.n_bootstrap,
            c and c.e_avg, c and c.method, r.n_rows, r.n_outcomes, r.reason,
        )])
    return buf.getvalue()


def read_records_csv(path) -> list[StudyRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            disc = cal = None
            if row["status"] == "ok":
                n_rows, n_out = int(row["n_rows"]), int(row["n_outcomes"])
                disc = DiscriminationResult(float(row["auroc"]), float(row["ci_low"]), float(row["ci_high"]),
                                            int(row["n_bootstrap"]), n_out, n_rows - n_out)
                cal = CalibrationResult(float(row["e_avg"]), [], row["calibration_method"])
            out.append(StudyRecord(
                row["task"], row["development_store"], row["validation_store"], row["method"], row["direction"],
                disc, cal, row["status"], row["reason"],
                int(row["n_rows"]) if row["n_rows"] else None, int(row["n_outcomes"]) if row["n_outcomes"] else None,
            ))
    return out


@dataclass(frozen=True)
class LearningCurvePoint:
    task: str
    development_store: str
    method: str
    target_outcome_count: int
    realized_outcome_count: int | None
    subset_size: int | None
    test_auroc: float | None
    status: str = "ok"  # ok | omitted | failed
    reason: str = ""


CURVE_COLUMNS = ["task", "development_store", "method", "target_outcome_count", "realized_outcome_count",
                 "subset_size", "test_auroc", "status", "reason"]


def curves_csv(points: Sequence[LearningCurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for p in sorted(points, key=lambda p: (p.task, p.development_store, p.method, p.target_outcome_count)):
        w.writerow([_fmt(getattr(p, c)) for c in CURVE_COLUMNS])
    return buf.getvalue()


def read_curves_csv(path) -> list[LearningCurvePoint]:
    def num(x, f):
        return f(x) if x != "" else None

    with open(path, newline="", encoding="utf-8") as fh:
        return [LearningCurvePoint(r["task"], r["development_store"], r["method"], int(r["target_outcome_count"]),
                                   num(r["realized_outcome_count"], int), num(r["subset_size"], int),
                                   num(r["test_auroc"], float), r["status"], r["reason"])
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# protocol steps


def split_train_test(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of row indices; each class keeps floor(fraction * n_class) rows for training."""
    labels = np.asarray(labels)
    if not 0 < fraction < 1:
        raise SplitError("fraction must lie in (0, 1)")
    rng = rng_for(seed, "train-test-split")
    train, test = [], []
    for cls in (0, 1):
        rows = np.flatnonzero(labels == cls)
        if len(rows) < 4:
            raise SplitError(f"class {cls} has {len(rows)} rows; at least 4 are needed to split")
        rows = rows[rng.permutation(len(rows))]
        k = int(math.floor(fraction * len(rows)))
        train.append(rows[:k])
        test.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def evaluate(probs, labels, n_reps: int, seed: int) -> tuple[DiscriminationResult, CalibrationResult]:
    return auroc_ci(probs, labels, n_reps=n_reps, seed=seed), e_avg(probs, labels)


@dataclass
class DevelopmentData:
    """Everything derived from one (store, task) cohort that the methods share."""

    task: ProblemDefinition
    store_name: str
    cohort: list
    dictionary: FeatureDictionary
    matrix: DesignMatrix
    train_rows: np.ndarray
    test_rows: np.ndarray
    split_seed: int

    @property
    def train(self) -> DesignMatrix:
        return self.matrix.subset(self.train_rows)

    @property
    def test(self) -> DesignMatrix:
        return self.matrix.subset(self.test_rows)


def n_outcomes(cohort: Sequence[CohortEntry]) -> int:
    return int(sum(e.label for e in cohort))


def is_suppressed(cohort: Sequence[CohortEntry], min_cell_count: int) -> bool:
    return n_outcomes(cohort) < min_cell_count


def prepare_development(store: EventStore, task: ProblemDefinition, config: StudyConfig,
                        cohort: list | None = None) -> DevelopmentData:
    cohort = build_cohort(store, task) if cohort is None else cohort
    if is_suppressed(cohort, config.min_cell_count):
        raise SuppressedError(f"fewer than {config.min_cell_count} outcomes")
    dictionary = build_dictionary(store, cohort, task)
    matrix = build_matrix(store, cohort, dictionary, config.charlson_map, task.lookback_days)
    seed = derive_seed(config.master_seed, task.name, store.name, "split")
    train, test = split_train_test(matrix.labels, config.split_fraction, seed)
    return DevelopmentData(task, store.name, cohort, dictionary, matrix, train, test, seed)


def _fit_with_retry(method: str, matrix: DesignMatrix, seed: int, cfg: TrainConfig, provenance: dict,
                    retry_seed: int, jobs: int = 1) -> TrainedModel:
    try:
        return learners.fit(method, matrix, seed, cfg, provenance, jobs)
    except (learners.LearnerError, FloatingPointError, MetricError) as first:
        log.warning("%s fit failed (%s); retrying with a fresh seed", method, first)
        try:
            return learners.fit(method, matrix, retry_seed, cfg, dict(provenance, retried_after=str(first)), jobs)
        except (learners.LearnerError, FloatingPointError, MetricError) as second:
            raise learners.LearnerError(f"failed twice: {first}; {second}") from second


def run_development(dev: DevelopmentData, method: str, config: StudyConfig,
                    model_dir=None, jobs: int = 1) -> tuple[TrainedModel | None, StudyRecord]:
    task, store = dev.task.name, dev.store_name
    base = dict(task=task, development_store=store, validation_store=store, method=method, direction="internal")
    seed = derive_seed(config.master_seed, task, store, method, "fit")
    provenance = {"store": store, "task": task}
    try:
        model = _fit_with_retry(method, dev.train, seed, config.train_config(method), provenance,
                                derive_seed(config.master_seed, task, store, method, "fit-retry"), jobs)
    except learners.LearnerError as exc:
        return None, StudyRecord(**base, status="failed", reason=str(exc))
    test = dev.test
    if np.intersect1d(test.row_ids, dev.train.row_ids).size:
        raise StudyError("internal evaluation rows overlap the training rows")
    probs = learners.predict(model, test)
    try:
        disc, cal = evaluate(probs, test.labels, config.bootstrap_reps,
                             derive_seed(config.master_seed, task, store, store, method, "bootstrap"))
    except MetricError as exc:
        return model, StudyRecord(**base, status="failed", reason=f"evaluation: {exc}")
    if model_dir is not None:
        persist_model(model, dev.dictionary, model_dir)
    return model, StudyRecord(**base, discrimination=disc, calibration=cal, n_rows=test.n_rows,
                              n_outcomes=int(test.labels.sum()))


def persist_model(model: TrainedModel, dictionary: FeatureDictionary, directory) -> Path:
    directory = learners.save_model(model, directory)
    dictionary.save(Path(directory) / "dictionary.json")
    return directory


def load_persisted(directory) -> tuple[TrainedModel, FeatureDictionary]:
    model = learners.load_model(directory)
    dictionary = FeatureDictionary.load(Path(directory) / "dictionary.json")
    if dictionary.hash != model.dictionary_hash:
        raise FeatureError(f"{directory}: dictionary.json does not match the model's dictionary hash")
    return model, dictionary


def run_external_validation(model: TrainedModel, dictionary: FeatureDictionary, store: EventStore,
                            task: ProblemDefinition, config: StudyConfig, development_store: str,
                            cohort: list | None = None) -> StudyRecord:
    """Apply ``model`` to the full ``task`` cohort of ``store`` (no split)."""
    base = dict(task=task.name, development_store=development_store, validation_store=store.name,
                method=model.family, direction="external")
    cohort = build_cohort(store, task) if cohort is None else cohort
    if is_suppressed(cohort, config.min_cell_count):
        return StudyRecord(**base, status="suppressed", reason=f"<{config.min_cell_count} outcomes")
    matrix = build_matrix(store, cohort, dictionary, config.charlson_map, task.lookback_days)
    if matrix.labels.min() == matrix.labels.max():
        return StudyRecord(**base, status="failed", reason="validation cohort has a single class")
    probs = learners.predict(model, matrix)
    seed = derive_seed(config.master_seed, task.name, development_store, store.name, model.family, "bootstrap")
    try:
        disc, cal = evaluate(probs, matrix.labels, config.bootstrap_reps, seed)
    except MetricError as exc:
        return StudyRecord(**base, status="failed", reason=f"evaluation: {exc}")
    return StudyRecord(**base, discrimination=disc, calibration=cal, n_rows=matrix.n_rows,
                       n_outcomes=int(matrix.labels.sum()))


def curve_subsets(train_labels, targets: Iterable[int], seed: int) -> dict[int, np.ndarray | None]:
    """Smallest prefix of one seeded permutation holding each target count of positives.

    Targets beyond the available positives map to ``None``.
    """
    labels = np.asarray(train_labels)
    perm = rng_for(seed, "learning-curve").permutation(len(labels))
    pos_at = np.flatnonzero(labels[perm] == 1)
    out = {}
    for t in targets:
        out[t] = None if t > len(pos_at) else np.sort(perm[: pos_at[t - 1] + 1])
    return out


def run_learning_curve(dev: DevelopmentData, model: TrainedModel, targets: Sequence[int],
                       config: StudyConfig) -> list[LearningCurvePoint]:
    task, store, method = dev.task.name, dev.store_name, model.family
    train, test = dev.train, dev.test
    seed = derive_seed(config.master_seed, task, store, "curve")
    points = []
    available = int(train.labels.sum())
    for t, rows in curve_subsets(train.labels, targets, seed).items():
        if rows is None:
            log.warning("%s/%s/%s: target %d exceeds the %d training outcomes", task, store, method, t, available)
            points.append(LearningCurvePoint(task, store, method, t, None, None, None, "omitted",
                                             f"target exceeds available outcomes ({available})"))
            continue
        sub = train.subset(rows)
        fit_seed = derive_seed(config.master_seed, task, store, method, "curve", t)
        try:
            refit = learners.refit(model, sub, fit_seed, config.train_config(method))
            score = auroc(learners.predict(refit, test), test.labels)
        except (learners.LearnerError, MetricError) as exc:
            points.append(LearningCurvePoint(task, store, method, t, int(sub.labels.sum()), sub.n_rows, None,
                                             "failed", str(exc)))
            continue
        points.append(LearningCurvePoint(task, store, method, t, int(sub.labels.sum()), sub.n_rows, score))
    return points


# ---------------------------------------------------------------------------
# matrices and rank tests


def build_performance_matrix(records: Sequence[StudyRecord], methods: Sequence[str], metric: str = "auroc",
                             direction: str = "both", development_stores: Sequence[str] = (),
                             auroc_gate: float | None = None) -> PerformanceMatrix:
    """Contexts (task, development store, validation store) x methods.

    Cells of suppressed or failed records, and cells failing the AUROC gate,
    are NaN. Contexts where no method passes the filters are dropped.
    """
    cells: dict[str, dict[str, float]] = {}
    for r in records:
        if direction != "both" and r.direction != direction:
            continue
        if development_stores and r.development_store not in development_stores:
            continue
        if r.method not in methods:
            continue
        row = cells.setdefault(r.context, {})
        if r.status != "ok":
            continue
        if auroc_gate is not None and r.discrimination.auroc < auroc_gate:
            continue
        row[r.method] = r.discrimination.auroc if metric == "auroc" else r.calibration.e_avg
    contexts = sorted(c for c, row in cells.items() if row)
    if not contexts:
        raise StudyError("no records match the matrix filters")
    values = np.array([[cells[c].get(m, np.nan) for m in methods] for c in contexts], dtype=np.float64)
    return PerformanceMatrix(contexts, list(methods), values, higher_is_better=(metric == "auroc"))


def compare(records: Sequence[StudyRecord], config: StudyConfig, out_dir) -> dict:
    """Matrix CSV, rank-test JSON and CD diagram per configured subgroup."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    methods = list(config.methods)
    for sg in config.subgroups:
        entry: dict = {"status": "ok"}
        try:
            pm = build_performance_matrix(records, methods, sg.metric, sg.direction, sg.development_stores,
                                          config.calibration_auroc_gate if sg.gate else None)
        except (StudyError, MetricError) as exc:
            summary[sg.name] = {"status": "skipped", "reason": str(exc)}
            continue
        pm.write_csv(out_dir / f"matrix_{sg.name}.csv")
        try:
            fr = friedman(pm)
            nem = nemenyi(pm)
        except MetricError as exc:
            summary[sg.name] = {"status": "skipped", "reason": str(exc)}
            continue
        (out_dir / f"ranks_{sg.name}.json").write_text(results_json(fr, nem))
        emit_cd_diagram(nem, fr, out_dir / f"cd_{sg.name}.svg", title=sg.name)
        entry.update(q=fr.q, df=fr.df, p_value=fr.p_value, n=fr.n, critical_difference=nem.critical_difference)
        summary[sg.name] = entry
    return summary


# ---------------------------------------------------------------------------
# the full study


@dataclass
class StudyResults:
    config: StudyConfig
    records: list
    curves: list
    characterizations: dict  # task -> {store -> CohortCharacterization | None}
    seeds: dict
    wall_time_s: float = 0.0


class _Stores:
    def __init__(self, config: StudyConfig):
        self.config = config
        self._stores: dict[str, EventStore] = {}
        self._cohorts: dict[tuple, list] = {}

    def store(self, name: str) -> EventStore:
        if name not in self._stores:
            store = load_store(self.config.store_path(name), name=name)
            report = validate_store(store)
            if not report.ok:
                raise StoreError(f"store {name!r} failed validation: {report.errors[:3]}")
            self._stores[name] = store
        return self._stores[name]

    def cohort(self, name: str, task: ProblemDefinition) -> list:
        key = (name, task.name)
        if key not in self._cohorts:
            self._cohorts[key] = build_cohort(self.store(name), task)
        return self._cohorts[key]


def _run_unit(config: StudyConfig, task: ProblemDefinition, dev_name: str, model_root, stores: _Stores,
              fit_jobs: int = 1):
    """Everything downstream of one development cohort: fits, internal and
    external records and learning curves."""
    records: list[StudyRecord] = []
    curves: list[LearningCurvePoint] = []
    seeds: dict = {}
    log.info("task %s, development store %s", task.name, dev_name)
    try:
        dev = prepare_development(stores.store(dev_name), task, config, stores.cohort(dev_name, task))
        seeds[f"{task.name}/{dev_name}/split"] = dev.split_seed
    except (SuppressedError, SplitError) as exc:
        status = "suppressed" if isinstance(exc, SuppressedError) else "failed"
        reason = f"<{config.min_cell_count} outcomes" if status == "suppressed" else str(exc)
        for method in config.methods:
            records.append(StudyRecord(task.name, dev_name, dev_name, method, "internal", status=status, reason=reason))
            for val_name in config.validation_stores:
                records.append(StudyRecord(task.name, dev_name, val_name, method, "external",
                                           status=status, reason=f"development cohort: {reason}"))
        return records, curves, seeds
    for method in config.methods:
        seeds[f"{task.name}/{dev_name}/{method}/fit"] = derive_seed(config.master_seed, task.name, dev_name, method, "fit")
        mdir = None if model_root is None else Path(model_root) / task.name / dev_name / method
        model, rec = run_development(dev, method, config, mdir, fit_jobs)
        records.append(rec)
        if model is None or rec.status != "ok":
            for val_name in config.validation_stores:
                records.append(StudyRecord(task.name, dev_name, val_name, method, "external",
                                           status="failed", reason="no development model"))
            continue
        if config.learning_curve_outcome_targets and method in config.curve_methods:
            seeds[f"{task.name}/{dev_name}/curve"] = derive_seed(config.master_seed, task.name, dev_name, "curve")
            curves += run_learning_curve(dev, model, config.learning_curve_outcome_targets, config)
        for val_name in config.validation_stores:
            records.append(run_external_validation(model, dev.dictionary, stores.store(val_name), task, config,
                                                   dev_name, stores.cohort(val_name, task)))
    return records, curves, seeds


_WORKER_STORES: dict = {}


def _unit_worker(args):
    config, task, dev_name, model_root = args
    key = config.hash()
    if key not in _WORKER_STORES:
        _WORKER_STORES.clear()
        _WORKER_STORES[key] = _Stores(config)
    return _run_unit(config, task, dev_name, model_root, _WORKER_STORES[key])


def characterizations(config: StudyConfig, stores: _Stores) -> dict:
    """task -> store -> characterization, ``None`` for suppressed cohorts."""
    out: dict = {}
    names = list(dict.fromkeys(list(config.development_stores) + list(config.validation_stores)))
    for task in config.tasks:
        out[task.name] = {}
        for name in names:
            cohort = stores.cohort(name, task)
            out[task.name][name] = None if is_suppressed(cohort, config.min_cell_count) else characterize(cohort)
    return out


def run_study(config: StudyConfig, model_root=None, jobs: int = 1, stores: _Stores | None = None) -> StudyResults:
    """Run the whole grid. Results do not depend on ``jobs``: every unit
    derives its own seeds and records are sorted canonically.

    Several development units run in parallel across processes; a single
    unit instead passes ``jobs`` on to the neural hyperparameter search.
    """
    t0 = time.perf_counter()
    stores = stores or _Stores(config)
    chars = characterizations(config, stores)
    units = [(config, task, dev, model_root) for task in config.tasks for dev in config.development_stores]
    if jobs > 1 and len(units) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_unit_worker, units))
    else:
        outputs = [_run_unit(c, t, d, m, stores, fit_jobs=jobs) for c, t, d, m in units]
    records: list[StudyRecord] = []
    curves: list[LearningCurvePoint] = []
    seeds: dict = {}
    for r, c, s in outputs:
        records += r
        curves += c
        seeds.update(s)
    records.sort(key=lambda r: r.sort_key)
    return StudyResults(config, records, curves, chars, seeds, time.perf_counter() - t0)


def _characterization_doc(results: StudyResults) -> str:
    parts = []
    for task in results.config.tasks:
        cols = results.characterizations.get(task.name, {})
        parts.append(characterization_markdown(task.name, cols, results.config.min_cell_count))
    return "\n".join(parts)


def emit_report(results: StudyResults, output_dir) -> Path:
    """Write the report bundle. Only manifest.json carries run timing."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = results.config
    (out / "records.csv").write_text(records_csv(results.records))
    (out / "characterization.md").write_text(_characterization_doc(results))
    (out / "learning_curves.csv").write_text(curves_csv(results.curves))
    summary = compare(results.records, cfg, out)
    (out / "comparisons.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_json_dict(), indent=1, sort_keys=True) + "\n")
    manifest = {
        "tool": "plpbench",
        "version": __version__,
        "config_hash": cfg.hash(),
        "master_seed": cfg.master_seed,
        "profile": cfg.profile,
        "seeds": dict(sorted({**derived_seeds(cfg), **results.seeds}.items())),
        "counts": {s: sum(r.status == s for r in results.records) for s in STATUSES},
        "wall_time_s": round(results.wall_time_s, 3),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def derived_seeds(config: StudyConfig) -> dict:
    """Every seed the study derives from the master seed, keyed by purpose."""
    seeds = {}
    for task in config.tasks:
        for dev in config.development_stores:
            seeds[f"{task.name}/{dev}/split"] = derive_seed(config.master_seed, task.name, dev, "split")
            if config.learning_curve_outcome_targets:
                seeds[f"{task.name}/{dev}/curve"] = derive_seed(config.master_seed, task.name, dev, "curve")
            for m in config.methods:
                seeds[f"{task.name}/{dev}/{m}/fit"] = derive_seed(config.master_seed, task.name, dev, m, "fit")
    return seeds


def failed_count(records: Iterable[StudyRecord]) -> int:
    return sum(r.status == "failed" for r in records)
