"""Flattened covariate construction.

Columns 0-2 hold age/100, a female indicator and the Charlson index. The
remaining columns are dichotomized concept indicators for the lookback
window ``[index - 365, index - 1]``; the index date itself is excluded.
A ``FeatureDictionary`` fixes the concept-to-column mapping so a model
built on one store can be applied to another: concepts unknown to the
dictionary are dropped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .cohort import CohortEntry, EmptyCohortError, ProblemDefinition
from .omop_lite import CONDITION, DOMAIN_CODES, DOMAINS, FEMALE, EventStore

DEMOGRAPHIC_KEYS = ("age", "sex", "charlson")
N_DENSE = len(DEMOGRAPHIC_KEYS)
DICTIONARY_VERSION = "plpbench-features-1"

PLPM_MAGIC = b"PLPM"
PLPM_VERSION = 1


class FeatureError(ValueError):
    pass


class TransportError(FeatureError):
    pass


def concept_key(concept_id: int, domain: int | str) -> str:
    if isinstance(domain, int) or isinstance(domain, np.integer):
        domain = DOMAINS[int(domain)]
    return f"concept:{int(concept_id)}:{domain}"


def _code(concept_id, domain_code):
    # dictionary order (concept asc, condition before drug) equals order of this code
    return np.asarray(concept_id, dtype=np.int64) * 2 + np.asarray(domain_code, dtype=np.int64)


@dataclass(frozen=True)
class FeatureDictionary:
    concept_codes: np.ndarray  # sorted concept*2+domain codes, one per sparse column
    version: str = DICTIONARY_VERSION
    provenance: dict = field(default_factory=dict)

    @property
    def n_cols(self) -> int:
        return N_DENSE + len(self.concept_codes)

    def keys(self) -> list[str]:
        return list(DEMOGRAPHIC_KEYS) + [concept_key(c // 2, c % 2) for c in self.concept_codes.tolist()]

    def column_of(self, key: str) -> int:
        if key in DEMOGRAPHIC_KEYS:
            return DEMOGRAPHIC_KEYS.index(key)
        _, cid, dom = key.split(":")
        code = int(cid) * 2 + DOMAIN_CODES[dom]
        pos = int(np.searchsorted(self.concept_codes, code))
        if pos >= len(self.concept_codes) or self.concept_codes[pos] != code:
            raise KeyError(key)
        return N_DENSE + pos

    def columns_for(self, concept_ids, domain_codes) -> np.ndarray:
        """Column per (concept, domain) pair, ``-1`` where the dictionary lacks it."""
        codes = _code(concept_ids, domain_codes)
        pos = np.searchsorted(self.concept_codes, codes)
        pos_c = np.minimum(pos, max(len(self.concept_codes) - 1, 0))
        hit = (pos < len(self.concept_codes)) & (self.concept_codes[pos_c] == codes) if len(self.concept_codes) else np.zeros(len(codes), bool)
        return np.where(hit, pos + N_DENSE, -1)

    @property
    def hash(self) -> str:
        payload = json.dumps({"version": self.version, "keys": self.keys()}, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "hash": self.hash,
            "provenance": self.provenance,
            "entries": [[k, i] for i, k in enumerate(self.keys())],
        }
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "FeatureDictionary":
        doc = json.loads(text)
        codes = []
        for i, (key, col) in enumerate(doc["entries"]):
            if col != i:
                raise FeatureError("dictionary columns must be dense and ordered")
            if i < N_DENSE:
                if key != DEMOGRAPHIC_KEYS[i]:
                    raise FeatureError(f"column {i} must be {DEMOGRAPHIC_KEYS[i]!r}")
                continue
            _, cid, dom = key.split(":")
            codes.append(int(cid) * 2 + DOMAIN_CODES[dom])
        arr = np.asarray(codes, dtype=np.int64)
        if np.any(np.diff(arr) <= 0):
            raise FeatureError("concept columns must be strictly ordered")
        out = cls(arr, doc.get("version", DICTIONARY_VERSION), doc.get("provenance", {}))
        if "hash" in doc and doc["hash"] != out.hash:
            raise FeatureError("dictionary hash mismatch")
        return out

    @classmethod
    def load(cls, path) -> "FeatureDictionary":
        return cls.from_json(Path(path).read_text())

    def __eq__(self, other):
        return isinstance(other, FeatureDictionary) and self.hash == other.hash

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# Charlson

STANDARD_CHARLSON_CATEGORIES = (
    ("myocardial_infarction", 1),
    ("congestive_heart_failure", 1),
    ("peripheral_vascular_disease", 1),
    ("cerebrovascular_disease", 1),
    ("dementia", 1),
    ("chronic_pulmonary_disease", 1),
    ("rheumatologic_disease", 1),
    ("peptic_ulcer_disease", 1),
    ("mild_liver_disease", 1),
    ("diabetes_uncomplicated", 1),
    ("diabetes_with_complications", 2),
    ("hemiplegia_or_paraplegia", 2),
    ("renal_disease", 2),
    ("any_malignancy", 2),
    ("moderate_severe_liver_disease", 3),
    ("metastatic_solid_tumor", 6),
    ("aids", 6),
)


@dataclass(frozen=True)
class CharlsonCategory:
    name: str
    concepts: frozenset
    weight: int


@dataclass(frozen=True)
class CharlsonMap:
    categories: tuple[CharlsonCategory, ...]

    def __post_init__(self):
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise FeatureError("Charlson categories must have distinct names")
        if any(c.weight <= 0 for c in self.categories):
            raise FeatureError("Charlson weights must be positive")

    def to_json_dict(self) -> dict:
        return {"categories": [{"name": c.name, "weight": c.weight, "concepts": sorted(c.concepts)} for c in self.categories]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "CharlsonMap":
        return cls(tuple(CharlsonCategory(c["name"], frozenset(int(x) for x in c["concepts"]), int(c["weight"])) for c in d["categories"]))

    @classmethod
    def empty(cls) -> "CharlsonMap":
        return cls(())


def synthetic_charlson_map(condition_concepts: Sequence[int], per_category: int = 2, skip: int = 0) -> CharlsonMap:
    """Assign consecutive condition concepts to the 17 standard categories."""
    pool = list(condition_concepts)[skip:]
    cats = []
    for i, (name, weight) in enumerate(STANDARD_CHARLSON_CATEGORIES):
        members = pool[i * per_category : (i + 1) * per_category]
        cats.append(CharlsonCategory(name, frozenset(members), weight))
    return CharlsonMap(tuple(cats))


def _charlson_from_arrays(cmap: CharlsonMap, concepts, dates, domains, lo_day, hi_day) -> int:
    a = np.searchsorted(dates, lo_day, side="left") if lo_day is not None else 0
    b = np.searchsorted(dates, hi_day, side="right")
    sel = domains[a:b] == CONDITION
    present = set(concepts[a:b][sel].tolist())
    return sum(c.weight for c in cmap.categories if present & c.concepts)


def charlson_score(
    store: EventStore,
    person_id: int,
    index_date: int,
    cmap: CharlsonMap,
    lookback_days: int | None = None,
) -> int:
    """Weighted count of categories with a condition on or before ``index_date - 1``.

    ``lookback_days=None`` uses all history.
    """
    r = store.row_of(person_id)
    concepts, dates, domains = store.events_of_row(r)
    lo = None if lookback_days is None else index_date - lookback_days
    return _charlson_from_arrays(cmap, concepts, dates, domains, lo, index_date - 1)


# ---------------------------------------------------------------------------
# design matrix


@dataclass(frozen=True)
class DesignMatrix:
    dense: np.ndarray  # (n, 3) float64: age/100, female, charlson
    indptr: np.ndarray  # (n + 1,) int64
    indices: np.ndarray  # (nnz,) int32, global column indices >= 3
    labels: np.ndarray  # (n,) int8
    row_ids: np.ndarray  # (n,) int64 person ids
    n_cols: int
    dictionary_hash: str = ""

    def __post_init__(self):
        for a in (self.dense, self.indptr, self.indices, self.labels, self.row_ids):
            a.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def sparse_block(self) -> sp.csr_matrix:
        """Binary indicators in global column coordinates (columns 0-2 empty)."""
        data = np.ones(len(self.indices), dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_rows, self.n_cols))

    def to_csr(self) -> sp.csr_matrix:
        full = sp.hstack([sp.csr_matrix(self.dense), self.sparse_block()[:, N_DENSE:]], format="csr")
        full.sort_indices()
        return full

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=dtype)
        out[:, :N_DENSE] = self.dense
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        out[rows, self.indices] = 1
        return out

    def row_columns(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def subset(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        lengths = np.diff(self.indptr)[rows]
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        if len(rows):
            starts = self.indptr[rows]
            gather = np.repeat(starts - indptr[:-1], lengths) + np.arange(indptr[-1])
            indices = self.indices[gather]
        else:
            indices = np.empty(0, dtype=np.int32)
        return DesignMatrix(
            self.dense[rows].copy(), indptr, indices.astype(np.int32), self.labels[rows].copy(),
            self.row_ids[rows].copy(), self.n_cols, self.dictionary_hash,
        )

    def with_labels(self, labels) -> "DesignMatrix":
        return DesignMatrix(self.dense.copy(), self.indptr.copy(), self.indices.copy(), np.asarray(labels, dtype=np.int8),
                            self.row_ids.copy(), self.n_cols, self.dictionary_hash)

    def column_prevalence(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n_cols)[: self.n_cols]

    # -- files ---------------------------------------------------------
    def write_plpm(self, path) -> None:
        """Binary layout, all little-endian:

        magic "PLPM" | u32 version | u64 n_rows | u64 n_cols | u64 nnz |
        u32 hash_len | hash bytes (ascii) | f64[n_rows*3] dense (row-major) |
        i64[n_rows+1] indptr | i32[nnz] indices | u8[n_rows] labels | i64[n_rows] row_ids
        """
        h = self.dictionary_hash.encode("ascii")
        with open(path, "wb") as fh:
            fh.write(PLPM_MAGIC)
            fh.write(struct.pack("<IQQQI", PLPM_VERSION, self.n_rows, self.n_cols, self.nnz, len(h)))
            fh.write(h)
            fh.write(np.ascontiguousarray(self.dense, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.indptr, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.indices, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.labels, dtype="u1").tobytes())
            fh.write(np.ascontiguousarray(self.row_ids, dtype="<i8").tobytes())

    @classmethod
    def read_plpm(cls, path) -> "DesignMatrix":
        buf = Path(path).read_bytes()
        if buf[:4] != PLPM_MAGIC:
            raise FeatureError(f"{path}: not a PLPM file")
        version, n, m, nnz, hlen = struct.unpack_from("<IQQQI", buf, 4)
        if version != PLPM_VERSION:
            raise FeatureError(f"{path}: unsupported PLPM version {version}")
        off = 4 + struct.calcsize("<IQQQI")
        h = buf[off : off + hlen].decode("ascii")
        off += hlen

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr.astype(np.dtype(dtype).newbyteorder("="))

        dense = take("<f8", n * N_DENSE).reshape(n, N_DENSE)
        indptr = take("<i8", n + 1)
        indices = take("<i4", nnz)
        labels = take("u1", n).astype(np.int8)
        row_ids = take("<i8", n)
        return cls(dense, indptr, indices, labels, row_ids, int(m), h)

    def write_triplets_csv(self, path, dictionary: FeatureDictionary | None = None) -> None:
        keys = dictionary.keys() if dictionary is not None else None
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "person_id", "column", "key", "value"])
            for i in range(self.n_rows):
                pid = int(self.row_ids[i])
                for j in range(N_DENSE):
                    v = float(self.dense[i, j])
                    if v != 0.0:
                        w.writerow([i, pid, j, keys[j] if keys else "", repr(v)])
                for j in self.row_columns(i).tolist():
                    w.writerow([i, pid, j, keys[j] if keys else "", 1])


def _lookback_codes(store: EventStore, entry: CohortEntry, lookback_days: int) -> np.ndarray:
    r = store.row_of(entry.person_id)
    concepts, dates, domains = store.events_of_row(r)
    a = np.searchsorted(dates, entry.index_date - lookback_days, side="left")
    b = np.searchsorted(dates, entry.index_date - 1, side="right")
    return np.unique(_code(concepts[a:b], domains[a:b]))


def build_dictionary(
    store: EventStore,
    cohort: Sequence[CohortEntry],
    problem: ProblemDefinition | None = None,
    min_prevalence: int = 0,
) -> FeatureDictionary:
    """Union of (concept, domain) pairs seen in any member's lookback window.

    ``min_prevalence`` drops concepts seen in fewer members; 0 keeps all.
    """
    if len(cohort) == 0:
        raise EmptyCohortError("cannot build a dictionary from an empty cohort")
    lookback = problem.lookback_days if problem is not None else 365
    per_row = [_lookback_codes(store, e, lookback) for e in cohort]
    allc = np.concatenate(per_row) if per_row else np.empty(0, np.int64)
    codes, counts = np.unique(allc, return_counts=True)
    if min_prevalence > 0:
        codes = codes[counts >= min_prevalence]
    provenance = {"store": store.name, "cohort_size": len(cohort)}
    if problem is not None:
        provenance["task"] = problem.name
    return FeatureDictionary(codes.astype(np.int64), DICTIONARY_VERSION, provenance)


def build_matrix(
    store: EventStore,
    cohort: Sequence[CohortEntry],
    dictionary: FeatureDictionary,
    charlson_map: CharlsonMap | None = None,
    lookback_days: int = 365,
    charlson_lookback_only: bool = False,
) -> DesignMatrix:
    n = len(cohort)
    dense = np.zeros((n, N_DENSE), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int8)
    row_ids = np.zeros(n, dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    chunks = []
    cmap = charlson_map or CharlsonMap.empty()
    for i, e in enumerate(cohort):
        r = store.row_of(e.person_id)
        concepts, dates, domains = store.events_of_row(r)
        a = np.searchsorted(dates, e.index_date - lookback_days, side="left")
        b = np.searchsorted(dates, e.index_date - 1, side="right")
        cols = dictionary.columns_for(concepts[a:b], domains[a:b])
        cols = np.unique(cols[cols >= 0])
        chunks.append(cols)
        indptr[i + 1] = indptr[i] + len(cols)
        dense[i, 0] = e.age_at_index / 100.0
        dense[i, 1] = 1.0 if e.sex == FEMALE else 0.0
        if cmap.categories:
            lo = e.index_date - lookback_days if charlson_lookback_only else None
            dense[i, 2] = _charlson_from_arrays(cmap, concepts, dates, domains, lo, e.index_date - 1)
        labels[i] = e.label
        row_ids[i] = e.person_id
    indices = np.concatenate(chunks).astype(np.int32) if chunks else np.empty(0, np.int32)
    return DesignMatrix(dense, indptr, indices, labels, row_ids, dictionary.n_cols, dictionary.hash)
