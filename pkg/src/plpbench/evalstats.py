"""Discrimination, calibration and rank-based method comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .seeding import rng_for


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    pass


class InsufficientDataError(MetricError):
    pass


# ---------------------------------------------------------------------------
# AUROC


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    return scores, pos, n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties (rank-sum form)."""
    scores, pos, n_pos, n_neg = _split_classes(scores, labels)
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs(scores, labels) -> float:
    """Exhaustive pair counting; O(n_pos * n_neg), used as an oracle."""
    scores, pos, n_pos, n_neg = _split_classes(scores, labels)
    sp_, sn = scores[pos], scores[~pos]
    diff = sp_[:, None] - sn[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (n_pos * n_neg))


@dataclass(frozen=True)
class DiscriminationResult:
    auroc: float
    ci_low: float
    ci_high: float
    n_bootstrap: int
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return asdict(self)


def bootstrap_aurocs(scores, labels, n_reps: int, seed: int) -> np.ndarray:
    """Stratified bootstrap replicates of the AUROC.

    Positives and negatives are resampled separately. Replicate ``r`` draws
    from its own generator seeded by ``(seed, r)``, so the replicate values do
    not depend on how the work is scheduled. Each replicate is evaluated
    exactly through resampling counts on the sorted negatives.
    """
    scores, pos, n_pos, n_neg = _split_classes(scores, labels)
    sp_ = scores[pos]
    sn = np.sort(scores[~pos])
    below = np.searchsorted(sn, sp_, side="left")
    upto = np.searchsorted(sn, sp_, side="right")
    out = np.empty(n_reps)
    denom = float(n_pos) * float(n_neg)
    for r in range(n_reps):
        rng = rng_for(seed, "bootstrap", r)
        cp = np.bincount(rng.integers(0, n_pos, n_pos), minlength=n_pos)
        cn = np.bincount(rng.integers(0, n_neg, n_neg), minlength=n_neg)
        cum = np.zeros(n_neg + 1)
        np.cumsum(cn, out=cum[1:])
        less = cum[below]
        ties = cum[upto] - less
        out[r] = np.dot(cp, less + 0.5 * ties) / denom
    return out


def auroc_ci(scores, labels, n_reps: int = 2000, seed: int = 0, alpha: float = 0.05) -> DiscriminationResult:
    if n_reps < 100:
        raise MetricError("n_reps must be at least 100")
    point = auroc(scores, labels)
    reps = bootstrap_aurocs(scores, labels, n_reps, seed)
    lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2], method="lower")
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    return DiscriminationResult(point, float(lo), float(hi), n_reps, n_pos, len(labels) - n_pos)


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class SmootherConfig:
    span: float = 0.75
    min_loess: int = 50
    min_binned: int = 20
    n_bins: int = 10
    curve_points: int = 100


@dataclass(frozen=True)
class CalibrationResult:
    e_avg: float
    calibration_curve: list = field(default_factory=list)
    method: str = "loess"

    def to_dict(self) -> dict:
        return {"e_avg": self.e_avg, "method": self.method, "calibration_curve": [list(p) for p in self.calibration_curve]}


def loess_fit(x, y, span: float = 0.75, at=None) -> np.ndarray:
    """Locally weighted linear regression of ``y`` on ``x`` (tricube kernel).

    Each fit uses the ``int(span * n)`` nearest neighbours of the evaluation
    point; the kernel radius is the largest neighbour distance. Returns the
    smoothed values at ``at`` (default: at ``x``).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    k = max(2, min(n, int(span * n + 1e-10)))
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    at = x if at is None else np.asarray(at, dtype=np.float64)
    ux, inverse = np.unique(at, return_inverse=True)
    fitted = np.empty(len(ux))
    left = 0
    for j, x0 in enumerate(ux):
        # slide the k-wide window toward x0 while that shrinks the radius
        left = min(left, n - k)
        while left + k < n and xs[left + k] - x0 < x0 - xs[left]:
            left += 1
        while left > 0 and x0 - xs[left - 1] < xs[left + k - 1] - x0:
            left -= 1
        wx = xs[left : left + k]
        wy = ys[left : left + k]
        d = np.abs(wx - x0)
        radius = d.max()
        if radius <= 0:
            w = np.ones(k)
        else:
            w = np.clip(1.0 - (d / radius) ** 3, 0.0, None) ** 3
        sw = w.sum()
        if sw <= 0:
            w = np.ones(k)
            sw = float(k)
        mx = np.dot(w, wx) / sw
        my = np.dot(w, wy) / sw
        dx = wx - mx
        sxx = np.dot(w, dx * dx)
        if sxx <= 1e-14 * max(1.0, sw):
            fitted[j] = my
        else:
            slope = np.dot(w, dx * (wy - my)) / sxx
            fitted[j] = my + slope * (x0 - mx)
    return fitted[inverse]


def _binned_curve(pred, y, n_bins):
    order = np.argsort(pred, kind="stable")
    curve = np.empty(len(pred))
    for chunk in np.array_split(order, n_bins):
        if len(chunk):
            curve[chunk] = y[chunk].mean()
    return curve


def e_avg(predictions, labels, config: SmootherConfig | None = None) -> CalibrationResult:
    """Mean absolute gap between predictions and a smoothed observed-risk curve."""
    cfg = config or SmootherConfig()
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise MetricError("predictions and labels differ in length")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise MetricError("predictions must lie in [0, 1]")
    n = len(p)
    if n < cfg.min_binned:
        raise InsufficientDataError(f"need at least {cfg.min_binned} predictions, got {n}")
    if n >= cfg.min_loess:
        curve = loess_fit(p, y, cfg.span)
        method = "loess"
    else:
        curve = _binned_curve(p, y, cfg.n_bins)
        method = "binned"
    curve = np.clip(curve, 0.0, 1.0)
    e = float(np.mean(np.abs(curve - p)))
    order = np.argsort(p, kind="stable")
    picks = np.unique(np.linspace(0, n - 1, min(cfg.curve_points, n)).round().astype(int))
    points = [(float(p[order[i]]), float(curve[order[i]])) for i in picks]
    return CalibrationResult(e, points, method)


# ---------------------------------------------------------------------------
# chi-square tail via the regularized incomplete gamma function


def gammainc_lower_series(a: float, x: float, tol: float = 1e-16, max_iter: int = 10_000) -> float:
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    if x <= 0:
        return 0.0
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(max_iter):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * tol:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammainc_upper_cf(a: float, x: float, tol: float = 1e-16, max_iter: int = 10_000) -> float:
    """Regularized upper incomplete gamma Q(a, x) by modified Lentz continued fraction."""
    if x <= 0:
        return 1.0
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0 else 1.0 / tiny
    h = d
    for i in range(1, max_iter + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammaincc(a: float, x: float) -> float:
    if x < a + 1.0:
        return 1.0 - gammainc_lower_series(a, x)
    return gammainc_upper_cf(a, x)


def chi2_sf(x: float, df: int) -> float:
    if x <= 0:
        return 1.0
    return min(1.0, max(0.0, gammaincc(df / 2.0, x / 2.0)))


# ---------------------------------------------------------------------------
# performance matrices and rank tests


@dataclass
class PerformanceMatrix:
    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray  # NaN marks a missing cell
    higher_is_better: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.row_labels), len(self.col_labels))
        if len(self.col_labels) < 2:
            raise MetricError("a performance matrix needs at least two methods")

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def complete(self) -> tuple["PerformanceMatrix", int]:
        keep = ~self.missing.any(axis=1)
        sub = PerformanceMatrix(
            [r for r, k in zip(self.row_labels, keep) if k], list(self.col_labels), self.values[keep], self.higher_is_better
        )
        return sub, int((~keep).sum())

    def ranks(self) -> np.ndarray:
        """Per-row ranks, 1 = best, average ranks on ties."""
        v = -self.values if self.higher_is_better else self.values
        return rankdata(v, method="average", axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["context"] + list(self.col_labels))
        for label, row in zip(self.row_labels, self.values):
            w.writerow([label] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path, higher_is_better: bool = True) -> "PerformanceMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header = rows[0][1:]
        labels = [r[0] for r in rows[1:]]
        vals = [[float(c) if c.strip() else np.nan for c in r[1:]] for r in rows[1:]]
        return cls(labels, header, np.array(vals, dtype=np.float64).reshape(len(labels), len(header)), higher_is_better)


@dataclass(frozen=True)
class FriedmanResult:
    q: float
    df: int
    p_value: float
    mean_ranks: dict
    n: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def friedman(matrix: PerformanceMatrix) -> FriedmanResult:
    """Tie-corrected Friedman statistic on complete rows.

    Q = (k-1) * sum_j (R_j - N(k+1)/2)^2 / (sum_ij r_ij^2 - N k (k+1)^2 / 4),
    with R_j the rank sum of method j; reduces to 12/(Nk(k+1)) sum R_j^2 -
    3N(k+1) without ties.
    """
    sub, excluded = matrix.complete()
    n, k = sub.values.shape
    if n < 2:
        raise MetricError(f"Friedman test needs at least 2 complete rows, got {n}")
    r = sub.ranks()
    rank_sums = r.sum(axis=0)
    num = (k - 1) * np.sum((rank_sums - n * (k + 1) / 2.0) ** 2)
    den = np.sum(r * r) - n * k * (k + 1) ** 2 / 4.0
    q = 0.0 if den <= 1e-12 else float(num / den)
    return FriedmanResult(
        q=q,
        df=k - 1,
        p_value=chi2_sf(q, k - 1),
        mean_ranks={m: float(v) for m, v in zip(sub.col_labels, rank_sums / n)},
        n=n,
        n_excluded=excluded,
    )


# q_{0.05,k}: studentized range quantile at infinite df divided by sqrt(2)
NEMENYI_Q_005 = {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164}


@dataclass(frozen=True)
class NemenyiResult:
    critical_difference: float
    methods: tuple
    mean_ranks: tuple
    significant: tuple  # k x k booleans
    alpha: float = 0.05
    n: int = 0
    friedman_gate_passed: bool | None = None

    def to_dict(self) -> dict:
        return {
            "critical_difference": self.critical_difference,
            "alpha": self.alpha,
            "n": self.n,
            "friedman_gate_passed": self.friedman_gate_passed,
            "mean_ranks": dict(zip(self.methods, self.mean_ranks)),
            "significant": [[bool(x) for x in row] for row in self.significant],
            "methods": list(self.methods),
        }


def critical_difference(k: int, n: int, alpha: float = 0.05) -> float:
    if alpha != 0.05:
        raise MetricError("only alpha = 0.05 is tabulated")
    if k not in NEMENYI_Q_005:
        raise MetricError(f"unsupported number of methods k={k} (table covers 2..10)")
    return NEMENYI_Q_005[k] * math.sqrt(k * (k + 1) / (6.0 * n))


def nemenyi_from_ranks(methods: Sequence[str], mean_ranks: Sequence[float], n: int, alpha: float = 0.05,
                       friedman_p: float | None = None) -> NemenyiResult:
    k = len(methods)
    cd = critical_difference(k, n, alpha)
    mr = np.asarray(mean_ranks, dtype=np.float64)
    sig = np.abs(mr[:, None] - mr[None, :]) >= cd - 1e-12
    np.fill_diagonal(sig, False)
    gate = None if friedman_p is None else bool(friedman_p < alpha)
    return NemenyiResult(cd, tuple(methods), tuple(float(x) for x in mr), tuple(tuple(bool(x) for x in row) for row in sig),
                         alpha, n, gate)


def nemenyi(matrix: PerformanceMatrix, alpha: float = 0.05) -> NemenyiResult:
    """All-pairs post-hoc test; computed unconditionally, the Friedman gate is flagged."""
    fr = friedman(matrix)
    methods = list(matrix.col_labels)
    return nemenyi_from_ranks(methods, [fr.mean_ranks[m] for m in methods], fr.n, alpha, fr.p_value)


def cd_groups(mean_ranks: Sequence[float], cd: float) -> list[tuple[int, ...]]:
    """Maximal runs of methods (in rank order) whose rank range is below ``cd``.

    Returned as tuples of original method indices; singletons are omitted.
    """
    mr = np.asarray(mean_ranks, dtype=np.float64)
    order = np.argsort(mr, kind="stable")
    sr = mr[order]
    k = len(sr)
    groups = []
    last_end = -1
    for i in range(k):
        j = i
        while j + 1 < k and sr[j + 1] - sr[i] < cd - 1e-12:
            j += 1
        if j > i and j > last_end:
            groups.append(tuple(int(x) for x in order[i : j + 1]))
            last_end = j
    return groups


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def cd_diagram_svg(nem: NemenyiResult, fr: FriedmanResult | None = None, title: str | None = None) -> str:
    k = len(nem.methods)
    width, margin = 640.0, 110.0
    axis_y = 70.0
    lo, hi = 1.0, float(max(k, 2))

    def xpos(rank: float) -> float:
        return margin + (rank - lo) / (hi - lo) * (width - 2 * margin)

    order = sorted(range(k), key=lambda i: (nem.mean_ranks[i], nem.methods[i]))
    groups = cd_groups(nem.mean_ranks, nem.critical_difference)
    half = (k + 1) // 2
    label_rows = max(half, k - half)
    bar_base = axis_y + 18.0
    label_base = bar_base + 12.0 * len(groups) + 14.0
    height = label_base + 20.0 * label_rows + 20.0

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_fmt(width / 2)}" y="16" text-anchor="middle" class="title">{_escape(title)}</text>')
    if fr is not None:
        out.append(
            f'<text x="{_fmt(width - 8)}" y="16" text-anchor="end" class="friedman">'
            f"Friedman Q({fr.df}) = {fr.q:.3f}, p = {fr.p_value:.4g}, N = {fr.n}</text>"
        )
    # CD scale bar
    cd_x0 = xpos(lo)
    cd_x1 = xpos(min(lo + nem.critical_difference, hi + 10))
    out.append(f'<line class="cd" x1="{_fmt(cd_x0)}" y1="34" x2="{_fmt(cd_x1)}" y2="34" stroke="black" stroke-width="2"/>')
    out.append(f'<text x="{_fmt((cd_x0 + cd_x1) / 2)}" y="30" text-anchor="middle">CD = {nem.critical_difference:.3f}</text>')
    # rank axis
    out.append(f'<line class="axis" x1="{_fmt(xpos(lo))}" y1="{_fmt(axis_y)}" x2="{_fmt(xpos(hi))}" y2="{_fmt(axis_y)}" stroke="black"/>')
    for r in range(1, int(hi) + 1):
        x = xpos(float(r))
        out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(axis_y - 5)}" x2="{_fmt(x)}" y2="{_fmt(axis_y)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(axis_y - 9)}" text-anchor="middle">{r}</text>')
    # group bars
    for g, members in enumerate(groups):
        ranks = [nem.mean_ranks[i] for i in members]
        y = bar_base + 12.0 * g
        out.append(
            f'<line class="group" x1="{_fmt(xpos(min(ranks)) - 3)}" y1="{_fmt(y)}" x2="{_fmt(xpos(max(ranks)) + 3)}" '
            f'y2="{_fmt(y)}" stroke="black" stroke-width="4"/>'
        )
    # method ticks and labels
    for pos, i in enumerate(order):
        x = xpos(nem.mean_ranks[i])
        if pos < half:
            row = pos
            lx, anchor = margin - 10, "end"
        else:
            row = k - 1 - pos
            lx, anchor = width - margin + 10, "start"
        ly = label_base + 20.0 * row
        out.append(
            f'<polyline class="method" points="{_fmt(x)},{_fmt(axis_y)} {_fmt(x)},{_fmt(ly)} {_fmt(lx)},{_fmt(ly)}" '
            f'fill="none" stroke="black"/>'
        )
        out.append(
            f'<text x="{_fmt(lx + (-4 if anchor == "end" else 4))}" y="{_fmt(ly + 4)}" text-anchor="{anchor}">'
            f"{_escape(nem.methods[i])} ({nem.mean_ranks[i]:.2f})</text>"
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_cd_diagram(nem: NemenyiResult, fr: FriedmanResult | None, path, title: str | None = None) -> str:
    svg = cd_diagram_svg(nem, fr, title)
    Path(path).write_text(svg, encoding="utf-8")
    return svg


def results_json(fr: FriedmanResult, nem: NemenyiResult | None) -> str:
    doc = {"friedman": fr.to_dict(), "nemenyi": None if nem is None else nem.to_dict()}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
