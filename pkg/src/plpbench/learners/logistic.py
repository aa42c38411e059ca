"""L1-penalised logistic regression.

Objective: sum_i NLL_i + lam * sum_{j penalised} |beta_j|, with the
intercept and the three demographic columns unpenalised. The penalty comes
from a Laplace prior with variance v: scale b = sqrt(v / 2), so
lam = 1 / b = sqrt(2 / v).

The solver is cyclic coordinate descent. Each coordinate takes a Newton
step on its one-dimensional quadratic model, soft-thresholded for
penalised columns, clipped to a per-coordinate trust region that
adapts as in Genkin et al.'s BBR, and halved until the objective does not
increase. Sweeps alternate between the active set
and the full column set until a full sweep moves no coefficient by more
than the tolerance.
"""

from __future__ import annotations

import math
import time

import numpy as np

from ..features import N_DENSE, DesignMatrix
from ..seeding import rng_for
from .base import ConvergenceError, TrainedModel, require_both_classes, stratified_folds
from .spaces import LogisticSearchSpec


def penalty_from_variance(v: float) -> float:
    return math.sqrt(2.0 / v)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _nll(eta, y) -> float:
    # sum of log(1 + exp(eta)) - y * eta, stable
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta))


class _Columns:
    """Column access for coordinate descent.

    The unpenalised demographic columns are held dense and centred: age/100
    is nearly collinear with the intercept, and centring removes that
    coupling without changing the optimum.
    """

    def __init__(self, X):
        X = X.tocsc()
        X.sort_indices()
        self.X = X
        self.n, self.p = X.shape
        self.indptr, self.indices, self.data = X.indptr, X.indices, X.data
        k = min(N_DENSE, self.p)
        dense = X[:, :k].toarray()
        self.means = dense.mean(axis=0)
        self.centred = [dense[:, j] - self.means[j] for j in range(k)]
        self.all_rows = np.arange(self.n)

    @classmethod
    def of(cls, matrix: DesignMatrix) -> "_Columns":
        return cls(matrix.to_csr())

    def col(self, j):
        if j < len(self.centred):
            return self.all_rows, self.centred[j]
        a, b = self.indptr[j], self.indptr[j + 1]
        return self.indices[a:b], self.data[a:b]


def coordinate_descent(
    cols: _Columns,
    y: np.ndarray,
    lam: float,
    rows: np.ndarray | None = None,
    beta0: np.ndarray | None = None,
    intercept0: float | None = None,
    tol: float = 1e-6,
    max_sweeps: int = 1000,
) -> tuple[np.ndarray, float, int]:
    """Minimise the penalised NLL on ``rows`` (all rows when ``None``).

    Returns ``(beta, intercept, sweeps)``.
    """
    if rows is not None:
        cols = _Columns(cols.X[rows])
    y = np.asarray(y, dtype=np.float64)
    if rows is not None:
        y = y[rows]
    p = cols.p
    k = len(cols.centred)
    beta = np.zeros(p) if beta0 is None else beta0.astype(np.float64).copy()
    if intercept0 is None:
        ybar = min(max(y.mean(), 1e-6), 1 - 1e-6)
        b0 = math.log(ybar / (1 - ybar))
    else:
        b0 = float(intercept0)
    # internal intercept refers to the centred demographic columns
    b0 += float(cols.means @ beta[:k])
    eta = b0 + cols.X @ beta - float(cols.means @ beta[:k])
    penalised = np.arange(p) >= N_DENSE
    trust = np.ones(p)
    trust_b0 = 1.0
    nonempty = np.diff(cols.indptr) > 0

    def update(j):
        nonlocal b0, trust_b0
        if j < 0:
            mu = _sigmoid(eta)
            g = float(np.sum(mu - y))
            h = float(np.sum(mu * (1 - mu))) + 1e-12
            d = -g / h
            d = max(-trust_b0, min(trust_b0, d))
            trust_b0 = max(2 * abs(d), trust_b0 / 2, 1e-3)
            b0 += d
            eta[:] += d
            return abs(d)
        idx, val = cols.col(j)
        mu = _sigmoid(eta[idx])
        g = float(np.dot(val, mu - y[idx]))
        h = float(np.dot(val * val, mu * (1 - mu))) + 1e-12
        bj = beta[j]
        if penalised[j]:
            z = bj * h - g
            new = math.copysign(max(abs(z) - lam, 0.0), z) / h
        else:
            new = bj - g / h
        d = new - bj
        if d == 0.0:
            return 0.0
        d = max(-trust[j], min(trust[j], d))
        # backtrack until the penalised objective does not increase
        e0 = eta[idx]
        base = np.logaddexp(0.0, e0)
        yi = y[idx]
        pen = lam if penalised[j] else 0.0
        for _ in range(30):
            e1 = e0 + d * val
            change = float(np.sum(np.logaddexp(0.0, e1) - base - yi * d * val))
            change += pen * (abs(bj + d) - abs(bj))
            if change <= 1e-12 * (1.0 + abs(change)):
                break
            d *= 0.5
        else:
            return 0.0
        trust[j] = max(2 * abs(d), trust[j] / 2, 1e-3)
        beta[j] = bj + d
        eta[idx] = e1
        return abs(d)

    all_cols = [j for j in range(p) if nonempty[j]]
    sweeps = 0
    gap = float("inf")
    while sweeps < max_sweeps:
        # full sweep
        sweeps += 1
        gap = update(-1)
        for j in all_cols:
            gap = max(gap, update(j))
        if gap < tol:
            return beta, b0 - float(cols.means @ beta[:k]), sweeps
        # iterate on the active set until it settles
        while sweeps < max_sweeps:
            active = [j for j in all_cols if beta[j] != 0.0 or not penalised[j]]
            sweeps += 1
            inner = update(-1)
            for j in active:
                inner = max(inner, update(j))
            if inner < tol:
                break
    raise ConvergenceError(f"coordinate descent did not converge in {max_sweeps} sweeps", gap)


def kkt_violation(matrix: DesignMatrix, beta: np.ndarray, intercept: float, lam: float) -> float:
    """Largest deviation from the L1 optimality conditions."""
    X = matrix.to_csr()
    y = matrix.labels.astype(np.float64)
    mu = _sigmoid(intercept + X @ beta)
    grad = X.T @ (mu - y)
    worst = abs(float(np.sum(mu - y)))
    for j in range(len(beta)):
        if j < N_DENSE:
            worst = max(worst, abs(grad[j]))
        elif beta[j] != 0:
            worst = max(worst, abs(grad[j] + lam * np.sign(beta[j])))
        else:
            worst = max(worst, max(0.0, abs(grad[j]) - lam))
    return worst


def cross_validated_loglik(cols, y, folds, lam, spec, warm):
    """Mean out-of-fold log-likelihood; ``warm`` caches per-fold solutions."""
    total = 0.0
    k = int(folds.max()) + 1
    for f in range(k):
        train = np.flatnonzero(folds != f)
        test = np.flatnonzero(folds == f)
        b, b0 = warm.get(f, (None, None))
        beta, b0, _ = coordinate_descent(cols, y, lam, rows=train, beta0=b, intercept0=b0,
                                         tol=spec.tolerance, max_sweeps=spec.max_sweeps)
        warm[f] = (beta, b0)
        eta = b0 + cols.X[test] @ beta
        total += -_nll(eta, y[test])
    return total / len(y)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def search_variance(cols, y, spec: LogisticSearchSpec, seed: int) -> tuple[float, list[dict]]:
    """Golden-section search on log(variance), maximising CV log-likelihood.

    The first evaluation is at ``starting_variance``; the remaining budget
    goes to golden-section on ``[variance_lower, variance_upper]``. The best
    evaluated variance is returned with the full evaluation trace.
    """
    folds = stratified_folds(y, spec.cv_folds, rng_for(seed, "logistic-cv"))
    trace: list[dict] = []
    cache: dict[float, float] = {}
    warm: dict = {}

    def evaluate(logv):
        v = float(math.exp(logv))
        v = min(max(v, spec.variance_lower), spec.variance_upper)
        if v in cache:
            return cache[v]
        score = cross_validated_loglik(cols, y, folds, penalty_from_variance(v), spec, warm)
        cache[v] = score
        trace.append({"variance": v, "penalty": penalty_from_variance(v), "cv_loglik": score})
        return score

    evaluate(math.log(spec.starting_variance))
    a, b = math.log(spec.variance_lower), math.log(spec.variance_upper)
    if len(trace) < spec.max_evaluations and b > a:
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        fc = evaluate(c) if len(trace) < spec.max_evaluations else -math.inf
        fd = evaluate(d) if len(trace) < spec.max_evaluations else -math.inf
        while len(trace) < spec.max_evaluations:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - _GOLDEN * (b - a)
                fc = evaluate(c)
            else:
                a, c, fc = c, d, fd
                d = a + _GOLDEN * (b - a)
                fd = evaluate(d)
    best = max(trace, key=lambda t: (t["cv_loglik"], -t["variance"]))
    return best["variance"], trace


def fit_logistic_fixed(matrix: DesignMatrix, variance: float, spec: LogisticSearchSpec | None = None,
                       provenance: dict | None = None, trace: list | None = None) -> TrainedModel:
    spec = spec or LogisticSearchSpec()
    require_both_classes(matrix.labels)
    cols = _Columns.of(matrix)
    y = matrix.labels.astype(np.float64)
    lam = penalty_from_variance(variance)
    beta, b0, sweeps = coordinate_descent(cols, y, lam, tol=spec.tolerance, max_sweeps=spec.max_sweeps)
    return TrainedModel(
        family="logistic",
        parameters={"coefficients": beta, "intercept": np.array([b0])},
        hyperparameters={"variance": float(variance), "penalty": lam},
        dictionary_hash=matrix.dictionary_hash,
        n_cols=matrix.n_cols,
        provenance=dict(provenance or {}, sweeps=sweeps),
        search_trace=list(trace or []),
    )


def fit_logistic_l1(matrix: DesignMatrix, spec: LogisticSearchSpec | None = None, seed: int = 0,
                    provenance: dict | None = None) -> TrainedModel:
    spec = spec or LogisticSearchSpec()
    require_both_classes(matrix.labels)
    t0 = time.perf_counter()
    cols = _Columns.of(matrix)
    y = matrix.labels.astype(np.float64)
    variance, trace = search_variance(cols, y, spec, seed)
    model = fit_logistic_fixed(matrix, variance, spec, provenance, trace)
    model.provenance.update(seed=seed, wall_time_s=time.perf_counter() - t0)
    return model


def predict_logistic(model: TrainedModel, matrix: DesignMatrix) -> np.ndarray:
    X = matrix.to_csr()
    eta = model.parameters["intercept"][0] + X @ model.parameters["coefficients"]
    return np.clip(_sigmoid(eta), 1e-15, 1 - 1e-15)
