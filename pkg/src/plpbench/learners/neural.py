"""Training loop, early stopping and random search for the neural learners."""

from __future__ import annotations

import copy
import math
import time

import numpy as np

from ..evalstats import auroc
from ..features import N_DENSE, DesignMatrix
from ..seeding import derive_seed, rng_for
from . import nn, resnet, transformer
from .base import TrainedModel, TrainingError, require_both_classes, stratified_holdout
from .batches import Prepared, standardisation, token_priority
from .spaces import ConfigError, DiscreteSpace, ResNetSpace, TrainConfig, TransformerSpace, sample_hyperparameters

_MODULES = {"resnet": resnet, "transformer": transformer}


def _init(family: str, hp: dict, space, n_sparse: int, rng, dtype=np.float32):
    if family == "resnet":
        return resnet.init_params(hp, n_sparse, N_DENSE, rng, dtype)
    return transformer.init_params(hp, n_sparse, N_DENSE, space.ffn_hidden(hp["embedding_dim"]), rng, dtype)


def _prepare(family: str, matrix: DesignMatrix, mean, std, rank, space) -> Prepared:
    if family == "transformer":
        return Prepared(matrix, mean, std, token_rank=rank, max_tokens=space.max_tokens)
    return Prepared(matrix, mean, std)


def _logits(family: str, params: dict, state: dict, hp: dict, data: Prepared, batch_size: int) -> np.ndarray:
    mod = _MODULES[family]
    out = np.empty(data.n, dtype=np.float64)
    for start in range(0, data.n, batch_size):
        rows = np.arange(start, min(start + batch_size, data.n))
        out[rows] = mod.forward(params, state, hp, data.batch(rows), train=False)[0]
    return out


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))
    return cfg.learning_rate


def train_one(family: str, hp: dict, space, fit: Prepared, val: Prepared, cfg: TrainConfig, seed: int) -> dict:
    """Train one configuration with early stopping on validation AUROC.

    Batches come from ``np.array_split`` of a shuffled permutation, so batch
    sizes differ by at most one and never drop to a single row (which would
    leave batch normalisation without a variance). The returned parameters
    are those of the best validation epoch.
    """
    mod = _MODULES[family]
    params, state = _init(family, hp, space, fit.n_sparse, rng_for(seed, "init"))
    opt = nn.Adam(params, cfg.learning_rate)
    shuffle = rng_for(seed, "shuffle")
    dropout = rng_for(seed, "dropout")
    n_batches = max(1, math.ceil(fit.n / cfg.batch_size))
    if fit.n < 2 * n_batches:
        n_batches = max(1, fit.n // 2)
    best = {"auroc": -np.inf, "epoch": -1, "params": None, "state": None}
    history = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        for rows in np.array_split(shuffle.permutation(fit.n), n_batches):
            batch = fit.batch(np.sort(rows))
            logits, cache = mod.forward(params, state, hp, batch, train=True, rng=dropout)
            loss, dlogit = nn.bce_with_logits(logits, batch.y)
            if not np.isfinite(loss):
                raise TrainingError(f"{family} {hp}: non-finite loss at epoch {epoch}")
            grads = mod.backward(params, hp, cache, dlogit)
            opt.step(params, grads, lr)
            for key, stats in cache["stats"].items():
                nn.update_running(state, key, stats, len(rows))
            losses.append(loss * len(rows))
        val_logits = _logits(family, params, state, hp, val, cfg.eval_batch_size)
        if not np.all(np.isfinite(val_logits)):
            raise TrainingError(f"{family} {hp}: non-finite validation output at epoch {epoch}")
        val_auc = auroc(val_logits, val.y)
        history.append({"epoch": epoch, "train_loss": float(np.sum(losses) / fit.n), "val_auroc": val_auc})
        if val_auc > best["auroc"]:
            best = {"auroc": val_auc, "epoch": epoch, "params": copy.deepcopy(params), "state": copy.deepcopy(state)}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best["history"] = history
    return best


def _train_sample(args) -> dict:
    return train_one(*args)


def _fit_neural(family: str, matrix: DesignMatrix, space: DiscreteSpace, cfg: TrainConfig,
                provenance: dict | None, hyperparameters: list[dict] | None = None, jobs: int = 1) -> TrainedModel:
    """Random search: train every sampled configuration, keep the best by validation AUROC.

    With ``jobs > 1`` the samples train in worker processes; each sample has
    its own derived seed, so the result does not depend on ``jobs``.
    """
    require_both_classes(matrix.labels)
    t0 = time.perf_counter()
    if hyperparameters is None:
        hyperparameters = sample_hyperparameters(space, cfg.n_hyperparameter_samples, cfg.seed)
    for hp in hyperparameters:
        if not (space.contains(hp) and space.is_valid(hp)):
            raise ConfigError(f"{family} configuration outside its space: {hp}")
    fit_rows, val_rows = stratified_holdout(matrix.labels, cfg.validation_fraction, rng_for(cfg.seed, "early-stopping"))
    fit_m, val_m = matrix.subset(fit_rows), matrix.subset(val_rows)
    require_both_classes(fit_m.labels)
    require_both_classes(val_m.labels)
    mean, std = standardisation(fit_m)
    rank = token_priority(fit_m) if family == "transformer" else None
    fit, val = _prepare(family, fit_m, mean, std, rank, space), _prepare(family, val_m, mean, std, rank, space)
    work = [(family, hp, space, fit, val, cfg, derive_seed(cfg.seed, "sample", i)) for i, hp in enumerate(hyperparameters)]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            results = list(pool.map(_train_sample, work))
    else:
        results = map(_train_sample, work)
    best, best_hp, trace = None, None, []
    for hp, result in zip(hyperparameters, results):
        entry = dict(hp, val_auroc=result["auroc"], best_epoch=result["epoch"], epochs_run=len(result["history"]))
        if family == "transformer":
            entry["ffn_hidden"] = space.ffn_hidden(hp["embedding_dim"])
        trace.append(entry)
        if best is None or result["auroc"] > best["auroc"]:
            best, best_hp = result, hp
    state = dict(best["state"])
    state["dense_mean"] = mean.astype(np.float64)
    state["dense_std"] = std.astype(np.float64)
    if rank is not None:
        state["token_rank"] = rank.astype(np.int64)
    hyper = dict(best_hp)
    if family == "transformer":
        hyper.update(ffn_hidden=space.ffn_hidden(best_hp["embedding_dim"]), max_tokens=space.max_tokens)
    return TrainedModel(
        family=family,
        parameters=best["params"],
        hyperparameters=hyper,
        dictionary_hash=matrix.dictionary_hash,
        n_cols=matrix.n_cols,
        provenance=dict(provenance or {}, seed=cfg.seed, train_config=cfg.to_dict(),
                        history=best["history"], wall_time_s=time.perf_counter() - t0),
        state=state,
        search_trace=trace,
    )


def fit_resnet(matrix: DesignMatrix, space: ResNetSpace | None = None, train_config: TrainConfig | None = None,
               provenance: dict | None = None, hyperparameters: list[dict] | None = None,
               jobs: int = 1) -> TrainedModel:
    return _fit_neural("resnet", matrix, space or ResNetSpace(), train_config or TrainConfig(), provenance,
                       hyperparameters, jobs)


def fit_transformer(matrix: DesignMatrix, space: TransformerSpace | None = None,
                    train_config: TrainConfig | None = None, provenance: dict | None = None,
                    hyperparameters: list[dict] | None = None, jobs: int = 1) -> TrainedModel:
    return _fit_neural("transformer", matrix, space or TransformerSpace(), train_config or TrainConfig(), provenance,
                       hyperparameters, jobs)


def predict_neural(model: TrainedModel, matrix: DesignMatrix, batch_size: int = 2048) -> np.ndarray:
    st = model.state
    rank = st.get("token_rank")
    data = Prepared(matrix, st["dense_mean"], st["dense_std"], token_rank=rank,
                    max_tokens=model.hyperparameters.get("max_tokens"))
    logits = _logits(model.family, model.parameters, st, model.hyperparameters, data, batch_size)
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * logits)), 1e-15, 1 - 1e-15)
