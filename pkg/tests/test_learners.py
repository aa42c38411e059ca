from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
import scipy.sparse as sp
import statsmodels.api as sm
from conftest import make_matrix, random_matrix
from hypothesis import given, settings
from hypothesis import strategies as st

from plpbench import learners as L
from plpbench.evalstats import auroc
from plpbench.features import N_DENSE, TransportError
from plpbench.learners import nn, resnet, transformer
from plpbench.learners.batches import Batch, capped_tokens, standardisation
from plpbench.learners.gbt import fit_gbt_fixed, predict_gbt, staged_margins
from plpbench.learners.logistic import fit_logistic_fixed, kkt_violation, penalty_from_variance
from plpbench.learners.neural import _logits, _prepare, predict_neural, train_one

SMALL = L.TrainConfig(n_hyperparameter_samples=2, max_epochs=4, patience=2, batch_size=64)
RESNET_HP = dict(embedding_size=64, n_layers=1, layer_width=64, hidden_factor=1, dropout_first=0.1, dropout_last=0.0)
TRANSFORMER_HP = dict(n_blocks=2, embedding_dim=64, n_heads=2, attention_dropout=0.1, ffn_dropout=0.0,
                      residual_dropout=0.0)


# ---------------------------------------------------------------- logistic


def test_penalty_mapping():
    assert penalty_from_variance(2.0) == pytest.approx(1.0)
    assert penalty_from_variance(0.5) == pytest.approx(2.0)


def test_logistic_separable_column_gets_positive_weight():
    rng = np.random.default_rng(0)
    n = 200
    y = np.r_[np.ones(40), np.zeros(160)].astype(int)
    rows = [[0] if yi else [] for yi in y]
    rows = [r + ([1] if rng.random() < 0.3 else []) for r in rows]
    dense = np.column_stack([np.full(n, 0.5), np.zeros(n), np.zeros(n)])
    m = make_matrix(dense, rows, y, n_sparse=2)
    model = fit_logistic_fixed(m, 1.0)
    assert model.parameters["coefficients"][N_DENSE] > 0
    assert auroc(L.predict(model, m), y) == 1.0


def test_logistic_noise_above_lambda_max_is_all_zero():
    rng = np.random.default_rng(1)
    m = random_matrix(rng, n=300, n_sparse=20, density=0.15)
    y = m.labels.astype(float)
    # Oracle: unpenalised fit on intercept + dense columns, then the largest
    # score |X_j'(y - mu)| over the penalised columns.
    D = np.column_stack([np.ones(m.n_rows), m.dense])
    mu = sm.Logit(y, D).fit(disp=0).predict(D)
    lam_max = np.max(np.abs(m.sparse_block().T @ (y - mu)))
    model = fit_logistic_fixed(m, 2.0 / (1.01 * lam_max) ** 2)
    assert np.all(model.parameters["coefficients"][N_DENSE:] == 0)
    below = fit_logistic_fixed(m, 2.0 / (0.9 * lam_max) ** 2)
    assert np.any(below.parameters["coefficients"][N_DENSE:] != 0)


def test_logistic_matches_statsmodels_l1():
    rng = np.random.default_rng(4)
    m = random_matrix(rng, n=400, n_sparse=12, density=0.2, signal=rng.normal(0, 1.5, 12))
    lam = penalty_from_variance(0.5)
    model = fit_logistic_fixed(m, 0.5, L.LogisticSearchSpec(tolerance=1e-10))
    X = np.column_stack([np.ones(m.n_rows), m.to_dense()])
    alpha = np.r_[np.zeros(1 + N_DENSE), np.full(12, lam)]
    ref = sm.Logit(m.labels.astype(float), X).fit_regularized(method="l1", alpha=alpha, disp=0, acc=1e-12,
                                                              maxiter=2000)
    ours = np.r_[model.parameters["intercept"], model.parameters["coefficients"]]
    np.testing.assert_allclose(ours, ref.params, atol=1e-4)
    assert kkt_violation(m, model.parameters["coefficients"], model.parameters["intercept"][0], lam) < 1e-5


def test_logistic_search_stays_in_variance_bounds():
    rng = np.random.default_rng(2)
    m = random_matrix(rng, n=300, n_sparse=30, signal=rng.normal(0, 1, 30))
    spec = L.LogisticSearchSpec(max_evaluations=6)
    model = L.fit_logistic_l1(m, spec, seed=3)
    assert len(model.search_trace) == 6
    assert model.search_trace[0]["variance"] == pytest.approx(0.01)
    for t in model.search_trace:
        assert 0.01 <= t["variance"] <= 20.0
        assert t["penalty"] == pytest.approx(np.sqrt(2.0 / t["variance"]))
    best = max(model.search_trace, key=lambda t: t["cv_loglik"])
    assert model.hyperparameters["variance"] == best["variance"]
    again = L.fit_logistic_l1(m, spec, seed=3)
    np.testing.assert_array_equal(again.parameters["coefficients"], model.parameters["coefficients"])


def test_logistic_zero_model_predicts_half():
    m = random_matrix(np.random.default_rng(0), n=20, n_sparse=5)
    model = L.TrainedModel("logistic", {"coefficients": np.zeros(m.n_cols), "intercept": np.zeros(1)},
                           {"variance": 1.0}, "h", m.n_cols)
    np.testing.assert_array_equal(L.predict(model, m), 0.5)


def test_predict_rejects_foreign_dictionary():
    m = random_matrix(np.random.default_rng(0), n=60, n_sparse=5)
    model = fit_logistic_fixed(m, 1.0)
    other = random_matrix(np.random.default_rng(0), n=60, n_sparse=5, dictionary_hash="other")
    with pytest.raises(TransportError):
        L.predict(model, other)


def test_single_class_labels_rejected():
    m = random_matrix(np.random.default_rng(0), n=30, n_sparse=4)
    m = m.with_labels(np.zeros(30, dtype=np.int8))
    with pytest.raises(L.DegenerateLabelsError):
        fit_logistic_fixed(m, 1.0)


# ---------------------------------------------------------------- gradient boosting


def _xor_matrix(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(n) < 0.5, rng.random(n) < 0.5
    rows = [[0] * int(ai) + [1] * int(bi) + ([2] if rng.random() < 0.5 else []) for ai, bi in zip(a, b)]
    dense = np.column_stack([rng.integers(40, 90, n) / 100, rng.random(n) < 0.5, np.zeros(n)])
    return make_matrix(dense, rows, (a ^ b).astype(int), n_sparse=3)


def test_gbt_learns_xor():
    m = _xor_matrix(400, 0)
    fit, hold = m.subset(np.arange(300)), m.subset(np.arange(300, 400))
    model = fit_gbt_fixed(fit, n_trees=100, max_depth=4, learning_rate=0.1)
    assert auroc(L.predict(model, hold), hold.labels) >= 0.95


def test_gbt_search_selects_grid_point():
    m = _xor_matrix(400, 1)
    grid = L.GbtGrid(n_trees=(5, 15), max_depth=(2, 4), learning_rate=(0.1, 0.3))
    model = L.fit_gbt(m, grid, seed=0)
    assert grid.contains(model.hyperparameters)
    assert len(model.search_trace) == 8
    assert all(grid.contains(t) for t in model.search_trace)
    best = max(model.search_trace, key=lambda t: t["holdout_auroc"])  # first maximum wins ties
    assert {k: best[k] for k in ("n_trees", "max_depth", "learning_rate")} == model.hyperparameters
    assert model.hyperparameters["max_depth"] == 4


def test_gbt_default_grid_is_eighteen_points():
    pts = L.GbtGrid().points()
    assert len(pts) == 18
    assert {p["n_trees"] for p in pts} == {100, 300}


def test_gbt_root_splits_on_monotone_feature():
    rng = np.random.default_rng(5)
    n = 300
    age = rng.integers(20, 90, n) / 100
    y = (age > 0.6).astype(int)
    rows = [[0] if rng.random() < 0.5 else [] for _ in range(n)]
    m = make_matrix(np.column_stack([age, rng.random(n) < 0.5, np.zeros(n)]), rows, y, n_sparse=1)
    model = fit_gbt_fixed(m, n_trees=1, max_depth=2, learning_rate=0.3)
    assert model.parameters["feature"][0] == 0
    assert 0.59 <= model.parameters["threshold"][0] <= 0.61


def test_gbt_zero_trees_gives_base_rate():
    m = _xor_matrix(200, 2)
    model = fit_gbt_fixed(m, n_trees=3, max_depth=2, learning_rate=0.1)
    np.testing.assert_allclose(predict_gbt(model, m, n_trees=0), m.labels.mean(), rtol=1e-9)


def test_gbt_staged_prediction_equals_shorter_run():
    m = _xor_matrix(300, 3)
    long = fit_gbt_fixed(m, n_trees=12, max_depth=3, learning_rate=0.2)
    short = fit_gbt_fixed(m, n_trees=5, max_depth=3, learning_rate=0.2)
    np.testing.assert_allclose(predict_gbt(long, m, n_trees=5), L.predict(short, m), rtol=0, atol=1e-12)
    stages = staged_margins(long.parameters, m, [0, 5, 12])
    assert set(stages) == {0, 5, 12}
    np.testing.assert_allclose(1 / (1 + np.exp(-stages[12])), L.predict(long, m), atol=1e-12)


# ---------------------------------------------------------------- neural: gradients and layers


def _micro_batch(seed=0, n=6, n_sparse=2, n_dense=3):
    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(n, n_dense))
    S = (rng.random((n, n_sparse)) < 0.6).astype(float)
    S[0] = 1
    Sc = sp.csr_matrix(S)
    y = (rng.random(n) < 0.5).astype(float)
    y[0], y[1] = 1, 0
    return Batch(dense, Sc, y, capped_tokens(Sc.indptr, Sc.indices, np.arange(n_sparse), 8))


def _gradient_error(mod, params, state, hp, batch):
    def loss():
        logits, cache = mod.forward(params, state, hp, batch, True, np.random.default_rng(3))
        return nn.bce_with_logits(logits, batch.y)[0], logits, cache

    _, logits, cache = loss()
    grads = mod.backward(params, hp, cache, nn.bce_with_logits(logits, batch.y)[1])
    assert set(grads) == set(params)
    worst = 0.0
    for k, v in params.items():
        num = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            old = v[i]
            v[i] = old + 1e-4
            a = loss()[0]
            v[i] = old - 1e-4
            b = loss()[0]
            v[i] = old
            num[i] = (a - b) / 2e-4
        rel = np.abs(num - grads[k]) / np.maximum(np.abs(num) + np.abs(grads[k]), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


def resnet_gradient_error() -> float:
    hp = dict(embedding_size=4, n_layers=2, layer_width=3, hidden_factor=2, dropout_first=0.2, dropout_last=0.1)
    params, state = resnet.init_params(hp, 2, 3, np.random.default_rng(1), np.float64)
    return _gradient_error(resnet, params, state, hp, _micro_batch())


def transformer_gradient_error() -> float:
    hp = dict(n_blocks=2, embedding_dim=4, n_heads=2, attention_dropout=0.2, ffn_dropout=0.1, residual_dropout=0.1)
    params, state = transformer.init_params(hp, 2, 3, 3, np.random.default_rng(1), np.float64)
    return _gradient_error(transformer, params, state, hp, _micro_batch())


def test_resnet_gradients_match_finite_differences():
    assert resnet_gradient_error() < 1e-4


def test_transformer_gradients_match_finite_differences():
    assert transformer_gradient_error() < 1e-4


def test_attention_rows_sum_to_one_and_ignore_padding():
    hp = dict(n_blocks=2, embedding_dim=8, n_heads=2, attention_dropout=0.0, ffn_dropout=0.0, residual_dropout=0.0)
    params, _ = transformer.init_params(hp, 5, 3, 6, np.random.default_rng(0), np.float64)
    batch = _micro_batch(1, n=7, n_sparse=5)
    att, key_mask = transformer.attention_weights(params, hp, batch)
    assert att.shape[:2] == (7, 2)
    q_valid = key_mask[:, None, :]
    np.testing.assert_allclose(att.sum(axis=-1)[np.broadcast_to(q_valid, att.shape[:3])], 1.0, atol=1e-12)
    padded_keys = np.broadcast_to(~key_mask[:, None, None, :], att.shape)
    assert padded_keys.any()
    assert np.all(att[padded_keys] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transformer_is_invariant_to_token_order(seed):
    hp = dict(n_blocks=2, embedding_dim=8, n_heads=2, attention_dropout=0.0, ffn_dropout=0.0, residual_dropout=0.0)
    params, state = transformer.init_params(hp, 6, 3, 6, np.random.default_rng(0), np.float64)
    batch = _micro_batch(seed % 1000, n=5, n_sparse=6)
    rng = np.random.default_rng(seed)
    tok = batch.tokens.copy()
    for r in range(len(tok)):
        k = int((tok[r] >= 0).sum())
        tok[r, :k] = tok[r, rng.permutation(k)]
    shuffled = Batch(batch.dense, batch.S, batch.y, tok)
    a = transformer.forward(params, state, hp, batch, False)[0]
    b = transformer.forward(params, state, hp, shuffled, False)[0]
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_capped_tokens_keeps_most_prevalent():
    S = sp.csr_matrix(np.array([[1, 1, 1, 1], [0, 1, 0, 0]], dtype=float))
    tok = capped_tokens(S.indptr, S.indices, np.array([3, 0, 2, 1]), 2)
    np.testing.assert_array_equal(tok, [[1, 3], [1, -1]])


# ---------------------------------------------------------------- neural: training


@pytest.fixture(scope="module")
def signal_matrix():
    rng = np.random.default_rng(11)
    return random_matrix(rng, n=600, n_sparse=25, density=0.15, signal=rng.normal(0, 1.5, 25))


@pytest.mark.parametrize("family,hp", [("resnet", RESNET_HP), ("transformer", TRANSFORMER_HP)])
def test_neural_fit_is_deterministic_and_batch_independent(signal_matrix, family, hp):
    fitter = L.fit_resnet if family == "resnet" else L.fit_transformer
    a = fitter(signal_matrix, train_config=SMALL, hyperparameters=[hp])
    b = fitter(signal_matrix, train_config=SMALL, hyperparameters=[hp])
    for k in a.parameters:
        np.testing.assert_array_equal(a.parameters[k], b.parameters[k])
    p1 = predict_neural(a, signal_matrix, batch_size=1)
    p256 = predict_neural(a, signal_matrix, batch_size=256)
    np.testing.assert_allclose(p1, p256, rtol=0, atol=1e-6)
    assert np.all((p1 > 0) & (p1 < 1))


@pytest.mark.parametrize("family", ["resnet", "transformer"])
def test_neural_learns_signal(signal_matrix, family):
    hp = RESNET_HP if family == "resnet" else TRANSFORMER_HP
    fitter = L.fit_resnet if family == "resnet" else L.fit_transformer
    cfg = SMALL.with_overrides(max_epochs=15, patience=5, learning_rate=3e-3)
    model = fitter(signal_matrix, train_config=cfg, hyperparameters=[hp])
    assert auroc(L.predict(model, signal_matrix), signal_matrix.labels) > 0.7


def test_early_stopping_returns_best_epoch(signal_matrix):
    space = L.ResNetSpace()
    mean, std = standardisation(signal_matrix)
    fit = _prepare("resnet", signal_matrix.subset(np.arange(450)), mean, std, None, space)
    val = _prepare("resnet", signal_matrix.subset(np.arange(450, 600)), mean, std, None, space)
    cfg = SMALL.with_overrides(max_epochs=12, patience=2, learning_rate=1e-2)
    out = train_one("resnet", RESNET_HP, space, fit, val, cfg, seed=4)
    aucs = [h["val_auroc"] for h in out["history"]]
    assert out["auroc"] == max(aucs)
    assert out["epoch"] == int(np.argmax(aucs))
    # stopping rule: the run ends max_epochs or exactly `patience` epochs after the best one
    assert len(aucs) == cfg.max_epochs or len(aucs) == out["epoch"] + 1 + cfg.patience
    replay = _logits("resnet", out["params"], out["state"], RESNET_HP, val, 2048)
    assert auroc(replay, val.y) == pytest.approx(out["auroc"], abs=1e-12)


def test_training_error_on_non_finite_loss(signal_matrix, monkeypatch):
    monkeypatch.setattr(nn, "bce_with_logits", lambda logits, y: (float("nan"), np.zeros_like(logits)))
    with pytest.raises(L.TrainingError):
        L.fit_resnet(signal_matrix, train_config=SMALL, hyperparameters=[RESNET_HP])


def test_out_of_space_configuration_rejected(signal_matrix):
    with pytest.raises(L.ConfigError):
        L.fit_resnet(signal_matrix, train_config=SMALL, hyperparameters=[dict(RESNET_HP, layer_width=100)])
    with pytest.raises(L.ConfigError):
        L.fit_transformer(signal_matrix, train_config=SMALL,
                          hyperparameters=[dict(TRANSFORMER_HP, embedding_dim=64, n_heads=8, n_blocks=5)])


def test_train_config_validation():
    with pytest.raises(L.ConfigError):
        L.TrainConfig(lr_schedule="step")
    with pytest.raises(L.ConfigError):
        L.TrainConfig().with_overrides(momentum=0.9)
    assert L.TrainConfig().with_overrides(max_epochs=3).max_epochs == 3


# ---------------------------------------------------------------- hyperparameter sampling


def test_sampling_single_point_space():
    space = L.ResNetSpace(embedding_size=(64,), n_layers=(2,), layer_width=(64,), hidden_factor=(1,),
                          dropout_first=(0.0,), dropout_last=(0.1,))
    draws = L.sample_hyperparameters(space, 5, seed=0)
    assert all(d == draws[0] for d in draws)
    assert draws[0]["n_layers"] == 2


def test_sampling_is_deterministic_and_uniform():
    space = L.ResNetSpace()
    assert L.sample_hyperparameters(space, 20, 7) == L.sample_hyperparameters(space, 20, 7)
    assert L.sample_hyperparameters(space, 20, 7) != L.sample_hyperparameters(space, 20, 8)
    n = 10_000
    draws = L.sample_hyperparameters(space, n, 1)
    for name, values in space.dimensions().items():
        counts = Counter(d[name] for d in draws)
        p = 1 / len(values)
        sd = np.sqrt(n * p * (1 - p))
        for v in values:
            assert abs(counts[v] - n * p) < 5 * sd, (name, v)


def test_transformer_samples_are_valid():
    space = L.TransformerSpace()
    for d in L.sample_hyperparameters(space, 2000, 3):
        assert space.contains(d)
        assert d["embedding_dim"] % d["n_heads"] == 0
    assert space.ffn_hidden(64) == 48 and space.ffn_hidden(512) == 384


# ---------------------------------------------------------------- persistence and refit


@pytest.fixture(scope="module")
def fitted(signal_matrix):
    m = signal_matrix
    return {
        "logistic": fit_logistic_fixed(m, 0.5),
        "gbt": fit_gbt_fixed(m, 10, 3, 0.3),
        "resnet": L.fit_resnet(m, train_config=SMALL, hyperparameters=[RESNET_HP]),
        "transformer": L.fit_transformer(m, train_config=SMALL, hyperparameters=[TRANSFORMER_HP]),
    }


@pytest.mark.parametrize("family", ["logistic", "gbt", "resnet", "transformer"])
def test_save_load_round_trip(fitted, signal_matrix, family, tmp_path):
    model = fitted[family]
    L.save_model(model, tmp_path / family)
    back = L.load_model(tmp_path / family)
    assert back.family == family and back.hyperparameters == model.hyperparameters
    np.testing.assert_array_equal(L.predict(back, signal_matrix), L.predict(model, signal_matrix))
    L.save_model(back, tmp_path / "again")
    for f in (tmp_path / family).iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


@pytest.mark.parametrize("family", ["logistic", "gbt", "resnet", "transformer"])
def test_refit_keeps_hyperparameters(fitted, signal_matrix, family):
    sub = signal_matrix.subset(np.arange(300))
    out = L.refit(fitted[family], sub, seed=9, train_config=SMALL)
    assert out.family == family
    for k, v in fitted[family].hyperparameters.items():
        if k != "penalty":
            assert out.hyperparameters[k] == v
    assert out.provenance["seed"] == 9
    assert L.predict(out, signal_matrix).shape == (signal_matrix.n_rows,)


def test_fit_dispatch_unknown_family(signal_matrix):
    with pytest.raises(L.LearnerError):
        L.fit("svm", signal_matrix, seed=0)


def test_parallel_search_matches_serial(signal_matrix):
    hps = [RESNET_HP, dict(RESNET_HP, n_layers=2, dropout_first=0.0)]
    serial = L.fit_resnet(signal_matrix, train_config=SMALL, hyperparameters=hps)
    parallel = L.fit_resnet(signal_matrix, train_config=SMALL, hyperparameters=hps, jobs=2)
    assert serial.search_trace == parallel.search_trace
    for k in serial.parameters:
        np.testing.assert_array_equal(serial.parameters[k], parallel.parameters[k])
