from __future__ import annotations

import filecmp
import json
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from plpbench import synthgen as sg
from plpbench.cohort import build_cohort, labels_of
from plpbench.evalstats import UndefinedMetricError
from plpbench.omop_lite import NotFoundError, events_in_window

TASK = sg.synthetic_task()
SMALL_VOCAB = dict(n_condition_concepts=30, n_drug_concepts=10)


def pair_count_auroc(p, y):
    """Exhaustive pair counting, independent of the rank-sum implementation."""
    pos, neg = p[y == 1], p[y == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def truth_arrays(truth, cohort):
    p = np.array([sg.true_probability(truth, e.person_id) for e in cohort])
    return p, labels_of(cohort)


@pytest.fixture(scope="module")
def base_rate_store():
    cfg = sg.GeneratorConfig(n_persons=10_000, seed=3, **SMALL_VOCAB)
    store, truth = sg.generate(cfg, sg.RiskModel(intercept=sg.logit(0.05), task=TASK))
    return store, truth, build_cohort(store, TASK)


def test_base_rate_matches_intercept(base_rate_store):
    _, _, cohort = base_rate_store
    n = len(cohort)
    rate = labels_of(cohort).mean()
    assert abs(rate - 0.05) <= 2 * math.sqrt(0.05 * 0.95 / n)


def test_zero_signal_bayes_auroc_is_half(base_rate_store):
    _, truth, cohort = base_rate_store
    # every true probability is identical, so every pair is a tie
    assert sg.bayes_auroc(truth, cohort) == pytest.approx(0.5, abs=3 * math.sqrt(1 / (12 * 500)))


def test_realised_prevalence_tracks_mean_probability():
    cfg, rm = sg.planted_scenario(n_persons=10_000, seed=5)
    store, truth = sg.generate(cfg, rm)
    cohort = build_cohort(store, rm.task)
    p, y = truth_arrays(truth, cohort)
    se = math.sqrt((p * (1 - p)).sum()) / len(p)
    assert abs(y.mean() - p.mean()) <= 2 * se


def test_export_is_byte_identical(tmp_path):
    cfg = sg.GeneratorConfig(n_persons=300, seed=11, **SMALL_VOCAB)
    rm = sg.RiskModel(intercept=-2.0, task=TASK, concept_coefficients={3: 1.0})
    for d in ("a", "b"):
        sg.export(*sg.generate(cfg, rm), tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == [] and len(match) == 7


def test_worker_count_does_not_change_store():
    cfg = sg.GeneratorConfig(n_persons=400, seed=2, **SMALL_VOCAB)
    rm = sg.RiskModel(intercept=-2.0, task=TASK, concept_coefficients={1: 0.5})
    a, ta = sg.generate(cfg, rm, workers=1)
    b, tb = sg.generate(cfg, rm, workers=3)
    assert a.events() == b.events() and a.visits() == b.visits() and a.persons() == b.persons()
    assert ta.per_person_true_probability == tb.per_person_true_probability


def test_single_concept_bayes_auroc_matches_pair_count():
    cfg = sg.GeneratorConfig(n_persons=3000, seed=8, concept_prevalence={5: 0.3}, **SMALL_VOCAB)
    store, truth = sg.generate(cfg, sg.RiskModel(intercept=-3.0, task=TASK, concept_coefficients={5: 2.0}))
    cohort = build_cohort(store, TASK)
    p, y = truth_arrays(truth, cohort)
    assert sg.bayes_auroc(truth, cohort) == pytest.approx(pair_count_auroc(p, y), abs=1e-12)
    assert sg.bayes_auroc(truth, cohort) > 0.6


def test_two_feature_bayes_auroc_matches_monte_carlo_pairs():
    cfg = sg.GeneratorConfig(n_persons=10_000, seed=9, concept_prevalence={2: 0.3, 7: 0.4}, **SMALL_VOCAB)
    store, truth = sg.generate(cfg, sg.RiskModel(intercept=-3.0, task=TASK, concept_coefficients={2: 1.5, 7: -1.0}))
    cohort = build_cohort(store, TASK)
    p, y = truth_arrays(truth, cohort)
    rng = np.random.default_rng(0)
    pos, neg = p[y == 1], p[y == 0]
    a, b = rng.choice(pos, 400_000), rng.choice(neg, 400_000)
    mc = ((a > b) + 0.5 * (a == b)).mean()
    assert sg.bayes_auroc(truth, cohort) == pytest.approx(mc, abs=0.005)


def test_true_probability_analytic_cases():
    cohort_free = sg.GeneratorConfig(n_persons=200, seed=4, concept_prevalence={1: 0.9}, **SMALL_VOCAB)
    _, t0 = sg.generate(cohort_free, sg.RiskModel(intercept=0.0, task=TASK))
    assert set(t0.per_person_true_probability.values()) == {0.5}
    _, t1 = sg.generate(cohort_free, sg.RiskModel(intercept=-50.0, task=TASK))
    assert max(t1.per_person_true_probability.values()) < 1e-20
    store, t2 = sg.generate(cohort_free, sg.RiskModel(intercept=-1.0, task=TASK, concept_coefficients={1: 1.0}))
    cohort = build_cohort(store, TASK)
    with_concept = [e for e in cohort
                    if any(ev.concept_id == 1 for ev in events_in_window(store, e.person_id, e.index_date - 365,
                                                                         e.index_date - 1))]
    assert with_concept
    for e in with_concept:
        assert sg.true_probability(t2, e.person_id) == 0.5


def test_true_probability_unknown_person():
    _, truth = sg.generate(sg.GeneratorConfig(n_persons=20, seed=1, **SMALL_VOCAB), sg.RiskModel(-2.0, TASK))
    with pytest.raises(NotFoundError):
        sg.true_probability(truth, 10_000)


def test_deterministic_labels_give_perfect_bayes_auroc():
    cfg = sg.GeneratorConfig(n_persons=1500, seed=6, concept_prevalence={4: 0.5}, **SMALL_VOCAB)
    store, truth = sg.generate(cfg, sg.RiskModel(intercept=-60.0, task=TASK, concept_coefficients={4: 120.0}))
    cohort = build_cohort(store, TASK)
    assert sg.bayes_auroc(truth, cohort) == 1.0


def test_single_class_cohort_is_undefined():
    store, truth = sg.generate(sg.GeneratorConfig(n_persons=200, seed=1, **SMALL_VOCAB), sg.RiskModel(-60.0, TASK))
    with pytest.raises(UndefinedMetricError):
        sg.bayes_auroc(truth, build_cohort(store, TASK))


def test_out_of_vocabulary_coefficient_rejected():
    with pytest.raises(sg.ConfigError):
        sg.generate(sg.GeneratorConfig(n_persons=5, **SMALL_VOCAB), sg.RiskModel(-2.0, TASK, {10_000: 1.0}))


def test_stronger_coefficient_raises_bayes_auroc():
    strengths = [0.25, 0.75, 1.25, 1.75, 2.25]
    values = []
    for seed, beta in enumerate(strengths):
        cfg = sg.GeneratorConfig(n_persons=2500, seed=100 + seed, concept_prevalence={3: 0.3}, **SMALL_VOCAB)
        store, truth = sg.generate(cfg, sg.RiskModel(intercept=-2.5, task=TASK, concept_coefficients={3: beta}))
        values.append(sg.bayes_auroc(truth, build_cohort(store, TASK)))
    assert spearmanr(strengths, values).correlation > 0


def test_generator_document_round_trip(tmp_path):
    cfg, rm = sg.planted_scenario(n_persons=50, seed=2)
    doc = {"config": cfg.to_json_dict(), "risk_model": rm.to_json_dict()}
    (tmp_path / "g.json").write_text(json.dumps(doc))
    cfg2, rm2 = sg.load_generator_document(tmp_path / "g.json")
    assert cfg2 == cfg and rm2 == rm


def test_planted_scenario_hits_target_bayes_auroc():
    cfg, rm = sg.planted_scenario(seed=2)
    store, truth = sg.generate(cfg, rm)
    cohort = build_cohort(store, rm.task)
    assert 0.84 <= sg.bayes_auroc(truth, cohort) <= 0.86
    assert 9500 <= len(cohort) <= 10500
