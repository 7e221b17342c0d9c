"""Prior estimation, Eq. 5 re-weighting, and top-k accuracy tests."""

import numpy as np
import pytest

from verbnoun.data import GeneratorSpec, generate_dataset
from verbnoun.errors import DimensionError, UsageError
from verbnoun.evaluate import (
    ActionPrior,
    estimate_action_prior,
    evaluate_dataset,
    predict,
    ranked_classes,
    reweight_action_scores,
    topk_accuracy,
    topk_hit,
)
from verbnoun.sap import SapParams
from verbnoun.training import Labels

SPEC = GeneratorSpec(C=10, V=3, U=5, M=2, K=3, distractor_count=1, seed=8)


# ----------------------------------------------------------------- prior

def test_estimate_counts_and_normalizes():
    labels = [Labels(0, 0), Labels(0, 0), Labels(1, 2), Labels(0, 1)]
    prior = estimate_action_prior(labels, V=2, U=3)
    assert prior.total_count == 4
    np.testing.assert_allclose(prior.table,
                               [[0.5, 0.25, 0.0], [0.0, 0.0, 0.25]])
    assert prior.table.sum() == pytest.approx(1.0)


def test_estimate_unseen_pairs_exactly_zero():
    prior = estimate_action_prior([Labels(0, 0)], V=2, U=2)
    assert prior.table[0, 1] == 0.0
    assert prior.table[1, 0] == 0.0
    assert prior.table[1, 1] == 0.0


def test_estimate_min_count_filter():
    labels = [Labels(0, 0)] * 3 + [Labels(1, 1)]
    prior = estimate_action_prior(labels, V=2, U=2, min_count=2)
    assert prior.table[1, 1] == 0.0
    assert prior.table[0, 0] == pytest.approx(1.0)
    with pytest.raises(UsageError):
        estimate_action_prior(labels, V=2, U=2, min_count=5)


def test_estimate_rejects_empty_and_out_of_range():
    with pytest.raises(UsageError):
        estimate_action_prior([], V=2, U=2)
    with pytest.raises(IndexError):
        estimate_action_prior([Labels(2, 0)], V=2, U=2)


# ------------------------------------------------------------- reweighting

def test_reweight_zero_prior_annihilates():
    prior = ActionPrior(np.array([[0.5, 0.0], [0.0, 0.5]]), 2)
    scores = reweight_action_scores(np.array([0.9, 0.1]),
                                    np.array([0.2, 0.8]), prior)
    assert scores[0, 1] == 0.0 and scores[1, 0] == 0.0
    assert scores[0, 0] == pytest.approx(0.5 * 0.9 * 0.2)


def test_reweight_scale_invariance_of_ranking():
    """Multiplying the prior by a constant cannot change the ranking."""
    rng = np.random.default_rng(0)
    table = rng.uniform(size=(3, 4))
    table /= table.sum()
    vp = rng.dirichlet(np.ones(3))
    np_ = rng.dirichlet(np.ones(4))
    a = reweight_action_scores(vp, np_, ActionPrior(table, 10))
    b = reweight_action_scores(vp, np_, ActionPrior(table * 7.0, 10))
    np.testing.assert_array_equal(ranked_classes(a), ranked_classes(b))


def test_reweight_shape_mismatch():
    prior = ActionPrior(np.ones((2, 3)) / 6, 6)
    with pytest.raises(DimensionError):
        reweight_action_scores(np.ones(3), np.ones(3), prior)


# ------------------------------------------------------------------ top-k

def test_ranked_classes_tie_breaks_by_index():
    np.testing.assert_array_equal(ranked_classes([0.5, 0.9, 0.5]), [1, 0, 2])


def test_topk_hit_and_monotonicity():
    scores = [0.1, 0.4, 0.3, 0.2]
    assert not topk_hit(scores, 2, 1)
    assert topk_hit(scores, 2, 2)
    hits = [topk_hit(scores, 3, k) for k in range(1, 5)]
    assert hits == sorted(hits)  # once in, never out


def test_topk_k_validation_and_clamping():
    with pytest.raises(UsageError):
        topk_hit([0.5, 0.5], 0, 0)
    with pytest.warns(UserWarning):
        assert topk_hit([0.5, 0.5], 1, 99)


def test_topk_accuracy_errors():
    with pytest.raises(DimensionError):
        topk_accuracy([[0.5]], [0, 1], 1)
    with pytest.raises(UsageError):
        topk_accuracy([], [], 1)


# -------------------------------------------------------- dataset evaluation

def test_predict_probabilities_and_scores():
    dataset = generate_dataset(SPEC, 3)
    params = SapParams.init(SPEC.C, SPEC.V, SPEC.U, seed=0)
    pred = predict(dataset[0], params)
    assert pred.verb_probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert pred.noun_probs.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(
        pred.action_scores, np.outer(pred.verb_probs, pred.noun_probs))


def test_evaluate_dataset_keys_and_ranges():
    dataset = generate_dataset(SPEC, 10)
    params = SapParams.init(SPEC.C, SPEC.V, SPEC.U, seed=0)
    prior = estimate_action_prior([ep.labels for ep in dataset],
                                  SPEC.V, SPEC.U)
    with pytest.warns(UserWarning):  # k=5 exceeds V=3; clamped
        metrics = evaluate_dataset(dataset, params, "full", prior=prior,
                                   ks=(1, 5))
    for key in ("verb_top1", "noun_top1", "action_top1_raw", "action_top1",
                "verb_top5", "noun_top5", "action_top5_raw", "action_top5"):
        assert 0.0 <= metrics[key] <= 1.0
    assert metrics["verb_top5"] >= metrics["verb_top1"]
    assert metrics["noun_top5"] >= metrics["noun_top1"]


def test_evaluate_without_prior_mirrors_raw():
    dataset = generate_dataset(SPEC, 6)
    params = SapParams.init(SPEC.C, SPEC.V, SPEC.U, seed=1)
    metrics = evaluate_dataset(dataset, params, "full", ks=(1,))
    assert metrics["action_top1"] == metrics["action_top1_raw"]


def test_zero_prior_pair_never_predicted():
    """Acceptance criterion 5's exactness clause at unit scale."""
    dataset = generate_dataset(SPEC, 40)
    params = SapParams.init(SPEC.C, SPEC.V, SPEC.U, seed=2)
    prior = estimate_action_prior([ep.labels for ep in dataset[:20]],
                                  SPEC.V, SPEC.U)
    zero_pairs = set(map(tuple, np.argwhere(prior.table == 0.0)))
    assert zero_pairs
    for ep in dataset[20:]:
        pred = predict(ep, params, "full", prior=prior)
        top = ranked_classes(pred.action_scores)[0]
        assert (top // SPEC.U, top % SPEC.U) not in zero_pairs
