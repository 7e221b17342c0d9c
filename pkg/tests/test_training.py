"""Training-loop tests: batched/per-sample equivalence, optimizer, determinism."""

import copy

import numpy as np
import pytest

from verbnoun.data import GeneratorSpec, generate_dataset
from verbnoun.errors import UsageError
from verbnoun.sap import VARIANTS, SapParams, sap_forward
from verbnoun.tensor import Tensor
from verbnoun.training import (
    EpochMetrics,
    OptimState,
    batched_forward,
    cross_entropy_loss,
    train,
    train_epoch,
)

SPEC = GeneratorSpec(C=10, V=3, U=5, M=3, K=3, distractor_count=1, seed=2)


def small_dataset(n=12):
    return generate_dataset(SPEC, n)


def fresh_params(seed=0):
    return SapParams.init(SPEC.C, SPEC.V, SPEC.U, seed=seed)


def clone_params(params):
    clone = SapParams.init(SPEC.C, SPEC.V, SPEC.U, seed=0)
    for (name, src), (_, dst) in zip(params.named_tensors(),
                                     clone.named_tensors()):
        dst.data = src.data.copy()
    return clone


# --------------------------------------------------- batched path equivalence

@pytest.mark.parametrize("variant", VARIANTS)
def test_batched_forward_matches_per_sample(variant):
    dataset = small_dataset(8)
    params = fresh_params(seed=3)
    fv = Tensor(np.stack([ep.verb_feature.values for ep in dataset]))
    fn = Tensor(np.stack([ep.noun_feature.values for ep in dataset]))
    rows = Tensor(np.stack([ep.bank.features for ep in dataset]))
    vl, nl = batched_forward(fv, fn, rows, params, variant)
    for i, ep in enumerate(dataset):
        out = sap_forward(ep.verb_feature, ep.noun_feature, ep.bank,
                          params, variant)
        np.testing.assert_allclose(vl.data[i], out.verb_logits.data,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(nl.data[i], out.noun_logits.data,
                                   rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", ["full", "no_csg", "no_arm", "baseline"])
def test_batched_and_per_sample_training_agree(variant):
    """Forcing the per-sample fallback must train to the same losses."""
    dataset = small_dataset(16)
    pa, pb = fresh_params(seed=1), clone_params(fresh_params(seed=1))
    ma = train(dataset, pa, OptimState(0.05), epochs=2, seed=7,
               variant=variant, batch_size=8)

    import verbnoun.training as tr
    orig = tr._stack_dataset
    tr._stack_dataset = lambda ds: None
    try:
        mb = train(dataset, pb, OptimState(0.05), epochs=2, seed=7,
                   variant=variant, batch_size=8)
    finally:
        tr._stack_dataset = orig
    for a, b in zip(ma, mb):
        assert a.total_loss == pytest.approx(b.total_loss, rel=1e-9)
    for (_, ta), (_, tb) in zip(pa.named_tensors(), pb.named_tensors()):
        np.testing.assert_allclose(ta.data, tb.data, rtol=1e-9, atol=1e-12)


# --------------------------------------------------------------- optimizer

def test_sgd_momentum_weight_decay_semantics():
    params = fresh_params()
    name, t = params.named_tensors()[0]
    w0 = t.data.copy()
    g = np.full_like(w0, 0.5)
    opt = OptimState(learning_rate=0.1, momentum=0.9, weight_decay=0.01)

    t.grad = g.copy()
    opt.step(params)
    v1 = g + 0.01 * w0
    np.testing.assert_allclose(t.data, w0 - 0.1 * v1, rtol=1e-12)

    w1 = t.data.copy()
    t.grad = g.copy()
    opt.step(params)
    v2 = 0.9 * v1 + (g + 0.01 * w1)
    np.testing.assert_allclose(t.data, w1 - 0.1 * v2, rtol=1e-12)


def test_step_skips_ungraded_params_but_not_all():
    params = fresh_params()
    named = params.named_tensors()
    named[0][1].grad = np.ones_like(named[0][1].data)
    before = named[1][1].data.copy()
    OptimState(0.1).step(params)
    np.testing.assert_array_equal(named[1][1].data, before)


def test_step_with_no_gradients_at_all_is_an_error():
    with pytest.raises(UsageError):
        OptimState(0.1).step(fresh_params())


def test_negative_hyperparameters_rejected():
    with pytest.raises(UsageError):
        OptimState(-0.1)
    with pytest.raises(UsageError):
        OptimState(0.1, momentum=-1.0)


# ---------------------------------------------------------------- loop rules

def test_empty_dataset_rejected():
    with pytest.raises(UsageError):
        train_epoch([], fresh_params(), OptimState(0.1),
                    np.random.default_rng(0))


def test_cross_entropy_target_range():
    with pytest.raises(IndexError):
        cross_entropy_loss(Tensor(np.zeros(3)), 3)


def test_cross_entropy_value():
    # uniform logits: loss = log(K)
    loss = cross_entropy_loss(Tensor(np.zeros(4)), 2)
    assert loss.item() == pytest.approx(np.log(4.0), rel=1e-12)


def test_training_reduces_loss():
    dataset = small_dataset(24)
    metrics = train(dataset, fresh_params(), OptimState(0.2), epochs=8,
                    seed=0, variant="full", batch_size=8)
    assert metrics[-1].total_loss < metrics[0].total_loss


def test_identical_seeds_give_bit_identical_runs():
    dataset = small_dataset(16)
    results = []
    for _ in range(2):
        params = fresh_params(seed=4)
        m = train(dataset, params, OptimState(0.1), epochs=3, seed=9,
                  variant="full", batch_size=8)
        results.append((m, {n: t.data.copy()
                            for n, t in params.named_tensors()}))
    (ma, wa), (mb, wb) = results
    for a, b in zip(ma, mb):
        assert a.total_loss == b.total_loss  # bit-identical floats
    for n in wa:
        np.testing.assert_array_equal(wa[n], wb[n])


def test_metrics_are_per_sample_means():
    dataset = small_dataset(10)
    params = fresh_params()
    # zero learning rate: the epoch just measures initial losses
    m = train_epoch(dataset, params, OptimState(0.0), np.random.default_rng(0),
                    variant="full", batch_size=4)
    assert isinstance(m, EpochMetrics)
    expected_v = expected_n = 0.0
    for ep in dataset:
        out = sap_forward(ep.verb_feature, ep.noun_feature, ep.bank, params)
        expected_v += cross_entropy_loss(out.verb_logits, ep.labels.verb).item()
        expected_n += cross_entropy_loss(out.noun_logits, ep.labels.noun).item()
    assert m.verb_loss == pytest.approx(expected_v / len(dataset), rel=1e-9)
    assert m.noun_loss == pytest.approx(expected_n / len(dataset), rel=1e-9)
    assert m.total_loss == pytest.approx(m.verb_loss + m.noun_loss, rel=1e-12)
