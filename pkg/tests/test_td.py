import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascadenet import autodiff as ad
from cascadenet.kernels import TemporalKernel
from cascadenet.network import RolloutTrace, rollout_static
from cascadenet.td import (TDConfig, TDTargets, TraceMemoryError, final_ce_loss, target_weights,
                           td_grad_incremental, td_loss, td_targets)

from conftest import random_net
from oracles import softmax, td_target

LAMBDAS = [0.0, 0.25, 0.5, 0.83, 1.0]


def trace_of(logits):
    """RolloutTrace over fixed logits ``[T, N, C]`` (leaves, so gradients can be taken)."""
    zs = [ad.Tensor(np.asarray(z, dtype=np.float64), requires_grad=True) for z in logits]
    return RolloutTrace(zs, [None] * len(zs), "cascaded", len(zs))


def random_trace(rng, T, n=2, c=4, scale=2.0):
    return trace_of(rng.normal(size=(T, n, c)) * scale)


# -------------------------------------------------------------- targets


def test_lambda_one_gives_label_everywhere(rng):
    tr = random_trace(rng, 5)
    y = np.eye(4)[[1, 3]]
    np.testing.assert_allclose(td_targets(tr, y, 1.0).values, np.broadcast_to(y, (5, 2, 4)), atol=0)


def test_lambda_zero_gives_next_output(rng):
    tr = random_trace(rng, 4)
    y = np.eye(4)[[0, 2]]
    tg = td_targets(tr, y, 0.0).values
    for t in range(3):
        np.testing.assert_allclose(tg[t], tr.probs[t + 1], rtol=1e-15)
    np.testing.assert_array_equal(tg[3], y)


def test_half_lambda_three_steps_by_hand(rng):
    tr = random_trace(rng, 3, n=1)
    y = np.eye(4)[[2]]
    p = tr.probs
    expected = 0.5 * p[1] + 0.25 * p[2] + 0.25 * y
    np.testing.assert_allclose(td_targets(tr, y, 0.5).values[0], expected, rtol=1e-14)


@pytest.mark.parametrize("lam", LAMBDAS)
def test_targets_match_direct_expansion(rng, lam):
    T = 7
    tr = random_trace(rng, T)
    y = np.eye(4)[[3, 0]]
    tg = td_targets(tr, y, lam).values
    for t in range(1, T + 1):
        np.testing.assert_allclose(tg[t - 1], td_target(list(tr.probs[t:]), y, lam), rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("lam", LAMBDAS)
@pytest.mark.parametrize("T", range(1, 17))
def test_target_weights_sum_to_one(lam, T):
    for t in range(1, T + 1):
        future, label = target_weights(lam, t, T)
        assert len(future) == T - t
        assert abs(sum(future) + label - 1.0) < 1e-12


@given(st.floats(0.0, 1.0), st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
def test_targets_are_distributions(lam, T, seed):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng, T, n=3, c=5, scale=5.0)
    tg = td_targets(tr, np.eye(5)[rng.integers(0, 5, 3)], lam).values
    assert np.all(tg >= 0)
    np.testing.assert_allclose(tg.sum(axis=-1), 1.0, atol=1e-12)


def test_targets_carry_no_gradient(rng):
    tr = random_trace(rng, 3)
    tg = td_targets(tr, np.eye(4)[[0, 1]], 0.5)
    assert all(not t.requires_grad for t in tg.targets)


def test_target_validation(rng):
    tr = random_trace(rng, 2)
    with pytest.raises(ValueError):
        td_targets(tr, np.eye(4)[[0, 1]], 1.5)
    with pytest.raises(ValueError):
        td_targets(tr, np.full((2, 4), 0.25), 0.5)
    with pytest.raises(ValueError):
        td_targets(tr, np.eye(3)[[0, 1]], 0.5)
    with pytest.raises(ValueError):
        TDConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TDConfig(T=0)


# ---------------------------------------------------------------- loss


def test_perfect_trace_with_label_targets_has_zero_loss():
    tr = trace_of(np.tile([[[80.0, 0.0, 0.0]]], (4, 1, 1)))
    y = np.eye(3)[[0]]
    assert float(td_loss(tr, td_targets(tr, y, 1.0)).value) == pytest.approx(0.0, abs=1e-30)


def test_matched_targets_give_summed_entropy(rng):
    tr = random_trace(rng, 3, n=1)
    p = tr.probs
    tg = TDTargets([ad.Tensor(q) for q in p], np.eye(4)[[0]])
    entropy = -(p * np.log(p)).sum()
    assert float(td_loss(tr, tg).value) == pytest.approx(entropy, rel=1e-12)


@pytest.mark.parametrize("T,C", [(1, 2), (4, 3), (10, 10)])
def test_uniform_outputs_give_T_log_C(T, C):
    tr = trace_of(np.zeros((T, 1, C)))
    y = np.eye(C)[[0]]
    assert float(td_loss(tr, td_targets(tr, y, 1.0)).value) == pytest.approx(T * np.log(C), rel=1e-12)


@pytest.mark.parametrize("lam", LAMBDAS)
def test_loss_matches_direct_formula(rng, lam):
    tr = random_trace(rng, 6)
    y = np.eye(4)[[1, 2]]
    tg = td_targets(tr, y, lam).values
    expected = -(tg * np.log(softmax(tr.logit_values))).sum()
    assert float(td_loss(tr, td_targets(tr, y, lam)).value) == pytest.approx(expected, rel=1e-12)


def test_loss_gradient_is_output_minus_target_per_step(rng):
    tr = random_trace(rng, 4)
    y = np.eye(4)[[0, 3]]
    tg = td_targets(tr, y, 0.25)
    # perturbing the constant targets changes the loss but not the gradient form
    noisy = TDTargets([ad.Tensor(0.5 * t.value + 0.5 * rng.dirichlet(np.ones(4), size=2)) for t in tg.targets], y)
    for targets in (tg, noisy):
        grads = ad.grad(td_loss(tr, targets), tr.logits)
        for g, z, t in zip(grads, tr.logit_values, targets.values):
            np.testing.assert_allclose(g, softmax(z) - t, atol=1e-14)


def test_loss_dimension_mismatch(rng):
    tr = random_trace(rng, 3)
    tg = td_targets(random_trace(rng, 2), np.eye(4)[[0, 1]], 0.0)
    with pytest.raises(ValueError):
        td_loss(tr, tg)


def test_final_ce_uses_last_step_only(rng):
    tr = random_trace(rng, 3)
    y = np.eye(4)[[2, 0]]
    expected = -(y * np.log(tr.probs[-1])).sum()
    loss = final_ce_loss(tr, y)
    assert float(loss.value) == pytest.approx(expected, rel=1e-12)
    g = ad.grad(loss, tr.logits)
    assert np.all(g[0] == 0) and np.all(g[1] == 0)


# ---------------------------------------------------- eligibility traces


def full_gradient(net, x, y, lam, T, kernel=TemporalKernel.osd()):
    tr = rollout_static(net, x, T, kernel)
    return ad.grad(td_loss(tr, td_targets(tr, y, lam)), [p for _, p in net.parameters()])


@pytest.mark.parametrize("lam", LAMBDAS)
def test_incremental_gradient_equals_full_sequence(rng, fp64, lam):
    net = random_net(rng, num_blocks=2, width=4, num_classes=3)
    x = rng.normal(size=(2, 5))
    y = np.eye(3)[[2, 0]]
    T = 5
    inc = td_grad_incremental(net, x, y, TDConfig(lam, T))
    full = full_gradient(net, x, y, lam, T)
    scale = max(np.abs(g).max() for g in full)
    for a, b in zip(inc, full):
        assert np.abs(a - b).max() / scale < 1e-5


def test_incremental_gradient_with_ews_kernel(rng, fp64):
    net = random_net(rng, num_blocks=2, width=3, num_classes=3)
    x = rng.normal(size=(1, 5))
    y = np.eye(3)[[1]]
    k = TemporalKernel.ews(0.6)
    inc = td_grad_incremental(net, x, y, TDConfig(0.5, 6), kernel=k)
    for a, b in zip(inc, full_gradient(net, x, y, 0.5, 6, k)):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_lambda_one_single_step_is_cross_entropy_gradient(rng, fp64):
    net = random_net(rng)
    x = rng.normal(size=(3, 5))
    y = np.eye(3)[[0, 1, 2]]
    inc = td_grad_incremental(net, x, y, TDConfig(1.0, 1))
    tr = rollout_static(net, x, 1, TemporalKernel.osd())
    ce = ad.grad(final_ce_loss(tr, y), [p for _, p in net.parameters()])
    for a, b in zip(inc, ce):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_weight_net_gradient_is_symmetric_over_wrong_classes(rng, fp64):
    net = random_net(rng, num_blocks=2, num_classes=4, stats="init")
    for name, p in net.parameters():
        p.value[...] = 1.0 if name.endswith(".scale") else 0.0
    x = rng.normal(size=(1, 5))
    y = np.eye(4)[[1]]
    inc = dict(zip([n for n, _ in net.parameters()], td_grad_incremental(net, x, y, TDConfig(0.5, 3))))
    gb = inc["head0.b"]
    wrong = np.delete(gb, 1)
    np.testing.assert_allclose(wrong, wrong[0], atol=1e-15)
    assert gb.sum() == pytest.approx(0.0, abs=1e-12)
    # the embedding is identically zero, so no head weight receives gradient
    np.testing.assert_array_equal(inc["head0.w"], 0.0)


def test_incremental_refuses_oversized_accumulators(rng, fp64):
    net = random_net(rng)
    with pytest.raises(TraceMemoryError, match="accumulators"):
        td_grad_incremental(net, rng.normal(size=(2, 5)), np.eye(3)[[0, 1]], TDConfig(0.0, 3),
                            max_accumulator_elements=10)
