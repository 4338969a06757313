from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostsgd import autodiff as ad
from ghostsgd.data import Quadratic
from ghostsgd.ghost import LossBreakdown
from ghostsgd.models import ModelSpec, build
from ghostsgd.optim import (
    BatchSampler,
    LandscapeObjective,
    ModelObjective,
    NonFiniteGradient,
    ObserverError,
    SgdState,
    _project,
    grad_estimate,
    run_chain,
    sgd_step,
    trajectory_hash,
)


class ConstantGrad:
    n_samples = 1

    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)

    def value_and_grad(self, w, batch):
        return LossBreakdown(0.0, 0.0, 0.0), self.g.copy()


def tiny_objective(n=4, seed=0):
    r = np.random.default_rng(seed)
    model, params = build(ModelSpec(kind="mlp", in_shape=(1, 3, 3), hidden=(4,), c=3, e=1,
                                    gamma_init="gaussian:0.2", init_seed=seed))
    return ModelObjective(model, params, r.random((n, 1, 3, 3)), r.integers(0, 3, n)), params


# ---------------------------------------------------------------- estimator

def test_full_batch_on_one_sample_is_the_sample_gradient():
    obj, params = tiny_objective(n=1)
    est = grad_estimate(params.data, obj, BatchSampler(1))
    _, g = obj.model.value_and_grad(params, obj.images[:1], obj.labels[:1])
    assert est.batch is None
    np.testing.assert_array_equal(est.g, g)


def test_whole_dataset_without_replacement_equals_full_batch():
    obj, params = tiny_objective(n=6)
    full = grad_estimate(params.data, obj, BatchSampler(6)).g
    for step in range(3):
        est = grad_estimate(params.data, obj, BatchSampler(6, 6, "without_replacement_epoch", 2), step)
        assert sorted(est.batch.tolist()) == list(range(6))
        np.testing.assert_allclose(est.g, full, rtol=0, atol=1e-15)


def test_average_over_all_pairs_is_the_full_gradient():
    obj, params = tiny_objective(n=4)
    full = obj.full_grad(params.data)
    pairs = list(combinations(range(4), 2))
    assert len(pairs) == 6
    mean = sum(obj.value_and_grad(params.data, np.array(p))[1] for p in pairs) / len(pairs)
    assert np.max(np.abs(mean - full)) <= 1e-12


def test_empty_dataset_is_a_contract_error():
    model, params = build(ModelSpec(kind="mlp", in_shape=(1, 2, 2), hidden=(), c=2))
    with pytest.raises(ad.ContractError):
        ModelObjective(model, params, np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ad.ContractError):
        BatchSampler(0)


def test_sampler_validation():
    with pytest.raises(ValueError):
        BatchSampler(10, 0, "with_replacement")
    with pytest.raises(ValueError):
        BatchSampler(10, 11, "without_replacement_epoch")
    with pytest.raises(ValueError):
        BatchSampler(10, 2, "cyclic")


def test_without_replacement_covers_each_epoch_once():
    s = BatchSampler(10, 3, "without_replacement_epoch", seed=1)
    for epoch in range(3):
        seen = np.concatenate([s.draw(epoch * 3 + k) for k in range(3)])
        assert len(np.unique(seen)) == 9
    assert not np.array_equal(s.draw(0), s.draw(3))


def test_with_replacement_draws_are_keyed_by_step():
    s = BatchSampler(10, 4, "with_replacement", seed=5)
    assert np.array_equal(s.draw(7), s.draw(7))
    assert s.draw(7).shape == (4,)
    assert all(0 <= i < 10 for i in s.draw(8))


# ---------------------------------------------------------------- steps

def test_single_step_example():
    new = sgd_step(SgdState(np.array([1.0]), eta=0.1), ConstantGrad([2.0]), BatchSampler(1))
    assert new.params.tolist() == [pytest.approx(0.8, abs=1e-15)]
    assert new.step == 1


def test_zero_gradient_is_a_fixed_point():
    w = np.array([0.3, -2.0])
    new = sgd_step(SgdState(w, eta=0.1), ConstantGrad([0.0, 0.0]), BatchSampler(1))
    assert np.array_equal(new.params, w)


def test_quadratic_recursion():
    state = SgdState(np.array([1.0]), eta=0.1)
    obj = LandscapeObjective(Quadratic.diagonal([2.0]))
    for t in range(1, 6):
        state = sgd_step(state, obj, BatchSampler(1))
        assert state.params[0] == pytest.approx(0.8 ** t, rel=1e-14)
    assert round(state.params[0], 12) == 0.32768


def test_learning_rate_and_momentum_validation():
    with pytest.raises(ValueError):
        SgdState(np.zeros(1), eta=0.0)
    with pytest.raises(ValueError):
        SgdState(np.zeros(1), eta=-0.1)
    with pytest.raises(ValueError):
        SgdState(np.zeros(1), momentum=0.9)


def test_non_finite_gradient_aborts_with_dump():
    with pytest.raises(NonFiniteGradient) as info:
        sgd_step(SgdState(np.zeros(3)), ConstantGrad([0.0, np.nan, np.inf]), BatchSampler(1))
    assert info.value.dump["step"] == 0
    assert info.value.dump["nonfinite"] == 2


@settings(max_examples=100, deadline=None)
@given(w=st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=8), bound=st.floats(1.0, 2e3))
def test_projection_is_idempotent(w, bound):
    w = np.array(w)
    once, _ = _project(w, bound)
    twice, count = _project(once, bound)
    assert np.array_equal(once, twice) and count == 0
    assert np.all(np.abs(once) <= bound)
    inside = np.abs(w) <= bound
    assert np.array_equal(once[inside], w[inside])


def test_projection_counts_clamped_coordinates():
    state = SgdState(np.array([999.0, 0.0]), eta=1.0, domain_bound=1e3)
    new = sgd_step(state, ConstantGrad([-5.0, 1.0]), BatchSampler(1))
    assert new.params.tolist() == [1000.0, -1.0]
    assert new.projections == 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), frac=st.floats(0.05, 0.95))
def test_gradient_descent_on_convex_quadratic_decreases_monotonically(seed, frac):
    r = np.random.default_rng(seed)
    a = r.normal(size=(5, 5))
    H = a @ a.T + 0.1 * np.eye(5)
    eta = frac * 2 / np.linalg.eigvalsh(H).max()
    land = Quadratic(H)
    state = SgdState(r.normal(size=5), eta=eta)
    obj = LandscapeObjective(land)
    f_prev = land.evaluate(state.params)[0]
    for _ in range(30):
        state = sgd_step(state, obj, BatchSampler(1))
        f = land.evaluate(state.params)[0]
        assert f <= f_prev
        f_prev = f


# ---------------------------------------------------------------- chains

def chain_inputs(seed=0):
    obj, params = tiny_objective(n=8, seed=seed)
    return SgdState(params.data.copy(), eta=0.2, seed=seed), obj, BatchSampler(8, 3, "with_replacement", seed)


def test_one_step_chain_is_one_step():
    state, obj, sampler = chain_inputs()
    final, records = run_chain(state, obj, sampler, 1)
    direct = sgd_step(state, obj, sampler)
    assert np.array_equal(final.params, direct.params)
    assert len(records) == 1 and records[0].step == 0


def test_observers_do_not_change_the_trajectory():
    state, obj, sampler = chain_inputs()
    plain_state, plain = run_chain(state, obj, sampler, 12)

    def observer(t, w, est):
        with pytest.raises(ValueError):
            w[0] = 123.0
        return {"norm": float(np.abs(w).max())}

    obs_state, observed = run_chain(state, obj, sampler, 12, [observer], cadence=3)
    assert trajectory_hash(plain) == trajectory_hash(observed)
    assert np.array_equal(plain_state.params, obs_state.params)
    assert [bool(r.extras) for r in observed] == [(t + 1) % 3 == 0 for t in range(12)]


def test_equal_seeds_give_equal_hashes():
    a = run_chain(*chain_inputs(1), 10)[1]
    b = run_chain(*chain_inputs(1), 10)[1]
    c = run_chain(*chain_inputs(2), 10)[1]
    assert trajectory_hash(a) == trajectory_hash(b)
    assert trajectory_hash(a) != trajectory_hash(c)


def test_observer_failure_flushes_partial_records():
    state, obj, sampler = chain_inputs()
    flushed = []

    def broken(t, w, est):
        if t == 4:
            raise RuntimeError("probe exploded")

    with pytest.raises(ObserverError, match="step 4") as info:
        run_chain(state, obj, sampler, 10, [broken], flush=flushed.append)
    assert len(info.value.records) == 4
    assert flushed and len(flushed[0]) == 4


def test_chain_needs_a_step():
    with pytest.raises(ad.ContractError):
        run_chain(*chain_inputs(), 0)


def test_records_describe_the_iterate_before_the_update():
    state = SgdState(np.array([1.0]), eta=0.1)
    obj = LandscapeObjective(Quadratic.diagonal([2.0]))
    _, records = run_chain(state, obj, BatchSampler(1), 3)
    assert [r.f_orig for r in records] == pytest.approx([1.0, 0.64, 0.4096], rel=1e-14)
    assert [r.grad_norm for r in records] == pytest.approx([2.0, 1.6, 1.28], rel=1e-14)
