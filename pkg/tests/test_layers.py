import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnadapt import tensor as T
from bnadapt.layers import (
    AdaptTarget,
    BatchNorm2d,
    Eval,
    TrainSource,
    blend_target,
    emd_momentum,
    update_running_source,
)
from bnadapt.tensor import Tensor


def _bn(channels, gamma=None, beta=None):
    bn = BatchNorm2d(channels)
    if gamma is not None:
        bn.gamma.data = np.asarray(gamma, np.float64)
    if beta is not None:
        bn.beta.data = np.asarray(beta, np.float64)
    return bn


def test_constant_channel_maps_to_beta():
    x = np.full((2, 3, 3, 2), 4.2)
    bn = _bn(2, gamma=[3.0, -1.0], beta=[0.5, 0.5])
    out = bn(Tensor(x), TrainSource(0.1)).data
    np.testing.assert_allclose(out, np.full_like(x, 0.5), atol=1e-9)


def test_two_value_channel():
    x = np.array([0.0, 2.0]).reshape(1, 1, 2, 1)
    bn = _bn(1, gamma=[2.0], beta=[1.0])
    out = bn(Tensor(x), TrainSource(0.1)).data.ravel()
    np.testing.assert_allclose(out, [-1.0, 3.0], atol=1e-4)
    np.testing.assert_allclose(bn.last_batch_mean, [1.0])
    np.testing.assert_allclose(bn.last_batch_var, [1.0])


def test_standardized_input_is_nearly_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 8, 8, 3))
    flat = x.reshape(-1, 3)
    x = ((flat - flat.mean(0)) / flat.std(0)).reshape(x.shape)
    out = _bn(3)(Tensor(x), TrainSource(0.1)).data
    assert np.max(np.abs(out - x)) < 1e-4


def test_update_running_source():
    m, v = update_running_source(np.array([0.0]), np.array([1.0]), np.array([1.0]), np.array([3.0]), 0.1)
    np.testing.assert_allclose(m, [0.1])
    np.testing.assert_allclose(v, [1.2])
    m0, v0 = update_running_source(np.array([0.3]), np.array([2.0]), np.array([9.0]), np.array([9.0]), 0.0)
    assert m0[0] == 0.3 and v0[0] == 2.0
    m1, v1 = update_running_source(np.array([0.3]), np.array([2.0]), np.array([9.0]), np.array([5.0]), 1.0)
    assert m1[0] == 9.0 and v1[0] == 5.0
    with pytest.raises(ValueError):
        update_running_source(0.0, 1.0, 0.0, 1.0, 1.5)


def test_train_source_updates_running_stats():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 3.0, size=(2, 4, 4, 2))
    bn = _bn(2)
    bn(Tensor(x), TrainSource(0.25))
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(bn.running_mean, 0.25 * flat.mean(0))
    np.testing.assert_allclose(bn.running_var, 0.75 + 0.25 * flat.var(0))


def test_emd_momentum():
    assert emd_momentum(0, 0.7, 3.0) == 0.7
    assert abs(emd_momentum(1, 0.9, 1.0) - 0.9 * math.exp(-1)) < 1e-15
    assert abs(emd_momentum(1, 0.9, 1.0) - 0.3311) < 1e-4
    assert emd_momentum(50, 0.9, 1.0) < 1e-20
    assert emd_momentum(10, 0.5, 10.0) == pytest.approx(0.5 * math.exp(-1), abs=1e-15)
    with pytest.raises(ValueError):
        emd_momentum(1, 0.9, 0.0)


def test_mode_validation():
    with pytest.raises(ValueError):
        TrainSource(-0.1)
    with pytest.raises(ValueError):
        AdaptTarget(1.01)
    with pytest.raises(ValueError):
        BatchNorm2d(2, eps=0.0)


def test_stats_mode_needs_two_values():
    bn = _bn(1)
    with pytest.raises(ValueError):
        bn(Tensor(np.ones((1, 1, 1, 1))), TrainSource())
    bn(Tensor(np.ones((1, 1, 1, 1))), Eval())


def test_freeze_source_copies_and_locks():
    rng = np.random.default_rng(2)
    bn = _bn(3)
    bn(Tensor(rng.normal(size=(2, 4, 4, 3))), TrainSource(0.5))
    bn.freeze_source()
    np.testing.assert_array_equal(bn.source_mean, bn.running_mean)
    np.testing.assert_array_equal(bn.source_gamma, bn.gamma.data)
    with pytest.raises(RuntimeError):
        bn.freeze_source()
    with pytest.raises(ValueError):
        bn.source_mean[0] = 1.0
    before = [a.tobytes() for a in (bn.source_mean, bn.source_var, bn.source_gamma, bn.source_beta)]
    for t in range(100):
        bn(Tensor(rng.normal(size=(2, 4, 4, 3))), AdaptTarget(emd_momentum(t, 0.9, 1.0)))
        bn.gamma.data = bn.gamma.data + 0.01
    after = [a.tobytes() for a in (bn.source_mean, bn.source_var, bn.source_gamma, bn.source_beta)]
    assert before == after


def test_adapt_target_requires_snapshot():
    with pytest.raises(RuntimeError):
        _bn(1)(Tensor(np.ones((1, 2, 2, 1))), AdaptTarget(0.5))


def test_adapt_target_blends_and_stores():
    rng = np.random.default_rng(3)
    bn = _bn(2)
    bn.set_source([1.0, -1.0], [2.0, 0.5], [1.0, 1.0], [0.0, 0.0])
    x = rng.normal(size=(2, 4, 4, 2))
    bn(Tensor(x), AdaptTarget(0.3))
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(bn.running_mean, 0.7 * flat.mean(0) + 0.3 * np.array([1.0, -1.0]))
    np.testing.assert_allclose(bn.running_var, 0.7 * flat.var(0) + 0.3 * np.array([2.0, 0.5]))


def _frozen_bn(rng, c=3):
    bn = _bn(c, gamma=rng.uniform(0.5, 2, c), beta=rng.normal(size=c))
    bn.set_source(rng.normal(size=c), rng.uniform(0.2, 3, c), bn.gamma.data, bn.beta.data)
    return bn


@pytest.mark.parametrize("seed", range(5))
def test_adapt_endpoints_are_bit_exact(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(1.0, 2.0, size=(2, 5, 5, 3))
    bn = _frozen_bn(np.random.default_rng(seed))
    at_one = bn(Tensor(x), AdaptTarget(1.0)).data

    ev = _frozen_bn(np.random.default_rng(seed))
    ev.running_mean, ev.running_var = ev.source_mean.copy(), ev.source_var.copy()
    assert ev(Tensor(x), Eval()).data.tobytes() == at_one.tobytes()

    at_zero = bn(Tensor(x), AdaptTarget(0.0)).data
    tr = _frozen_bn(np.random.default_rng(seed))
    assert tr(Tensor(x), TrainSource(0.1)).data.tobytes() == at_zero.tobytes()


def test_eval_is_pure():
    rng = np.random.default_rng(4)
    bn = _frozen_bn(rng)
    bn.running_mean, bn.running_var = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    state = (bn.running_mean.tobytes(), bn.running_var.tobytes())
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    a, b = bn(x, Eval()).data, bn(x, Eval()).data
    assert a.tobytes() == b.tobytes()
    assert (bn.running_mean.tobytes(), bn.running_var.tobytes()) == state


@pytest.mark.parametrize("seed", range(5))
def test_train_normalized_moments(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(rng.normal() * 3, rng.uniform(0.5, 4), size=(3, 6, 6, 4))
    bn = _bn(4)
    out = bn(Tensor(x), TrainSource()).data.reshape(-1, 4)
    var = x.reshape(-1, 4).var(0)
    assert np.all(np.abs(out.mean(0)) < 1e-6)
    np.testing.assert_allclose(out.var(0), var / (var + bn.eps), atol=1e-6)
    assert np.all(np.abs(out.var(0) - 1) < 1e-4)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-10, 10), st.floats(0, 10), st.floats(-10, 10), st.floats(0, 10), st.floats(0, 1),
)
def test_blend_is_convex(bm, bv, sm, sv, eta):
    m, v = blend_target(bm, bv, sm, sv, eta)
    tol = 1e-12
    assert min(bm, sm) - tol <= m <= max(bm, sm) + tol
    assert min(bv, sv) - tol <= v <= max(bv, sv) + tol
    assert v >= 0


def test_bn_gradient_flows_through_batch_stats_only():
    rng = np.random.default_rng(5)
    bn = _frozen_bn(rng, 2)
    x = rng.normal(size=(2, 3, 3, 2))
    r = rng.normal(size=x.shape)

    def f(t):
        return T.sum_all(T.mul(bn(t, AdaptTarget(0.4)), r))

    from bnadapt.gradcheck import check

    ok, worst, _, _ = check(f, x)
    assert ok, worst
