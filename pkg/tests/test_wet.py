import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbl.numcore import AffineParams, init_affine
from cbl.wet import (
    EmaConfig,
    WetState,
    aema_update,
    ema_update,
    wema_coefficients,
    wema_update,
    wet_forward,
    wet_init,
    wet_update,
)


def test_ema_examples():
    t, s = np.array([2.0]), np.array([4.0])
    assert ema_update(t, s, 1.0).tolist() == [2.0]
    assert ema_update(t, s, 0.0).tolist() == [4.0]
    assert ema_update(t, s, 0.5).tolist() == [3.0]


def test_aema_examples():
    assert aema_update(np.array([9.0]), [np.array([2.0]), np.array([4.0])], 0.0).tolist() == [3.0]
    t, s = np.array([1.5, -2.0]), np.array([0.25, 3.0])
    assert np.array_equal(aema_update(t, [s], 0.3), ema_update(t, s, 0.3))
    with pytest.raises(ValueError):
        aema_update(t, [], 0.5)


def test_wema_coefficients_at_published_rate():
    a_t, a_cls, a_oic = wema_coefficients(0.999, 3)
    assert a_t == 0.999
    assert abs(a_cls - 0.0005) < 1e-9
    assert abs(a_oic - 0.0005 / 3) < 1e-9
    # the CLS weight equals (K + 1) / 2 times the uniform share (1 - alpha) / (K + 1)
    assert abs(a_cls - (3 + 1) / 2 * (1 - 0.999) / (3 + 1)) < 1e-12


def test_wema_scalar_example():
    heads = [np.array([1.0]), np.array([2.0]), np.array([3.0])]
    assert wema_update(np.array([100.0]), heads, np.array([10.0]), 0.0).tolist() == [6.0]


@given(st.floats(0.0, 1.0), st.integers(1, 12))
def test_wema_coefficients_sum_to_one(alpha, k):
    a_t, a_cls, a_oic = wema_coefficients(alpha, k)
    assert abs(a_t + a_cls + k * a_oic - 1.0) <= 1e-12


def test_equal_students_reduce_to_plain_ema():
    # dyadic values keep every product and sum exact
    t, s = np.array([1.0, -3.0, 0.5]), np.array([2.0, 4.0, -1.0])
    for alpha in (0.0, 0.5, 0.75, 1.0):
        for k in (1, 2, 4):
            assert np.array_equal(wema_update(t, [s] * k, s, alpha), ema_update(t, s, alpha))
            assert np.array_equal(aema_update(t, [s] * k, alpha), ema_update(t, s, alpha))


@given(st.floats(0.0, 1.0), st.integers(1, 5), st.integers(0, 1000))
def test_equal_students_reduce_to_plain_ema_random(alpha, k, seed):
    rng = np.random.default_rng(seed)
    t, s = rng.normal(size=4), rng.normal(size=4)
    expect = ema_update(t, s, alpha)
    assert np.allclose(wema_update(t, [s] * k, s, alpha), expect, rtol=0, atol=1e-14)
    assert np.allclose(aema_update(t, [s] * k, alpha), expect, rtol=0, atol=1e-14)


def test_frozen_student_convergence_rate():
    t0, s = np.array([5.0, -1.0]), np.array([1.0, 3.0])
    for alpha in (0.9, 0.99, 0.999):
        t = t0
        for n in range(1, 301):
            t = wema_update(t, [s, s, s], s, alpha)
            assert np.allclose(t - s, alpha ** n * (t0 - s), rtol=0, atol=1e-9)


def test_weighted_mode_has_only_alpha():
    assert EmaConfig(mode="weighted").hyperparameters() == {"alpha": 0.999}
    assert EmaConfig(mode="average").hyperparameters() == {"alpha": 0.999}
    assert EmaConfig().mode == "weighted" and EmaConfig().alpha == 0.999
    with pytest.raises(ValueError):
        EmaConfig(mode="median").validate()
    with pytest.raises(ValueError):
        EmaConfig(alpha=1.5).validate()


def _student(rng, h=4, d=3, c=2, k=3):
    adapter = init_affine(rng, h, d, 1.0)
    heads = [init_affine(rng, c + 1, h, 1.0) for _ in range(k)]
    cls = init_affine(rng, c + 1, h, 1.0)
    return adapter, heads, cls


def test_init_and_single_source_modes(rng):
    adapter, heads, cls = _student(rng)
    last = wet_init(adapter, heads, cls, EmaConfig(mode="single", source="oic_last"))
    assert np.array_equal(last.head.weight, heads[-1].weight)
    assert np.array_equal(last.adapter.weight, adapter.weight)
    assert last.adapter.weight is not adapter.weight
    via_cls = wet_init(adapter, heads, cls, EmaConfig(mode="single", source="cls"))
    assert np.array_equal(via_cls.head.weight, cls.weight)
    w = wet_init(adapter, heads, cls, EmaConfig(mode="weighted"))
    assert np.allclose(w.head.weight, 0.5 * (sum(h.weight for h in heads) / 3) + 0.5 * cls.weight, atol=1e-15)


def test_alpha_one_freezes_the_teacher(rng):
    adapter, heads, cls = _student(rng)
    cfg = EmaConfig(alpha=1.0)
    state = wet_init(adapter, heads, cls, cfg)
    snapshot = state.copy()
    for _ in range(5):
        adapter2, heads2, cls2 = _student(rng)
        state = wet_update(state, adapter2, heads2, cls2, cfg)
    for name, arr in state.named().items():
        assert np.array_equal(arr, snapshot.named()[name])


def test_teacher_posterior_columns_sum_to_one(rng):
    adapter, heads, cls = _student(rng)
    state = WetState(adapter, cls)
    probs = wet_forward(state, rng.normal(size=(3, 6)))
    assert probs.shape == (3, 6)
    assert np.allclose(probs.sum(axis=0), 1.0, atol=1e-12)


def test_affine_params_are_combined_fieldwise():
    a = AffineParams(np.array([[1.0]]), np.array([2.0]))
    b = AffineParams(np.array([[3.0]]), np.array([6.0]))
    out = ema_update(a, b, 0.5)
    assert out.weight.tolist() == [[2.0]] and out.bias.tolist() == [4.0]
