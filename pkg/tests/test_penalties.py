import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from r2learn.errors import ConfigError, ContractError
from r2learn.numerics import check_gradient
from r2learn.penalties import (CoefficientMatrix, SipParams, complexity_stat, gamma_smoothed,
                               integrativeness_exact, sip_exact, sip_smoothed, sip_smoothed_gradient)


def test_integrativeness_examples():
    assert integrativeness_exact(np.zeros((4, 3))).tolist() == [0, 0, 0]
    assert integrativeness_exact(np.ones((4, 3))).tolist() == [4, 4, 4]
    B = np.zeros((4, 3))
    B[[0, 1], 0] = 0.3
    B[:, 1] = -2.0
    assert integrativeness_exact(B).tolist() == [2, 4, 0]


def test_zero_tol():
    B = np.array([[1e-9, 2e-8], [0.0, 0.0]])
    assert integrativeness_exact(B).tolist() == [0, 1]
    assert integrativeness_exact(CoefficientMatrix(B, zero_tol=1e-10)).tolist() == [1, 1]


def test_sip_exact_examples():
    assert sip_exact([4, 4, 4], 4) == 0.0
    assert sip_exact([1, 1, 1, 1, 1], 4) == 5.0
    assert sip_exact([0, 0, 0], 4) == 3.0
    assert sip_exact([2, 4, 0], 4) == pytest.approx(5 / 3, abs=1e-12)


def test_sip_needs_two_sources():
    with pytest.raises(ConfigError):
        sip_exact([1], 1)
    with pytest.raises(ConfigError):
        sip_smoothed(np.ones((1, 2)), SipParams(0.5))
    with pytest.raises(ConfigError):
        sip_smoothed_gradient(np.ones((1, 2)), SipParams(0.5))


def test_gamma_smoothed_examples():
    assert gamma_smoothed(np.zeros((3, 2)), 0.5).tolist() == [0.0, 0.0]
    assert gamma_smoothed(np.full((3, 2), 0.7), 0.5).tolist() == [3.0, 3.0]
    col = np.array([[0.2], [1.0], [0.0]])
    assert gamma_smoothed(col, 0.5)[0] == pytest.approx(1.4, abs=1e-12)


def test_sip_smoothed_examples():
    p = SipParams(tau=0.5)
    assert sip_smoothed(np.zeros((4, 3)), p) == 3.0
    B = np.array([[0.6, 0.0], [-2.0, 0.0], [0.0, 0.9], [0.0, 0.0]])
    assert sip_smoothed(B, p) == sip_exact(integrativeness_exact(B), 4)
    col = np.array([[0.2], [1.0], [0.0], [0.0]])
    assert sip_smoothed(col, p) == pytest.approx(13 / 15, abs=1e-12)


def test_gradient_zero_cases():
    p = SipParams(tau=0.5)
    assert np.all(sip_smoothed_gradient(np.zeros((3, 2)), p) == 0.0)
    assert np.all(sip_smoothed_gradient(np.full((3, 2), -0.9), p) == 0.0)


def test_complexity_examples():
    assert complexity_stat([0, 0, 0]) == 0.0
    assert complexity_stat([4, 4]) == 4.0
    assert complexity_stat([4, 0]) < complexity_stat([2, 2])
    assert complexity_stat([2, 2]) == pytest.approx(2 * np.sqrt(2))


def test_param_validation():
    with pytest.raises(ConfigError):
        SipParams(tau=0.0)
    with pytest.raises(ConfigError):
        SipParams(lambda2=-1.0)
    with pytest.raises(ContractError):
        CoefficientMatrix(np.array([[np.inf]]))
    with pytest.raises(ContractError):
        sip_exact([5], 4)


mats = st.integers(2, 6).flatmap(lambda S: st.integers(1, 6).flatmap(
    lambda D: arrays(np.float64, (S, D), elements=st.sampled_from([0.0, 0.05, -0.3, 1.2, -2.0, 0.49]))))


@given(mats, st.floats(0.01, 2.0))
def test_bounds(B, tau):
    S, D = B.shape
    assert 0.0 <= sip_exact(integrativeness_exact(B), S) <= D
    assert 0.0 <= sip_smoothed(B, SipParams(tau)) <= D + 1e-12


@given(mats, st.floats(0.1, 10.0))
def test_exact_is_scale_invariant(B, c):
    S = B.shape[0]
    assert sip_exact(integrativeness_exact(c * B), S) == sip_exact(integrativeness_exact(B), S)


@given(mats)
def test_low_integrativeness_contributes_one(B):
    gamma = integrativeness_exact(B)
    S = B.shape[0]
    per_col = np.minimum(1.0, (S - gamma) / (S - 1.0))
    assert np.all(per_col[gamma <= 1] == 1.0)


def test_smoothed_tends_to_exact():
    gen = np.random.default_rng(0)
    B = gen.choice([0.0, 1.0], size=(5, 7)) * gen.uniform(0.2, 1.0, size=(5, 7))
    exact = sip_exact(integrativeness_exact(B), 5)
    for tau in (1e-1, 1e-2, 1e-3):
        assert sip_smoothed(B, SipParams(tau)) == pytest.approx(exact, abs=1e-12)


def test_smoothed_nonincreasing_toward_tau():
    B = np.array([[0.05, 0.0], [0.3, 0.0], [0.2, 0.1]])
    p = SipParams(tau=0.5)
    prev = sip_smoothed(B, p)
    for v in np.linspace(0.05, 0.6, 12):
        B2 = B.copy()
        B2[0, 0] = v
        cur = sip_smoothed(B2, p)
        assert cur <= prev + 1e-15
        prev = cur


def _away_from_kinks(gen, S, D, tau):
    while True:
        mag = gen.uniform(0.05 * tau, 2 * tau, size=(S, D))
        mag[np.abs(mag - tau) < 2e-3 * tau] += 0.01 * tau
        B = np.sign(gen.standard_normal((S, D))) * mag * (gen.random((S, D)) < 0.7)
        g = gamma_smoothed(B, tau)
        if np.all(np.abs(g - 1.0) > 1e-3):
            return B


@pytest.mark.parametrize("trial", range(10))
def test_gradient_matches_finite_differences(trial):
    gen = np.random.default_rng(trial)
    tau = 0.4
    B = _away_from_kinks(gen, 5, 4, tau)
    p = SipParams(tau)
    err = check_gradient(lambda b: sip_smoothed(b, p), B, sip_smoothed_gradient(B, p), step=1e-7)
    assert err < 1e-6


@settings(max_examples=200)
@given(mats, st.floats(0.05, 1.0))
def test_gradient_sign_pushes_toward_integration(B, tau):
    g = sip_smoothed_gradient(B, SipParams(tau))
    # moving along -g grows |beta|, never shrinks it
    assert np.all(g * B <= 0.0)
