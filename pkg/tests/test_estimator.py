import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsketch import GSampler, SamplerConfig, estimate_mass
from gsketch.errors import ContractViolation
from gsketch.estimator import geometric_guesses, guess_and_verify
from gsketch.generators import gaussian
from gsketch.levels import n_levels
from gsketch.measures import Kind, MeasureSpec
from gsketch.oracle import ExactInstance

ROW = np.array([[1.0, 2.0, -1.0]])
X = np.array([0.2, 0.1, 0.4])


def single_row(seed, b=0.5):
    return GSampler(SamplerConfig(d=3, n=1), seed).insert([0], ROW, [b]).freeze()


def test_single_row_estimate_is_exact():
    exact = ExactInstance(ROW, np.array([0.5])).mass(X)
    assert estimate_mass(single_row(0), X, 0.5).value == pytest.approx(exact, rel=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_single_row_estimate_is_its_level_floor(seed):
    # one report, one level: the aggregate is that level's lower boundary
    sampler = single_row(seed)
    exact = ExactInstance(ROW, np.array([0.5])).mass(X)
    est = estimate_mass(sampler, X, 0.5)
    alpha = sampler.config.alpha
    assert exact / (1 + alpha) * (1 - 1e-12) <= est.value <= exact
    assert est.guess_used / 2 <= est.value <= 2 * est.guess_used


def test_zero_gradients_give_zero_mass():
    A, _ = gaussian(32, 4, seed=1)
    g = GSampler(SamplerConfig(d=4, n=32), 3).insert(np.arange(32), A, np.zeros(32)).freeze()
    est = estimate_mass(g, np.zeros(4), 0.5)
    assert est.value == 0.0 and est.guess_used == 0.0


def test_gaussian_ratio_band():
    inside = 0
    trials = 1000
    for s in range(trials):
        A, b = gaussian(64, 4, seed=s)
        g = GSampler(SamplerConfig(d=4, n=64, eps=0.5), seed=10_000 + s).insert(np.arange(64), A, b).freeze()
        x = np.random.default_rng(s).standard_normal(4)
        ratio = estimate_mass(g, x, 0.5).value / ExactInstance(A, b).mass(x)
        inside += 0.5 <= ratio <= 2.0
    assert inside >= 0.99 * trials


@given(st.integers(0, 2**31), st.sampled_from([-3.0, -0.5, 0.25, 2.0, 7.0]))
def test_l1_rescaling_leaves_the_ratio_unchanged(seed, c):
    # sgn(c r) a is c-free for c > 0 and flips sign for c < 0; norms never change
    A, b = gaussian(48, 3, seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal(3)
    m = MeasureSpec(Kind.L1)

    def ratio(scale):
        g = GSampler(SamplerConfig(d=3, n=48), seed).insert(np.arange(48), A, scale * b).freeze()
        return estimate_mass(g, scale * x, 0.5, m).value / ExactInstance(A, scale * b, m).mass(scale * x)

    assert ratio(c) == pytest.approx(ratio(1.0), rel=1e-9)


def test_query_before_freeze_is_rejected():
    g = GSampler(SamplerConfig(d=3, n=1), 0).insert([0], ROW, [0.5])
    with pytest.raises(ContractViolation):
        estimate_mass(g, X, 0.5)


def test_guess_and_verify_accepts_within_factor_two():
    rng = np.random.default_rng(4)
    norms = rng.exponential(size=40)
    alpha, n = 0.125, 40
    level_count = n_levels(n, alpha, 2.0)
    labels, guess, agg, _, _, status = guess_and_verify(
        norms, np.ones(40, int), np.zeros(40, int), np.full(40, 0.8), alpha, n, level_count)
    assert list(labels) == [0] and status[0] == 1
    assert guess[0] / 2 <= agg[0] <= 2 * guess[0]
    assert np.log2(guess[0]) == int(np.log2(guess[0]))


def test_all_zero_group_reports_status_zero():
    _, _, agg, _, _, status = guess_and_verify(np.zeros(3), np.ones(3, int), np.zeros(3, int),
                                               np.full(3, 0.8), 0.125, 8, 20)
    assert status[0] == 0 and agg[0] == 0.0


def test_geometric_guesses():
    assert geometric_guesses(1.0, 5.0) == [8.0, 4.0, 2.0, 1.0]
    assert geometric_guesses(0.0, 5.0) == []
