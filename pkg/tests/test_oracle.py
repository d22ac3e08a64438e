import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsketch.errors import ContractViolation, UndefinedDistribution
from gsketch.generators import example1, gaussian
from gsketch.levels import level_lower, level_upper
from gsketch.measures import Kind, MeasureSpec
from gsketch.oracle import (
    ExactInstance,
    exact_importance_distribution,
    exact_level_sets,
    exact_second_moments,
    exact_variances,
    frobenius_distribution,
    least_squares_optimum,
    total_variation,
)


def test_single_nonzero_gradient_gives_indicator():
    A, b = example1(16, 3, seed=2)
    p = exact_importance_distribution(ExactInstance(A, b), np.zeros(3))
    assert p[0] == 1.0 and p[1:].sum() == 0.0


def test_two_rows_with_norms_one_and_three():
    # L2 data term at x = 0 is -2 b a; rows chosen so the norms are 1 and 3
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([-0.5, -1.5])
    p = exact_importance_distribution(ExactInstance(A, b), np.zeros(2))
    assert p == pytest.approx([0.25, 0.75], abs=1e-15)


def test_zero_mass_is_undefined():
    inst = ExactInstance(np.ones((4, 2)), np.zeros(4))
    with pytest.raises(UndefinedDistribution):
        exact_importance_distribution(inst, np.zeros(2))


@given(st.integers(1, 50), st.integers(1, 6), st.integers(0, 2**31))
def test_distribution_sums_to_one(n, d, seed):
    A, b = gaussian(n, d, seed=seed)
    x = np.random.default_rng(seed).standard_normal(d)
    p = exact_importance_distribution(ExactInstance(A, b), x)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all()


def test_equal_gradients_give_equal_variances():
    A = np.tile([[1.0, 2.0]], (8, 1))
    inst = ExactInstance(A, np.ones(8))
    opt, uni = exact_variances(inst, np.array([0.3, -0.1]))
    assert opt == pytest.approx(uni, abs=1e-12)


@given(st.integers(2, 40), st.integers(1, 5), st.integers(0, 2**31))
def test_importance_variance_never_exceeds_uniform(n, d, seed):
    A, b = gaussian(n, d, seed=seed)
    x = np.random.default_rng(seed + 1).standard_normal(d)
    opt, uni = exact_variances(ExactInstance(A, b), x)
    assert opt <= uni * (1 + 1e-12) + 1e-12


def test_second_moments_of_single_row_instance_differ_by_n():
    n = 256
    A, b = example1(n, 8, seed=1)
    mom = exact_second_moments(ExactInstance(A, b), np.zeros(8))
    assert mom.sigma2_uni == pytest.approx(n * mom.sigma2_opt, rel=1e-12)


def test_variances_match_monte_carlo_for_small_instance(rng):
    # direct enumeration of the one-sample estimator
    A, b = gaussian(5, 2, seed=7)
    inst = ExactInstance(A, b)
    x = np.array([0.4, -0.2])
    G = inst.gradients(x)
    n = len(A)
    mean = G.mean(axis=0)
    p = exact_importance_distribution(inst, x)
    opt = sum(p[i] * np.sum((G[i] / (n * p[i]) - mean) ** 2) for i in range(n))
    uni = sum(np.sum((G[i] - mean) ** 2) for i in range(n)) / n
    got = exact_variances(inst, x)
    assert got.sigma2_opt == pytest.approx(opt, rel=1e-12)
    assert got.sigma2_uni == pytest.approx(uni, rel=1e-12)


def test_level_sets_single_row():
    inst = ExactInstance(np.array([[1.0, 0.0]]), np.array([-1.0]))
    norm = inst.norms(np.zeros(2))[0]
    sets = exact_level_sets(inst, np.zeros(2), shift=0.5, alpha=0.5, guess=norm, level_count=8)
    j = sets.level[0]
    assert level_lower(j, 0.5, 0.5, norm) <= norm < level_upper(j, 0.5, 0.5, norm)
    assert sets.counts.sum() == 1 and sets.masses[j] == norm


def test_level_sets_two_levels():
    # norms 2 and 0.5 with top 8 * 0.5 * 1 = 4 and alpha = 1: levels [2, 4) and [0.5, 1)
    A = np.eye(2)
    b = np.array([-1.0, -0.25])
    sets = exact_level_sets(ExactInstance(A, b), np.zeros(2), shift=0.5, alpha=1.0, guess=1.0, level_count=6)
    assert sets.level.tolist() == [0, 2]
    assert sets.lower_masses[0] == 2.0 and sets.lower_masses[2] == 0.5


@given(st.integers(0, 2**31), st.floats(0.5, 0.999), st.floats(0.05, 0.5))
def test_level_sets_respect_boundaries(seed, shift, alpha):
    A, b = gaussian(30, 3, seed=seed)
    inst = ExactInstance(A, b)
    x = np.zeros(3)
    M = inst.mass(x)
    sets = exact_level_sets(inst, x, shift, alpha, M, level_count=60)
    norms = inst.norms(x)
    for j, v in zip(sets.level, norms):
        if j >= 0:
            assert level_lower(j, shift, alpha, M) <= v < level_upper(j, shift, alpha, M)
    assert sets.masses.sum() <= M * (1 + 1e-12)


def test_frobenius_distribution_order_three_uses_residual_weights():
    A, b = gaussian(6, 2, seed=3)
    inst = ExactInstance(A, b)
    x = np.array([0.1, 0.2])
    r = A @ x - b
    w = np.abs(r) * np.sum(A * A, axis=1)
    assert frobenius_distribution(inst, x, 3) == pytest.approx(w / w.sum(), rel=1e-12)
    sq = np.sum(A * A, axis=1)
    assert frobenius_distribution(inst, x, 2) == pytest.approx(sq / sq.sum(), rel=1e-12)


def test_least_squares_optimum_zeroes_gradient():
    A, b = gaussian(40, 4, seed=5)
    x = least_squares_optimum(A, b)
    assert np.abs(ExactInstance(A, b).mean_gradient(x)).max() < 1e-12


def test_total_variation():
    assert total_variation([0.5, 0.5], [1.0, 0.0]) == 0.5


def test_desk_scale_guard():
    with pytest.raises(ContractViolation):
        ExactInstance(np.zeros((3, 65)), np.zeros(3))


def test_objective_includes_regularizer():
    spec = MeasureSpec(Kind.RIDGE, lam=0.5)
    inst = ExactInstance(np.eye(2), np.zeros(2), spec)
    x = np.array([1.0, 1.0])
    assert inst.objective(x) == pytest.approx(1.0 + 0.5 * 2.0)
