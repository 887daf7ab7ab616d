import math

import numpy as np
import pytest

from library.config import QUADRATIC_SLOPE_BAND
from library.errors import InputError, DivergenceError
from service import theory
from service.theory import RegressionProblem, RegressionEnsembleState


def random_problem(rng, d=4, M=10, Nt=6, mu=None):
    X = rng.standard_normal((d, M))
    problem = RegressionProblem(X, rng.standard_normal(M), rng.standard_normal((d, Nt)),
                                rng.standard_normal(Nt), 1.0)
    return problem.with_mu(1.0 / problem.eigenvalues[-1] if mu is None else mu)


def state_of(*rows, step=0):
    return RegressionEnsembleState(np.atleast_2d(np.array(rows, dtype=float)), step)


def in_band(value):
    return QUADRATIC_SLOPE_BAND[0] <= value <= QUADRATIC_SLOPE_BAND[1]


# ---------------------------------------------------------------------------
# Problem and gradient step
# ---------------------------------------------------------------------------

def test_scalar_gradient_step():
    problem = RegressionProblem([[1.0]], [2.0], [[1.0]], [0.0], 0.1)
    after = theory.gd_step(state_of([0.0]), problem)
    assert after.W[0, 0] == pytest.approx(0.2)
    assert after.step == 1


def test_closed_form_is_a_fixed_point():
    rng = np.random.default_rng(1)
    problem = random_problem(rng)
    state = state_of(problem.closed_form("train"), problem.closed_form("train"))
    np.testing.assert_allclose(theory.gd_step(state, problem).W, state.W, atol=1e-10)


def test_zero_learning_rate_leaves_state_unchanged():
    rng = np.random.default_rng(2)
    problem = random_problem(rng)
    state = theory.init_state(problem, 4, seed=3)
    after = theory.gd_step(state, problem, mu=0.0)
    np.testing.assert_array_equal(after.W, state.W)
    assert not theory.overfit_indicator(state, after, problem, 0)


def test_gradient_matches_finite_differences_of_loss():
    rng = np.random.default_rng(3)
    problem = random_problem(rng)
    state = theory.init_state(problem, 3, init_scale=1.0, seed=4)
    for i in range(3):
        analytic = theory.cross_gradient(state, problem, i, "train")
        numeric = np.empty(problem.dim)
        for k in range(problem.dim):
            bump = np.zeros(problem.dim)
            bump[k] = 1e-6
            numeric[k] = (theory.loss(state.W[i] + bump, problem)
                          - theory.loss(state.W[i] - bump, problem)) / 2e-6
        assert np.linalg.norm(analytic - numeric) <= 1e-6 * np.linalg.norm(analytic)


def test_cross_gradient_forms_agree():
    rng = np.random.default_rng(4)
    for _ in range(20):
        problem = random_problem(rng)
        state = theory.init_state(problem, 2, init_scale=1.0, seed=int(rng.integers(1000)))
        for target in ("train", "test"):
            covariance = theory.cross_gradient(state, problem, 1, target)
            error = theory.cross_gradient(state, problem, 1, target, form="error")
            np.testing.assert_allclose(covariance, error, rtol=1e-12, atol=1e-12 * np.abs(error).max())


def test_cross_gradients_vanish_at_closed_forms():
    rng = np.random.default_rng(5)
    problem = random_problem(rng, Nt=8)
    state = state_of(problem.closed_form("train"), problem.closed_form("test"))
    np.testing.assert_allclose(theory.cross_gradient(state, problem, 0, "train"), 0.0, atol=1e-8)
    np.testing.assert_allclose(theory.cross_gradient(state, problem, 1, "test"), 0.0, atol=1e-8)
    with pytest.raises(InputError):
        theory.cross_gradient(state, problem, 2)
    with pytest.raises(InputError):
        theory.cross_gradient(state, problem, 0, "validation")


def test_divergence_reported_with_step():
    problem = RegressionProblem([[1.0]], [1.0], [[1.0]], [1.0], 1e308)
    with pytest.raises(DivergenceError, match="step 1"):
        with np.errstate(all="ignore"):
            theory.gd_step(state_of([1e10]), problem)


def test_spectral_preconditions():
    rng = np.random.default_rng(6)
    problem = random_problem(rng)
    limit = problem.max_stable_learning_rate()
    assert limit == pytest.approx(2.0 / problem.eigenvalues[-1])
    assert problem.contraction_norm(limit) == pytest.approx(1.0)
    assert problem.validate() is problem
    with pytest.raises(InputError):
        problem.with_mu(limit * 1.01).validate()
    with pytest.raises(InputError):
        theory.theorem_check(problem.with_mu(limit * 1.001), size=4, s_max=2)

    singular = RegressionProblem(rng.standard_normal((4, 3)), np.zeros(3), np.eye(4), np.zeros(4), 0.01)
    with pytest.raises(InputError):
        singular.validate()
    with pytest.raises(InputError):
        RegressionProblem(np.eye(2), [1.0], np.eye(2), [1.0, 2.0], 0.1)


# ---------------------------------------------------------------------------
# Errors and the overfit indicator
# ---------------------------------------------------------------------------

def test_scalar_test_error():
    problem = RegressionProblem([[1.0]], [0.0], [[1.0, 2.0]], [0.0, 0.0], 0.1)
    e, squared = theory.test_error(state_of([1.0]), problem, 0)
    assert e.tolist() == [1.0, 2.0]
    assert squared == 5.0


def test_interpolating_model_has_zero_errors():
    rng = np.random.default_rng(7)
    w_star = rng.standard_normal(3)
    X, Xt = rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
    problem = RegressionProblem(X, w_star @ X, Xt, w_star @ Xt, 0.01)
    state = state_of(w_star)
    assert theory.test_error(state, problem, 0)[1] == pytest.approx(0.0, abs=1e-20)
    assert theory.train_error(state, problem, 0)[1] == pytest.approx(0.0, abs=1e-20)


def test_test_error_ignores_column_order():
    rng = np.random.default_rng(8)
    problem = random_problem(rng)
    order = rng.permutation(problem.Xt.shape[1])
    shuffled = RegressionProblem(problem.X, problem.y, problem.Xt[:, order], problem.yt[order], problem.mu)
    state = theory.init_state(problem, 1, init_scale=1.0)
    assert theory.test_error(state, shuffled, 0)[1] == pytest.approx(theory.test_error(state, problem, 0)[1])


def test_noiseless_realizable_problem_never_overfits():
    rng = np.random.default_rng(9)
    w_star = rng.standard_normal(3)
    X = rng.standard_normal((3, 12))
    problem = RegressionProblem(X, w_star @ X, X, w_star @ X, 0.0)
    problem = problem.with_mu(0.1 / problem.eigenvalues[-1])
    state = theory.init_state(problem, 2, init_scale=1.0, seed=1)
    for _ in range(200):
        after = theory.gd_step(state, problem)
        assert not theory.overfit_indicator(state, after, problem, 0)
        assert not theory.overfit_indicator(state, after, problem, 1)
        state = after


def test_conflicting_targets_overfit():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    y = rng.standard_normal(3)
    problem = RegressionProblem(X, y, X, -y, 0.0)
    problem = problem.with_mu(1.0 / problem.eigenvalues[-1])
    state = theory.run_steps(theory.init_state(problem, 1, init_scale=0.0), problem, 2000)
    after = theory.gd_step(state, problem)
    assert theory.train_error(state, problem, 0)[1] < 1e-6
    first = theory.gd_step(theory.init_state(problem, 1, init_scale=0.0), problem)
    assert theory.overfit_indicator(theory.init_state(problem, 1, init_scale=0.0), first, problem, 0)
    assert theory.test_error(after, problem, 0)[1] == pytest.approx(4 * float(y @ y), rel=1e-6)


def test_overfit_indicator_needs_consecutive_states():
    rng = np.random.default_rng(11)
    problem = random_problem(rng)
    state = theory.init_state(problem, 1)
    with pytest.raises(InputError):
        theory.overfit_indicator(state, theory.run_steps(state, problem, 2), problem, 0)


# ---------------------------------------------------------------------------
# Lemma 1
# ---------------------------------------------------------------------------

def test_lemma1_sign_and_quadratic_residual_on_random_states():
    rng = np.random.default_rng(12)
    for _ in range(100):
        problem = random_problem(rng)
        state = RegressionEnsembleState(rng.standard_normal((1, problem.dim)))
        report = theory.lemma1_check(state, problem, 0)
        assert in_band(report.residual_exponent)
        below = report.mus < 0.99 * report.analytic_threshold
        assert report.agrees[below].all()
        if report.correlation < 0:
            assert report.agrees.all()
            assert math.isinf(report.analytic_threshold)
        assert report.mu_star <= report.analytic_threshold


def test_lemma1_small_step_overfits_when_gradients_anticorrelate():
    rng = np.random.default_rng(13)
    found = 0
    while found < 5:
        problem = random_problem(rng)
        state = RegressionEnsembleState(rng.standard_normal((1, problem.dim)))
        correlation = theory.cross_gradient(state, problem, 0, "train") @ \
            theory.cross_gradient(state, problem, 0, "test")
        if correlation > -1e-3:
            continue
        after = theory.gd_step(state, problem, mu=1e-6)
        assert theory.overfit_indicator(state, after, problem, 0)
        found += 1


def test_lemma1_orthogonal_gradients_change_error_quadratically():
    problem = RegressionProblem(np.eye(2), [1.0, 0.0], np.eye(2), [0.0, 1.0], 0.01)
    mus = np.array([1e-3, 1e-2, 1e-1])
    report = theory.lemma1_check(state_of([0.0, 0.0]), problem, 0, mus)
    assert report.correlation == 0.0
    np.testing.assert_allclose(report.error_changes, mus ** 2, rtol=1e-12)
    np.testing.assert_allclose(report.residuals, mus ** 2, rtol=1e-12)


# ---------------------------------------------------------------------------
# Lemma 2
# ---------------------------------------------------------------------------

@pytest.fixture
def planted_problem():
    rng = np.random.default_rng(14)
    w_star = rng.standard_normal(3)
    w_star /= np.linalg.norm(w_star)
    X = rng.standard_normal((3, 10))
    problem = RegressionProblem(X, w_star @ X + 0.1 * rng.standard_normal(10), np.eye(3), w_star, 0.0)
    return problem.with_mu(1.0 / problem.eigenvalues[-1])


def test_one_step_from_zero(planted_problem):
    state = theory.gd_step(theory.init_state(planted_problem, 1, init_scale=0.0), planted_problem)
    np.testing.assert_allclose(state.W[0], planted_problem.mu * planted_problem.sigma_yx, rtol=1e-14)


def test_zero_init_converges_to_closed_form(planted_problem):
    steps = math.ceil(math.log(1e-9) / math.log(planted_problem.contraction_norm())) + 1
    report = theory.lemma2_check(planted_problem, 1, steps, init_scale=0.0)
    assert report.tail < 1e-9
    assert report.deviation < 1e-8
    assert report.passed


@pytest.mark.parametrize("size", [16, 64, 256])
@pytest.mark.parametrize("steps", [0, 5, 50])
def test_random_init_mean_within_envelope(planted_problem, size, steps):
    report = theory.lemma2_check(planted_problem, size, steps, seed=size + steps)
    assert report.passed


def test_doubling_steps_squares_the_tail(planted_problem):
    short = theory.lemma2_check(planted_problem, 16, 20)
    long = theory.lemma2_check(planted_problem, 16, 40)
    assert long.tail == pytest.approx(short.tail ** 2, rel=1e-9)


def test_lemma2_checks_the_spectral_condition(planted_problem):
    with pytest.raises(InputError):
        theory.lemma2_check(planted_problem.with_mu(planted_problem.max_stable_learning_rate()), 4, 10)


# ---------------------------------------------------------------------------
# Disagreement
# ---------------------------------------------------------------------------

def test_two_model_disagreement_by_hand():
    problem = RegressionProblem([[1.0]], [0.0], [[1.0]], [0.0], 0.1)
    value = theory.disagreement(state_of([0.0], [2.0]), problem)
    assert value.pairwise == pytest.approx(1.0)
    assert value.variance == pytest.approx(1.0)
    assert float(value) == pytest.approx(1.0)


def test_disagreement_forms_agree_and_shift_invariance():
    rng = np.random.default_rng(15)
    for _ in range(20):
        problem = random_problem(rng, Nt=9)
        state = theory.init_state(problem, 7, init_scale=1.0, seed=int(rng.integers(1000)))
        value = theory.disagreement(state, problem)
        assert abs(value.pairwise - value.variance) <= 1e-10 * max(1.0, value.pairwise)
        shifted = RegressionProblem(problem.X, problem.y, problem.Xt, problem.yt + 5.0, problem.mu)
        assert theory.disagreement(state, shifted).variance == pytest.approx(value.variance, rel=1e-10)


def test_identical_models_do_not_disagree():
    rng = np.random.default_rng(16)
    problem = random_problem(rng)
    row = rng.standard_normal(problem.dim)
    assert theory.disagreement(state_of(row, row, row), problem).pairwise == 0.0
    with pytest.raises(InputError):
        theory.disagreement(state_of(row), problem)


def test_decomposition_is_an_exact_identity():
    rng = np.random.default_rng(17)
    for _ in range(20):
        problem = random_problem(rng, Nt=8)
        state = theory.init_state(problem, 6, init_scale=1.0, seed=int(rng.integers(1000)))
        parts = theory.decompose_disagreement_change(state, problem)
        before = theory.disagreement(state, problem).variance
        after = theory.disagreement(theory.gd_step(state, problem), problem).variance
        expected = parts.predicted_change(problem.mu) + parts.remainder
        assert after - before == pytest.approx(expected, rel=1e-8, abs=1e-10 * max(1.0, before))


def test_mismatched_disagreement_forms_raise(monkeypatch):
    problem = RegressionProblem([[1.0]], [0.0], [[1.0]], [0.0], 0.1)
    monkeypatch.setattr(theory, "_variance_sum", lambda rows: 2.0)
    with pytest.raises(DivergenceError, match="forms disagree"):
        theory.disagreement(state_of([0.0], [2.0]), problem)


# ---------------------------------------------------------------------------
# Engineered overfit instances and the main theorem
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_problem():
    return theory.make_overfit_instance(d=20, M=40, Nt=200, label_noise=1.0, seed=0)


@pytest.fixture(scope="module")
def theorem_report(overfit_problem):
    return theory.theorem_check(overfit_problem, size=64, s_max=2000, seed=3)


def test_overfit_instance_properties(overfit_problem):
    p = overfit_problem
    np.testing.assert_allclose(p.closed_form("test") @ p.Xt, p.yt, atol=1e-9)
    least_squares = np.linalg.lstsq(p.X.T, p.y, rcond=None)[0]
    np.testing.assert_allclose(p.closed_form("train"), least_squares, rtol=1e-8, atol=1e-10)
    assert p.seed is not None
    assert p.contraction_norm() < 1.0


def test_overfit_instance_test_design_is_anisotropic_and_rotated(overfit_problem):
    p = overfit_problem
    spectrum = np.linalg.eigvalsh(p.sigma_tt)
    assert spectrum[-1] > 10 * spectrum[0]
    # Sigma_tt does not commute with Sigma_XX, so the two share no eigenbasis
    commutator = p.sigma_xx @ p.sigma_tt - p.sigma_tt @ p.sigma_xx
    assert np.linalg.norm(commutator) > 0.01 * np.linalg.norm(p.sigma_xx) * np.linalg.norm(p.sigma_tt)


def test_overfit_instance_preconditions():
    with pytest.raises(InputError):
        theory.make_overfit_instance(d=5, M=4, Nt=10, label_noise=1.0)
    with pytest.raises(InputError):
        theory.make_overfit_instance(d=5, M=10, Nt=4, label_noise=1.0)


def test_theorem_identity_and_quadratic_order(theorem_report):
    report = theorem_report
    assert in_band(report.quadratic_exponent)
    scale = float(np.max(report.disagreement))
    np.testing.assert_allclose(report.approximation_error, report.remainder, rtol=1e-6, atol=1e-11 * scale)


def test_every_certified_step_is_asserted(theorem_report):
    report = theorem_report
    delta = dict(zip(report.steps.tolist(), report.delta_disagreement.tolist()))
    assert report.certified_steps
    assert set(report.regime_steps) <= set(report.certified_steps)
    assert report.violations == tuple(s for s in report.certified_steps if delta[s] <= 0)
    assert report.increase_on_certified == tuple(s for s in report.certified_steps if delta[s] > 0)
    assert report.holds == (report.violations == ())


def test_large_ensemble_disagreement_decays_in_expectation(overfit_problem, theorem_report):
    expected = theorem_report.expected_disagreement
    assert np.all(np.diff(expected) < 0)
    at_start = theory.expected_disagreement(overfit_problem, 64, 0)
    scale = 0.1 / np.sqrt(20)
    assert at_start[0] == pytest.approx((1 - 1 / 64) * scale ** 2 * np.trace(overfit_problem.sigma_tt))


def test_expected_disagreement_matches_many_ensembles():
    rng = np.random.default_rng(18)
    problem = random_problem(rng, Nt=8)
    problem = problem.with_mu(0.5 / problem.eigenvalues[-1])
    measured = []
    for seed in range(400):
        state = theory.run_steps(theory.init_state(problem, 4, seed=seed), problem, 5)
        measured.append(theory.disagreement(state, problem).variance)
    expected = theory.expected_disagreement(problem, 4, 5)[0]
    assert np.mean(measured) == pytest.approx(expected, rel=0.15)


def fixed_mean_problem(size, seed):
    """Two-dimensional instance whose train and test minimisers both sit at the initial ensemble mean.

    The mean model never moves and has zero test error, so every model's test
    error is its own share of the disagreement.
    """
    base = RegressionProblem(np.eye(2), [0.0, 0.0], np.eye(2), [0.0, 0.0], 0.1)
    W0 = theory.init_state(base, size, seed=seed).W
    mean = W0.mean(axis=0)
    spread = W0[0] - mean
    X = np.diag([1.0, 10.0])
    # test direction chosen so model 0's test residual is a1^s - 2 a2^s: it crosses zero, then grows
    Xt = np.array([[1.0 / spread[0]], [-2.0 / spread[1]]])
    return RegressionProblem(X, mean @ X, Xt, mean @ Xt, 0.005)


def test_disagreement_rises_on_every_certified_step():
    report = theory.theorem_check(fixed_mean_problem(2, seed=4), size=2, s_max=60, seed=4)
    assert report.certified_steps == (2, 3, 4, 5, 6, 7, 8)
    assert report.increase_on_certified == report.certified_steps
    assert report.violations == ()
    assert report.holds
    assert np.all(report.delta_disagreement[8:] < 0)


def test_no_overfit_and_negligible_c_prime_shrink_disagreement():
    rng = np.random.default_rng(19)
    X = rng.standard_normal((20, 40))
    # test inputs equal to the train inputs with zero targets: every model's test error only falls
    problem = RegressionProblem(X, np.zeros(40), X, np.zeros(40), 0.0)
    problem = problem.with_mu(1.0 / problem.eigenvalues[-1])
    report = theory.theorem_check(problem, size=64, s_max=200, seed=3)
    assert np.all(report.overfit_fraction == 0.0)
    quiet = np.abs(report.c_prime) <= 0.05 * np.abs(report.c_double_prime)
    assert quiet.sum() > 10
    assert np.all(report.delta_disagreement[quiet] < 0)


def test_disagreement_change_tracks_minus_mu_c_double_prime():
    rng = np.random.default_rng(20)
    X = rng.standard_normal((20, 40))
    problem = RegressionProblem(X, np.zeros(40), X, np.zeros(40), 0.0)
    problem = problem.with_mu(0.05 / problem.eigenvalues[-1])
    report = theory.theorem_check(problem, size=64, s_max=100, seed=3)
    quiet = np.abs(report.c_prime) <= 0.05 * np.abs(report.c_double_prime)
    assert quiet.any()
    first_order = -problem.mu * report.c_double_prime[quiet]
    relative = np.abs(report.delta_disagreement[quiet] - first_order) / np.abs(first_order)
    assert np.all(relative <= 0.10)


def test_noiseless_instance_never_overfits():
    problem = theory.make_overfit_instance(d=10, M=20, Nt=50, label_noise=0.0, seed=1)
    report = theory.theorem_check(problem, size=16, s_max=300, seed=2)
    assert report.certified_steps == ()
    assert report.holds


def test_c_prime_decays_with_ensemble_size_and_steps(overfit_problem):
    grid = [(8, 50), (16, 100), (32, 200), (64, 400)]
    values = [c for _, _, c in theory.c_prime_sweep(overfit_problem, grid, seed=5)]
    assert values[0] > values[-1]
    assert np.mean(values[:2]) > np.mean(values[2:])


def test_report_serialises(theorem_report):
    data = theorem_report.to_dict()
    assert len(data["per_step"]["step"]) == 2000
    assert len(data["per_step"]["expected_disagreement"]) == 2000
    assert data["holds"] is theorem_report.holds
    assert data["violations"] == list(theorem_report.violations)
