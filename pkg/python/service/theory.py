"""
Ensembles of linear regression models trained by full-batch gradient descent.

Notation follows the usual regression setup: X is d x M with examples as
columns, y is a row vector, W(i) is the row vector of model i. Every model
shares the training set; models differ only in their random initialisation.
`RegressionEnsembleState.step` counts GD updates taken from the initial
weights.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from library.config import (DEFAULT_ENSEMBLE_SIZE, INIT_SCALE_FACTOR, MU_FIT_RANGE, MU_FIT_POINTS,
                            REGIME_C_PRIME_RATIO, LEMMA2_ENVELOPE_FACTOR, OVERFIT_SEARCH_TRIES,
                            OVERFIT_RISE_STEPS, OVERFIT_MIN_RISE, TEST_DESIGN_SCALES,
                            DISAGREEMENT_FORM_TOLERANCE, make_generator)
from library.errors import InputError, DivergenceError

logger = logging.getLogger(__name__)

TARGETS = ("train", "test")


@dataclass(frozen=True, eq=False)
class RegressionProblem:
    X: np.ndarray
    y: np.ndarray
    Xt: np.ndarray
    yt: np.ndarray
    mu: float
    seed: int = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        Xt = np.atleast_2d(np.asarray(self.Xt, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        yt = np.asarray(self.yt, dtype=np.float64).reshape(-1)
        if X.shape[1] != y.size or Xt.shape[1] != yt.size or X.shape[0] != Xt.shape[0]:
            raise InputError(f"inconsistent shapes X{X.shape} y{y.shape} Xt{Xt.shape} yt{yt.shape}")
        for name, value in (("X", X), ("y", y), ("Xt", Xt), ("yt", yt)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def dim(self):
        return self.X.shape[0]

    @cached_property
    def sigma_xx(self):
        return self.X @ self.X.T

    @cached_property
    def sigma_yx(self):
        return self.y @ self.X.T

    @cached_property
    def sigma_tt(self):
        return self.Xt @ self.Xt.T

    @cached_property
    def sigma_yt(self):
        return self.yt @ self.Xt.T

    @cached_property
    def eigenvalues(self):
        """Eigenvalues of the symmetric PSD matrix Sigma_XX, ascending."""
        return np.linalg.eigvalsh(self.sigma_xx)

    def contraction_norm(self, mu=None):
        """Operator norm ||I - mu Sigma_XX||, exact from the eigenvalues."""
        mu = self.mu if mu is None else mu
        return float(np.max(np.abs(1.0 - mu * self.eigenvalues)))

    def max_stable_learning_rate(self):
        """Supremum of the learning rates with ||I - mu Sigma_XX|| < 1, that is 2 / lambda_max."""
        return 2.0 / float(self.eigenvalues[-1])

    def closed_form(self, target="train"):
        """Sigma_YX Sigma_XX^-1 for the train or the test set."""
        if target == "train":
            return np.linalg.solve(self.sigma_xx, self.sigma_yx)
        return np.linalg.solve(self.sigma_tt, self.sigma_yt)

    def validate(self):
        lam = self.eigenvalues
        if lam[0] <= 1e-12 * max(lam[-1], 1.0):
            raise InputError(f"Sigma_XX is singular (rank < d={self.dim}); need M >= d full-rank inputs")
        norm = self.contraction_norm()
        if norm >= 1.0:
            raise InputError(f"||I - mu Sigma_XX|| = {norm:.6g} >= 1; the norm lemma needs "
                             f"mu < {self.max_stable_learning_rate():.6g}")
        return self

    def with_mu(self, mu):
        return replace(self, mu=mu)


@dataclass(frozen=True, eq=False)
class RegressionEnsembleState:
    W: np.ndarray
    step: int = 0
    init_seed: int = None

    @property
    def size(self):
        return self.W.shape[0]


def init_state(problem, size=DEFAULT_ENSEMBLE_SIZE, init_scale=None, seed=0):
    """Q mean-zero Gaussian inits with std init_scale (default 0.1 / sqrt(d))."""
    if size < 1:
        raise InputError("ensemble size must be positive")
    scale = INIT_SCALE_FACTOR / np.sqrt(problem.dim) if init_scale is None else float(init_scale)
    W = make_generator(seed).normal(0.0, 1.0, size=(size, problem.dim)) * scale
    return RegressionEnsembleState(W, 0, seed)


def gd_step(state, problem, mu=None):
    """W(i) <- W(i) - mu (W(i) Sigma_XX - Sigma_YX) for every row."""
    mu = problem.mu if mu is None else mu
    W = state.W - mu * (state.W @ problem.sigma_xx - problem.sigma_yx)
    if not np.all(np.isfinite(W)):
        raise DivergenceError(f"gradient descent diverged at step {state.step + 1}")
    return RegressionEnsembleState(W, state.step + 1, state.init_seed)


def run_steps(state, problem, steps):
    for _ in range(int(steps)):
        state = gd_step(state, problem)
    return state


def loss(W, problem):
    """L(W) = 1/2 ||W X - y||^2 for one model."""
    r = np.asarray(W) @ problem.X - problem.y
    return 0.5 * float(r @ r)


def _check_model(state, i):
    if not 0 <= i < state.size:
        raise InputError(f"model index {i} out of range for {state.size} models")


def cross_gradient(state, problem, i, target="train", form="covariance"):
    """Delta(i, j): gradient of model i's loss against dataset j.

    `form="error"` evaluates e(i, j) X(j)^T instead of the covariance form.
    """
    _check_model(state, i)
    if target not in TARGETS:
        raise InputError(f"target must be one of {TARGETS}")
    w = state.W[i]
    if form == "error":
        X, y = (problem.X, problem.y) if target == "train" else (problem.Xt, problem.yt)
        return (w @ X - y) @ X.T
    if target == "train":
        return w @ problem.sigma_xx - problem.sigma_yx
    return w @ problem.sigma_tt - problem.sigma_yt


def test_error(state, problem, i):
    """(e(i, t), ||e(i, t)||^2)."""
    _check_model(state, i)
    e = state.W[i] @ problem.Xt - problem.yt
    return e, float(e @ e)


def train_error(state, problem, i):
    _check_model(state, i)
    e = state.W[i] @ problem.X - problem.y
    return e, float(e @ e)


def overfit_indicator(state_before, state_after, problem, i):
    """True iff model i's squared test error strictly increased over one step."""
    if state_after.step != state_before.step + 1:
        raise InputError(f"states are steps {state_before.step} and {state_after.step}, not consecutive")
    return test_error(state_after, problem, i)[1] > test_error(state_before, problem, i)[1]


# ---------------------------------------------------------------------------
# Disagreement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Disagreement:
    pairwise: float
    variance: float

    def __float__(self):
        return self.pairwise


def _test_errors(state, problem):
    return state.W @ problem.Xt - problem.yt


def _variance_sum(rows):
    return float(np.var(rows, axis=0).sum())


def disagreement(state, problem):
    """DisAg: mean pairwise squared distance of test-error vectors, and its variance form."""
    if state.size < 2:
        raise InputError("disagreement needs at least two models")
    E = _test_errors(state, problem)
    q = E.shape[0]
    pairwise = 0.0
    for i in range(q):
        diff = E[i] - E
        pairwise += float(np.sum(diff * diff))
    pairwise /= 2.0 * q * q
    variance = _variance_sum(E)
    if not abs(pairwise - variance) <= DISAGREEMENT_FORM_TOLERANCE * max(1.0, abs(pairwise)):
        raise DivergenceError(f"DisAg forms disagree beyond {DISAGREEMENT_FORM_TOLERANCE:g}: "
                              f"pairwise {pairwise!r} vs variance {variance!r}")
    return Disagreement(pairwise, variance)


@dataclass(frozen=True)
class Decomposition:
    c_prime: float
    c_double_prime: float
    remainder: float
    correlations: np.ndarray

    def predicted_change(self, mu):
        """mu (C' - C''), the first-order change of DisAg."""
        return mu * (self.c_prime - self.c_double_prime)


def decompose_disagreement_change(state, problem, mu=None):
    """C', C'' and the exact quadratic remainder, so DisAg(s+1) - DisAg(s) = mu (C' - C'') + remainder."""
    mu = problem.mu if mu is None else mu
    d_train = state.W @ problem.sigma_xx - problem.sigma_yx
    d_test = state.W @ problem.sigma_tt - problem.sigma_yt
    correlations = np.einsum("ij,ij->i", d_train, d_test)
    c_double = 2.0 * float(correlations.mean())
    c_prime = 2.0 * float(d_train.mean(axis=0) @ d_test.mean(axis=0))
    remainder = mu * mu * _variance_sum(d_train @ problem.Xt)
    return Decomposition(c_prime, c_double, remainder, correlations)


def fit_exponent(xs, ys):
    """Slope of log(ys) against log(xs); points with ys <= 0 are dropped."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    keep = (xs > 0) & (ys > 0)
    if np.count_nonzero(keep) < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


def fit_mus():
    return np.geomspace(MU_FIT_RANGE[0], MU_FIT_RANGE[1], MU_FIT_POINTS)


# ---------------------------------------------------------------------------
# Lemma checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lemma1Report:
    model: int
    correlation: float
    mus: np.ndarray
    error_changes: np.ndarray
    agrees: np.ndarray
    residuals: np.ndarray
    mu_star: float
    analytic_threshold: float
    residual_exponent: float

    def to_dict(self):
        return {
            "model": self.model, "correlation": self.correlation,
            "mus": self.mus.tolist(), "error_changes": self.error_changes.tolist(),
            "agrees": self.agrees.tolist(), "residuals": self.residuals.tolist(),
            "mu_star": self.mu_star, "analytic_threshold": self.analytic_threshold,
            "residual_exponent": self.residual_exponent,
        }


def lemma1_check(state, problem, i, mu_sweep=None):
    """Compare the sign of the one-step test-error change with sign(-Delta(i,i).Delta(i,t)).

    The residual (error change + 2 mu Delta(i,i).Delta(i,t)) must be O(mu^2).
    """
    _check_model(state, i)
    mus = np.sort(np.asarray(fit_mus() if mu_sweep is None else mu_sweep, dtype=float))
    step = cross_gradient(state, problem, i, "train")
    correlation = float(step @ cross_gradient(state, problem, i, "test"))
    e, _ = test_error(state, problem, i)
    g = step @ problem.Xt
    # ||e - mu g||^2 - ||e||^2 as a product of (difference) and (sum), which keeps precision for tiny mu
    changes = np.array([float((-mu * g) @ (2.0 * e - mu * g)) for mu in mus])
    agrees = np.sign(changes) == np.sign(-correlation)
    residuals = changes + 2.0 * mus * correlation

    disagreeing = np.flatnonzero(~agrees)
    below = mus if disagreeing.size == 0 else mus[:disagreeing[0]]
    mu_star = float(below[-1]) if below.size else 0.0
    curvature = float(g @ g)
    threshold = float("inf") if correlation <= 0 or curvature == 0 else 2.0 * correlation / curvature

    in_band = (mus >= MU_FIT_RANGE[0] * (1 - 1e-12)) & (mus <= MU_FIT_RANGE[1] * (1 + 1e-12))
    fit_x, fit_y = (mus[in_band], residuals[in_band]) if in_band.sum() >= 3 else (mus, residuals)
    return Lemma1Report(i, correlation, mus, changes, agrees, residuals, mu_star, threshold,
                        fit_exponent(fit_x, np.abs(fit_y)))


@dataclass(frozen=True)
class Lemma2Report:
    ensemble_size: int
    steps: int
    init_scale: float
    deviation: float
    contraction: float
    tail: float
    deterministic_tail: float
    init_noise: float
    envelope: float
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


def lemma2_check(problem, size, steps, init_scale=None, seed=0):
    """Distance of the ensemble mean after `steps` updates from the closed form, against its envelope."""
    problem.validate()
    state = run_steps(init_state(problem, size, init_scale, seed), problem, steps)
    closed = problem.closed_form("train")
    deviation = float(np.linalg.norm(state.W.mean(axis=0) - closed))

    contraction = problem.contraction_norm()
    tail = contraction ** int(steps)
    scale = INIT_SCALE_FACTOR / np.sqrt(problem.dim) if init_scale is None else float(init_scale)
    deterministic = float(np.linalg.norm(closed)) * tail
    noise = scale * tail * np.sqrt(problem.dim / size)
    envelope = LEMMA2_ENVELOPE_FACTOR * (deterministic + noise)
    # the floor absorbs rounding once both terms have decayed away
    floor = 1e-12 * max(1.0, float(np.linalg.norm(closed)))
    return Lemma2Report(int(size), int(steps), float(scale), deviation, contraction, tail,
                        deterministic, float(noise), float(envelope), deviation <= envelope + floor)


# ---------------------------------------------------------------------------
# Main theorem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoremReport:
    ensemble_size: int
    mu: float
    steps: np.ndarray
    disagreement: np.ndarray
    delta_disagreement: np.ndarray
    c_prime: np.ndarray
    c_double_prime: np.ndarray
    remainder: np.ndarray
    approximation_error: np.ndarray
    overfit_fraction: np.ndarray
    lemma1_consistent: np.ndarray
    tail: np.ndarray
    quadratic_exponent: float
    certified_steps: tuple
    regime_steps: tuple
    violations: tuple
    increase_on_certified: tuple = field(default=())
    expected_disagreement: np.ndarray = None

    @property
    def all_overfit(self):
        return self.overfit_fraction == 1.0

    @property
    def holds(self):
        return not self.violations

    def to_dict(self):
        expected = None if self.expected_disagreement is None else self.expected_disagreement.tolist()
        return {
            "ensemble_size": self.ensemble_size, "mu": self.mu,
            "quadratic_exponent": self.quadratic_exponent,
            "certified_steps": list(self.certified_steps),
            "regime_steps": list(self.regime_steps),
            "violations": list(self.violations),
            "increase_on_certified": list(self.increase_on_certified),
            "holds": self.holds,
            "per_step": {
                "step": self.steps.tolist(),
                "disagreement": self.disagreement.tolist(),
                "expected_disagreement": expected,
                "delta_disagreement": self.delta_disagreement.tolist(),
                "c_prime": self.c_prime.tolist(),
                "c_double_prime": self.c_double_prime.tolist(),
                "remainder": self.remainder.tolist(),
                "approximation_error": self.approximation_error.tolist(),
                "overfit_fraction": self.overfit_fraction.tolist(),
                "lemma1_consistent": self.lemma1_consistent.tolist(),
                "tail": self.tail.tolist(),
            },
        }


def expected_disagreement(problem, size, steps, init_scale=None, mu=None):
    """Mean DisAg over init draws after each step count: (1 - 1/Q) scale^2 tr((I - mu Sigma_XX)^2s Sigma_tt).

    Non-increasing in s for every test design, so a rise of the measured DisAg
    comes from the sampled spread of a finite ensemble.
    """
    mu = problem.mu if mu is None else mu
    scale = INIT_SCALE_FACTOR / np.sqrt(problem.dim) if init_scale is None else float(init_scale)
    lam, V = np.linalg.eigh(problem.sigma_xx)
    weights = np.einsum("ki,kl,li->i", V, problem.sigma_tt, V)
    contraction = (1.0 - mu * lam) ** 2
    s = np.atleast_1d(np.asarray(steps, dtype=float))
    values = (contraction[None, :] ** s[:, None]) @ weights
    return (1.0 - 1.0 / size) * scale * scale * values


def quadratic_exponent(state, problem, mus=None):
    """Slope of |DeltaDisAg - mu (C' - C'')| against mu for one step from `state`."""
    mus = fit_mus() if mus is None else np.asarray(mus, dtype=float)
    before = _variance_sum(_test_errors(state, problem))
    parts = decompose_disagreement_change(state, problem, 1.0)
    errors = []
    for mu in mus:
        after = _variance_sum(_test_errors(gd_step(state, problem, mu), problem))
        errors.append(abs((after - before) - parts.predicted_change(mu)))
    return fit_exponent(mus, errors)


def theorem_check(problem, size=DEFAULT_ENSEMBLE_SIZE, mu=None, s_max=1000, seed=0, init_scale=None):
    """Run the ensemble and instrument every step of the disagreement argument.

    Step s describes the update from s-1 to s. A step is certified when every
    model's squared test error strictly increased, and DeltaDisAg > 0 is
    asserted on every certified step; failures are listed as violations.
    Certified steps where additionally every Delta(i,i).Delta(i,t) < 0 and
    |C'| <= 0.05 |C''| are reported as the regime steps.
    """
    if mu is not None:
        problem = problem.with_mu(mu)
    problem.validate()
    if size < 2:
        raise InputError("the theorem check needs at least two models")
    state = init_state(problem, size, init_scale, seed)
    exponent = quadratic_exponent(state, problem)

    columns = {k: [] for k in ("disagreement", "delta", "c_prime", "c_double", "remainder",
                               "approx", "overfit", "consistent")}
    E = _test_errors(state, problem)
    dis = _variance_sum(E)
    errors_sq = np.einsum("ij,ij->i", E, E)
    for _ in range(int(s_max)):
        parts = decompose_disagreement_change(state, problem)
        state = gd_step(state, problem)
        E = _test_errors(state, problem)
        new_dis = _variance_sum(E)
        new_errors_sq = np.einsum("ij,ij->i", E, E)
        delta = new_dis - dis
        columns["disagreement"].append(new_dis)
        columns["delta"].append(delta)
        columns["c_prime"].append(parts.c_prime)
        columns["c_double"].append(parts.c_double_prime)
        columns["remainder"].append(parts.remainder)
        columns["approx"].append(abs(delta - parts.predicted_change(problem.mu)))
        columns["overfit"].append(float(np.mean(new_errors_sq > errors_sq)))
        columns["consistent"].append(bool(np.all(parts.correlations < 0)))
        dis, errors_sq = new_dis, new_errors_sq

    steps = np.arange(1, int(s_max) + 1)
    arrays = {k: np.asarray(v) for k, v in columns.items()}
    certified = arrays["overfit"] == 1.0
    regime = (certified & arrays["consistent"]
              & (np.abs(arrays["c_prime"]) <= REGIME_C_PRIME_RATIO * np.abs(arrays["c_double"])))
    violations = certified & (arrays["delta"] <= 0)
    if np.any(violations):
        logger.warning("DisAg failed to increase on %d of %d certified overfit steps",
                       int(violations.sum()), int(certified.sum()))
    logger.info("Theorem check: %d certified overfit steps, %d in regime", int(certified.sum()),
                int(regime.sum()))
    return TheoremReport(
        int(size), problem.mu, steps, arrays["disagreement"], arrays["delta"],
        arrays["c_prime"], arrays["c_double"], arrays["remainder"], arrays["approx"],
        arrays["overfit"], arrays["consistent"], problem.contraction_norm() ** steps.astype(float),
        exponent, tuple(steps[certified].tolist()), tuple(steps[regime].tolist()),
        tuple(steps[violations].tolist()),
        tuple(steps[certified & (arrays["delta"] > 0)].tolist()),
        expected_disagreement(problem, size, steps, init_scale))


def c_prime_sweep(problem, grid, seed=0, init_scale=None):
    """|C'| at each (Q, s) in grid, for the joint growth of ensemble size and step count."""
    problem.validate()
    rows = []
    for size, steps in grid:
        state = run_steps(init_state(problem, size, init_scale, seed), problem, steps)
        rows.append((int(size), int(steps), abs(decompose_disagreement_change(state, problem).c_prime)))
    return rows


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

def _test_design(rng, dim, count):
    """dim x count test inputs with per-axis scales spread over TEST_DESIGN_SCALES, in a random basis."""
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    scales = np.geomspace(TEST_DESIGN_SCALES[0], TEST_DESIGN_SCALES[1], dim)
    return basis @ (scales[:, None] * rng.standard_normal((dim, count)))


def _zero_init_test_errors(problem, horizon):
    w = np.zeros(problem.dim)
    errors = np.empty(horizon + 1)
    for s in range(horizon + 1):
        r = w @ problem.Xt - problem.yt
        errors[s] = r @ r
        w = w - problem.mu * (w @ problem.sigma_xx - problem.sigma_yx)
    return errors


def _has_late_overfit(errors, run=OVERFIT_RISE_STEPS):
    """Test error falls to an interior minimum, rises strictly for `run` steps
    and ends at least OVERFIT_MIN_RISE (relative to the initial error) above the minimum."""
    horizon = errors.size - 1
    low = int(np.argmin(errors))
    if not 0 < low < horizon - run:
        return False
    rising = bool(np.all(np.diff(errors[low:low + run + 1]) > 0))
    return rising and errors[-1] - errors[low] > OVERFIT_MIN_RISE * errors[0]


def _never_rises(errors):
    return bool(np.all(np.diff(errors) <= 1e-12 * errors[0]))


def make_overfit_instance(d, M, Nt, label_noise, seed=0, mu=None, horizon=2000):
    """Planted linear target w*, noisy train targets, clean test targets.

    The test inputs are anisotropic and drawn in a random basis, so Sigma_tt
    shares neither its axes nor its spectrum with Sigma_XX; the test error is
    (W - w*) Sigma_tt (W - w*)^T. The seed is advanced until the zero-init test error shows its U-shape
    within `horizon` steps (label_noise > 0) or never rises (label_noise = 0);
    the seed used is recorded.
    """
    if M < d:
        raise InputError(f"need M >= d, got M={M}, d={d}")
    if Nt < d:
        raise InputError(f"the test design needs Nt >= d for a full-rank Sigma_tt, got Nt={Nt}")
    for attempt in range(OVERFIT_SEARCH_TRIES):
        current = int(seed) + attempt
        rng = make_generator(current)
        w_star = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
        X = rng.standard_normal((d, M))
        Xt = _test_design(rng, d, Nt)
        y = w_star @ X + label_noise * rng.standard_normal(M)
        yt = w_star @ Xt
        lam_max = float(np.linalg.eigvalsh(X @ X.T)[-1])
        problem = RegressionProblem(X, y, Xt, yt, 1.0 / lam_max if mu is None else mu, current)
        errors = _zero_init_test_errors(problem, horizon)
        if _never_rises(errors) if label_noise == 0 else _has_late_overfit(errors):
            if attempt:
                logger.info("Overfit instance accepted at seed %d after %d tries", current, attempt + 1)
            return problem.validate()
    shape = "a monotone" if label_noise == 0 else "a late-overfit"
    raise InputError(f"no seed in [{seed}, {seed + OVERFIT_SEARCH_TRIES}) produced {shape} "
                     f"instance within {horizon} steps; change label_noise or horizon")
