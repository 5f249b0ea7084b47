"""MAP and minimum-energy estimation by direct maximisation of the discretised objectives."""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicSpline

from sdemap.errors import DomainError, EvaluationError, FixedPointError, InputError
from sdemap.grid import Partition, uniform_partition
from sdemap.model import BenchmarkSpec, DynamicsModel, PriorModel
from sdemap.objective import DecisionVector, ObjectiveReport, value_and_gradient

logger = logging.getLogger(__name__)

OBJECTIVES = {'map_trapezoidal': 'trapezoidal', 'mee_euler': 'euler'}
ESTIMATORS = {'map': 'map_trapezoidal', 'mee': 'mee_euler'}
TERMINATION_REASONS = ('grad_tol', 'max_iters', 'line_search_failure')


@dataclass(frozen=True)
class SolverConfig:
    """Limited-memory quasi-Newton settings.

    ``grad_tol=None`` means ``1e-6 * (1 + |objective at start|)``; the test is
    on the largest gradient component.
    """

    grad_tol: Optional[float] = None
    max_iters: int = 500
    c1: float = 1e-4
    c2: float = 0.9
    memory: int = 20
    max_line_search: int = 25

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise DomainError('line search needs 0 < c1 < c2 < 1')
        if self.max_iters < 0 or self.memory < 1 or self.max_line_search < 1:
            raise DomainError('max_iters, memory and max_line_search must be positive')
        if self.grad_tol is not None and not self.grad_tol > 0.0:
            raise DomainError('grad_tol must be positive')


@dataclass(frozen=True, eq=False)
class EstimationProblem:
    """A benchmark together with one measurement record."""

    spec: BenchmarkSpec
    y: np.ndarray

    def __post_init__(self):
        values = np.asarray(getattr(self.y, 'values', self.y), dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.spec.measurement.sample_times.size:
            raise InputError(f'dataset has {values.shape[0]} rows, benchmark expects '
                             f'{self.spec.measurement.sample_times.size}')
        object.__setattr__(self, 'y', values)

    @property
    def model(self) -> DynamicsModel:
        return self.spec.dynamics

    @property
    def prior(self) -> PriorModel:
        return self.spec.prior

    @property
    def measurement(self):
        return self.spec.measurement

    def partition(self, grid_refinement: int = 0) -> Partition:
        """Measurement grid ``k * t_s`` halved ``grid_refinement`` times."""
        if grid_refinement < 0:
            raise DomainError('grid_refinement must be non-negative')
        N = int(round(self.spec.t_f / self.spec.t_s))
        return uniform_partition(self.spec.t_f, N).refine(grid_refinement)


@dataclass(frozen=True, eq=False)
class EstimateResult:
    """Maximiser found by :func:`maximize` and how the run ended."""

    v: DecisionVector
    report: ObjectiveReport
    iterations: int
    grad_norm: float
    termination: str
    wall_time: float
    objective_kind: str
    history: List[float] = field(default_factory=list)
    evaluations: int = 0


# -- initial guess -------------------------------------------------------------


def gcv_smooth(times: np.ndarray, y: np.ndarray,
               penalties: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Second-difference penalised least squares with the penalty picked by GCV.

    Minimises ``|y - s|^2 + lam |D s|^2`` over ``s`` for each ``lam`` on a
    10-point log grid and keeps the one with the lowest generalised
    cross-validation score ``(rss / K) / (1 - tr(H) / K)^2``.

    Returns:
        Tuple[np.ndarray, float]: Smoothed values and the chosen penalty.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    K = y.size
    if penalties is None:
        penalties = np.logspace(-3, 6, 10)
    D = np.diff(np.eye(K), n=2, axis=0)
    eigvals, eigvecs = scipy.linalg.eigh(D.T @ D)
    eigvals = np.clip(eigvals, 0.0, None)
    coeffs = eigvecs.T @ y
    best = None
    for lam in penalties:
        shrink = 1.0 / (1.0 + lam * eigvals)
        smooth = eigvecs @ (shrink * coeffs)
        rss = float(np.sum((y - smooth) ** 2))
        trace = float(np.sum(shrink))
        denom = (1.0 - trace / K) ** 2
        score = rss / K / denom if denom > 0.0 else np.inf
        if best is None or score < best[0]:
            best = (score, lam, smooth)
    logger.debug('smoothing penalty %.3g chosen by GCV', best[1])
    return best[2], float(best[1])


def initial_guess(meas_times: np.ndarray, y: np.ndarray, partition: Partition,
                  model: DynamicsModel, prior: Optional[PriorModel] = None) -> DecisionVector:
    """Spline-based starting point for models with ``q = 1`` and ``h = x``.

    The measurements are smoothed (:func:`gcv_smooth`) and interpolated by a
    cubic spline ``s``: ``z0 = s(0)``, ``x = s'`` at the partition nodes, and
    the parameters entering the drift linearly are regressed from ``s''``
    onto ``model.linear_drift``. Every other parameter starts at the prior's
    ``theta_guess`` (the mode for scale parameters).

    Args:
        meas_times (np.ndarray): Measurement times.
        y (np.ndarray): Measurements of z, one per time.
        partition (Partition): Estimation grid.
        model (DynamicsModel): System.
        prior (Optional[PriorModel]): Source of ``theta_guess``.

    Returns:
        DecisionVector: The starting point.

    Raises:
        InputError: Fewer than 4 measurements or an unsupported model shape.
    """
    times = np.asarray(meas_times, dtype=float).reshape(-1)
    values = np.asarray(y, dtype=float).reshape(times.size, -1)[:, 0]
    if times.size < 4:
        raise InputError('the spline initial guess needs at least 4 measurements')
    if model.n != 1 or model.q != 1 or not model.clean_drift_z_independent:
        raise InputError(f'{model.name}: the spline guess needs q = 1 and h = x; '
                         'supply a guess hook instead')

    smooth, _ = gcv_smooth(times, values)
    spline = CubicSpline(times, smooth)
    nodes = partition.nodes
    x = spline(nodes, 1)[:, None]
    z0 = np.array([float(spline(0.0))])

    theta = np.zeros(model.m)
    if prior is not None and prior.theta_guess is not None:
        theta = np.asarray(prior.theta_guess, dtype=float).copy()
    lin = list(model.linear_parameters)
    if model.linear_drift is not None and lin:
        z = spline(nodes)[:, None]
        offset, basis = model.linear_drift(nodes, x, z)
        basis = np.asarray(basis, dtype=float).reshape(nodes.size, model.n, model.m)
        other = [i for i in range(model.m) if i not in lin]
        target = spline(nodes, 2) - np.asarray(offset).reshape(nodes.size)
        if other:
            target = target - basis[:, 0, other] @ theta[other]
        solution, *_ = np.linalg.lstsq(basis[:, 0, lin], target, rcond=None)
        theta[lin] = solution
    return DecisionVector(partition, x, z0, theta)


# -- line search ---------------------------------------------------------------


def _cubic_minimizer(a, fa, ga, b, fb, gb, lo, hi):
    """Minimiser of the cubic through two points with slopes, clipped to [lo, hi]."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    d2_square = d1 ** 2 - ga * gb
    if d2_square >= 0.0 and np.isfinite(d2_square):
        d2 = np.sqrt(d2_square)
        if a <= b:
            t = b - (b - a) * ((gb + d2 - d1) / (gb - ga + 2.0 * d2))
        else:
            t = a - (a - b) * ((ga + d2 - d1) / (ga - gb + 2.0 * d2))
        if np.isfinite(t):
            return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(phi: Callable[[float], Tuple[float, float]], phi0: float, dphi0: float,
                 step: float, c1: float = 1e-4, c2: float = 0.9, max_evals: int = 25
                 ) -> Tuple[Optional[float], int]:
    """Step length satisfying the strong Wolfe conditions for a minimisation.

    ``phi(t)`` returns the value and directional derivative at ``t``; a
    non-finite value counts as a failed sufficient-decrease test and shrinks
    the bracket.

    Returns:
        Tuple[Optional[float], int]: Accepted step (``None`` on failure) and
            the number of evaluations.
    """
    evals = 0
    t_prev, f_prev, g_prev = 0.0, phi0, dphi0
    t = step
    lo = hi = None
    while evals < max_evals:
        f_t, g_t = phi(t)
        evals += 1
        if not np.isfinite(f_t) or f_t > phi0 + c1 * t * dphi0 or (evals > 1 and f_t >= f_prev):
            lo, hi = (t_prev, f_prev, g_prev), (t, f_t, g_t)
            break
        if abs(g_t) <= -c2 * dphi0:
            return t, evals
        if g_t >= 0.0:
            lo, hi = (t, f_t, g_t), (t_prev, f_prev, g_prev)
            break
        t_next = _cubic_minimizer(t_prev, f_prev, g_prev, t, f_t, g_t,
                                  t + 0.01 * (t - t_prev), 10.0 * t)
        t_prev, f_prev, g_prev = t, f_t, g_t
        t = t_next
    else:
        return (t_prev if t_prev > 0.0 else None), evals

    while evals < max_evals:
        (a, fa, ga), (b, fb, gb) = lo, hi
        width = abs(b - a)
        if width < 1e-16 * max(1.0, abs(a)):
            break
        left, right = min(a, b), max(a, b)
        if np.isfinite(fb) and np.isfinite(gb):
            t = _cubic_minimizer(a, fa, ga, b, fb, gb, left + 0.1 * width, right - 0.1 * width)
        else:
            t = 0.5 * (a + b)
        f_t, g_t = phi(t)
        evals += 1
        if not np.isfinite(f_t) or f_t > phi0 + c1 * t * dphi0 or f_t >= fa:
            hi = (t, f_t, g_t)
            continue
        if abs(g_t) <= -c2 * dphi0:
            return t, evals
        if g_t * (b - a) >= 0.0:
            hi = lo
        lo = (t, f_t, g_t)
    a = lo[0]
    return (a if a > 0.0 else None), evals


# -- maximisation --------------------------------------------------------------


def _two_loop(grad: np.ndarray, s_hist, y_hist) -> np.ndarray:
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        alpha = rho * (s @ q)
        q -= alpha * y
        alphas.append((rho, alpha))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, alpha) in zip(zip(s_hist, y_hist), reversed(alphas)):
        beta = rho * (y @ q)
        q += s * (alpha - beta)
    return -q


@dataclass
class AscentTrace:
    """Outcome of :func:`lbfgs_ascent`."""

    u: np.ndarray
    value: float
    payload: Any
    iterations: int
    grad_norm: float
    termination: str
    history: List[float]
    evaluations: int


def lbfgs_ascent(fun: Callable[[np.ndarray], Tuple[float, Optional[np.ndarray], Any]],
                 u0: np.ndarray, cfg: Optional[SolverConfig] = None,
                 label: str = 'objective') -> AscentTrace:
    """Maximise ``fun`` by L-BFGS with a strong Wolfe line search.

    Args:
        fun (Callable): Maps a flat point to ``(value, gradient, payload)``;
            a value of ``-inf`` (with gradient ``None``) marks an infeasible
            trial point, which the line search rejects.
        u0 (np.ndarray): Starting point with a finite value.
        cfg (Optional[SolverConfig]): Solver settings.
        label (str): Name used in log messages.

    Returns:
        AscentTrace: Last accepted iterate; its payload is the one ``fun``
            returned there.
    """
    cfg = cfg or SolverConfig()
    evaluations = 0

    def negated(u):
        nonlocal evaluations
        evaluations += 1
        value, grad, payload = fun(u)
        if grad is None or not np.isfinite(value):
            return np.inf, None, payload
        return -value, -np.asarray(grad, dtype=float), payload

    u = np.asarray(u0, dtype=float).copy()
    f, g, payload = negated(u)
    if not np.isfinite(f):
        raise InputError(f'{label} is not finite at the initial point')
    grad_tol = cfg.grad_tol if cfg.grad_tol is not None else 1e-6 * (1.0 + abs(f))
    history = [-f]
    s_hist: List[np.ndarray] = []
    y_hist: List[np.ndarray] = []
    termination = 'max_iters'
    iteration = 0
    trials: Dict[float, Tuple[float, Optional[np.ndarray], Any]] = {}

    def phi(t):
        trial = negated(u + t * d)
        trials[t] = trial
        if trial[1] is None:
            return np.inf, np.nan
        return trial[0], float(trial[1] @ d)

    while iteration < cfg.max_iters:
        grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_norm < grad_tol:
            termination = 'grad_tol'
            break
        d = _two_loop(g, s_hist, y_hist)
        dphi0 = float(g @ d)
        if not dphi0 < 0.0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            dphi0 = float(g @ d)
        first = 1.0 if s_hist else min(1.0, 1.0 / float(np.sum(np.abs(g))))

        trials.clear()
        step, _ = strong_wolfe(phi, f, dphi0, first, cfg.c1, cfg.c2, cfg.max_line_search)
        if step is None and s_hist:
            s_hist.clear()
            y_hist.clear()
            continue
        if step is None:
            termination = 'line_search_failure'
            break

        f_new, g_new, payload_new = trials[step]
        s = step * d
        yv = g_new - g
        if s @ yv > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        u, f, g, payload = u + s, f_new, g_new, payload_new
        iteration += 1
        history.append(-f)
        if iteration % 50 == 0:
            logger.debug('%s iteration %d: value %.10g, |grad| %.3g', label, iteration,
                         -f, float(np.max(np.abs(g))))

    grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
    logger.info('%s finished after %d iterations (%s): value %.10g, |grad| %.3g',
                label, iteration, termination, -f, grad_norm)
    return AscentTrace(u=u, value=-f, payload=payload, iterations=iteration,
                       grad_norm=grad_norm, termination=termination, history=history,
                       evaluations=evaluations)


def maximize(objective_kind: str, problem: EstimationProblem, v0: DecisionVector,
             cfg: Optional[SolverConfig] = None) -> EstimateResult:
    """Maximise a discretised log-posterior over the decision vector.

    Trial points where the objective is ``-inf`` (outside the prior support,
    non-positive scale parameters, non-positive trapezoidal determinant) or
    cannot be evaluated are rejected by the line search, so every accepted
    iterate has a finite objective and the accepted values never decrease.

    Args:
        objective_kind (str): ``map_trapezoidal`` or ``mee_euler``.
        problem (EstimationProblem): Benchmark and data.
        v0 (DecisionVector): Starting point; the objective must be finite there.
        cfg (Optional[SolverConfig]): Solver settings.

    Returns:
        EstimateResult: Last accepted iterate with diagnostics.
    """
    if objective_kind not in OBJECTIVES:
        raise InputError(f'unknown objective {objective_kind!r}; '
                         f'expected one of {sorted(OBJECTIVES)}')
    kind = OBJECTIVES[objective_kind]
    model, prior, meas, y = problem.model, problem.prior, problem.measurement, problem.y
    partition = v0.partition
    n, q, m = model.n, model.q, model.m
    started = time.perf_counter()

    def fun(u):
        v = DecisionVector.from_flat(partition, u, n, q, m)
        try:
            report, grad = value_and_gradient(kind, model, prior, meas, y, v)
        except (EvaluationError, FixedPointError, DomainError) as exc:
            logger.debug('trial point rejected: %s', exc)
            return -np.inf, None, None
        return report.value, grad, report

    trace = lbfgs_ascent(fun, v0.flatten(), cfg, label=kind)
    return EstimateResult(v=DecisionVector.from_flat(partition, trace.u, n, q, m),
                          report=trace.payload, iterations=trace.iterations,
                          grad_norm=trace.grad_norm, termination=trace.termination,
                          wall_time=time.perf_counter() - started,
                          objective_kind=objective_kind, history=trace.history,
                          evaluations=trace.evaluations)


def estimate(problem: EstimationProblem, estimator: str, grid_refinement: int = 0,
             cfg: Optional[SolverConfig] = None) -> EstimateResult:
    """Run one estimator (``map`` or ``mee``) from the spline initial guess.

    The estimation grid is the measurement grid refined ``grid_refinement``
    times.
    """
    if estimator not in ESTIMATORS:
        raise InputError(f'unknown estimator {estimator!r}; expected one of {sorted(ESTIMATORS)}')
    partition = problem.partition(grid_refinement)
    spec = problem.spec
    if spec.guess_hook is not None:
        v0 = spec.guess_hook(spec.measurement.sample_times, problem.y, partition)
    else:
        v0 = initial_guess(spec.measurement.sample_times, problem.y, partition,
                           spec.dynamics, spec.prior)
    return maximize(ESTIMATORS[estimator], problem, v0, cfg)
