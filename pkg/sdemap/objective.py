"""Log-posterior functionals over piecewise-linear state paths.

Two discretised objectives are maximised by :mod:`sdemap.solve`:

* ``euler``: energy of the Euler increments, clean path by explicit Euler.
  Its maximiser is the minimum-energy estimate.
* ``trapezoidal``: energy of the trapezoidal increments plus the log-Jacobian
  ``sum_k ln det(I - f_x(t_{k+1}) delta_k / 2)``, clean path by the implicit
  trapezoidal rule. Its maximiser is the MAP estimate.

Both return an :class:`ObjectiveReport` whose ``value`` is the sum of its
signed parts. Gradients come from a reverse sweep through the clean-state
recursion.

The continuous functionals are quadrature harnesses for smooth test paths.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline

from sdemap.errors import DomainError, EvaluationError, FixedPointError, GradientError, InputError
from sdemap.grid import Partition, PwlPath, uniform_partition
from sdemap.model import DynamicsModel, MeasurementModel, PriorModel

logger = logging.getLogger(__name__)

KINDS = ('euler', 'trapezoidal')


@dataclass(frozen=True, eq=False)
class DecisionVector:
    """Optimisation variable: x at every node, z0 and theta.

    The flat layout is ``[x_0 ... x_N, z0, theta]`` with each ``x_k`` row-major.
    """

    partition: Partition
    x: np.ndarray
    z0: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != self.partition.N + 1:
            raise InputError('x needs one row per partition node')
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'z0', np.atleast_1d(np.asarray(self.z0, dtype=float)))
        object.__setattr__(self, 'theta', np.atleast_1d(np.asarray(self.theta, dtype=float)))

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z0.size

    @property
    def m(self) -> int:
        return self.theta.size

    @property
    def size(self) -> int:
        return self.x.size + self.q + self.m

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.x.ravel(), self.z0, self.theta])

    @classmethod
    def from_flat(cls, partition: Partition, flat: np.ndarray, n: int, q: int,
                  m: int) -> 'DecisionVector':
        flat = np.asarray(flat, dtype=float)
        nx = (partition.N + 1) * n
        if flat.size != nx + q + m:
            raise InputError(f'flat vector has {flat.size} entries, expected {nx + q + m}')
        return cls(partition, flat[:nx].reshape(partition.N + 1, n),
                   flat[nx:nx + q].copy(), flat[nx + q:].copy())

    def x_path(self) -> PwlPath:
        return PwlPath(self.partition, self.x)


@dataclass(frozen=True, eq=False)
class ObjectiveReport:
    """Value of a log-posterior and its signed parts.

    ``value == prior + likelihood + energy_sum + divergence_sum``;
    ``divergence_sum`` is the log-determinant sum for the trapezoidal
    objective, the divergence integral for the continuous MAP functional and
    zero otherwise.
    """

    value: float
    prior: float
    likelihood: float
    energy_sum: float
    divergence_sum: float
    z_path: Optional[PwlPath]
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))

    def decomposition(self) -> Dict[str, float]:
        return {
            'prior': self.prior,
            'likelihood': self.likelihood,
            'energy_sum': self.energy_sum,
            'divergence_sum': self.divergence_sum,
        }


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.all(np.isfinite(values.reshape(values.shape[0], -1)), axis=1)
    if np.any(bad):
        step = int(np.argmax(bad))
        raise EvaluationError(f'non-finite {what} at step {step}', step=step)


def clean_path_euler(model: DynamicsModel, x_path: PwlPath, z0, theta) -> PwlPath:
    """Explicit Euler clean path ``z_{k+1} = z_k + h(t_k, x_k, z_k) delta_k``.

    Raises:
        EvaluationError: If the clean drift is non-finite; ``step`` is the node.
    """
    partition = x_path.partition
    t, x, delta = partition.nodes, x_path.values, partition.widths
    theta = np.asarray(theta, dtype=float)
    z = np.empty((partition.N + 1, model.q))
    z[0] = np.asarray(z0, dtype=float).reshape(model.q)
    if model.clean_drift_z_independent:
        h = model.h(t[:-1], x[:-1], np.zeros((partition.N, model.q)), theta)
        _check_finite(h, 'clean drift')
        z[1:] = z[0] + np.cumsum(h * delta[:, None], axis=0)
    else:
        for k in range(partition.N):
            h = model.h(t[k], x[k], z[k], theta)
            if not np.all(np.isfinite(h)):
                raise EvaluationError(f'non-finite clean drift at step {k}', step=k)
            z[k + 1] = z[k] + h * delta[k]
    return PwlPath(partition, z)


def clean_path_trapezoidal(model: DynamicsModel, x_path: PwlPath, z0, theta,
                           tol: float = 1e-12, max_iter: int = 50,
                           diagnostics: Optional[Dict[str, Any]] = None) -> PwlPath:
    """Implicit trapezoidal clean path solved per step by Picard iteration.

    Each step iterates ``z <- z_k + (h_k + h(t_{k+1}, x_{k+1}, z)) delta_k / 2``
    from ``z = z_k`` until successive iterates are closer than
    ``tol * (1 + |z_k|)``.

    Args:
        model (DynamicsModel): System; its Lipschitz hint, when present, must
            satisfy ``(L_f + L_h) * mesh < 2``.
        x_path (PwlPath): Noisy-state path.
        z0 (np.ndarray): Initial clean state.
        theta (np.ndarray): Parameters.
        tol (float): Relative stopping tolerance.
        max_iter (int): Iteration cap per step.
        diagnostics (Optional[Dict[str, Any]]): Receives the largest iteration
            count and final residual over all steps.

    Returns:
        PwlPath: The clean path on the partition of ``x_path``.

    Raises:
        DomainError: If the contraction condition is known to fail.
        FixedPointError: If a step does not converge within ``max_iter``.
    """
    partition = x_path.partition
    if model.check_contraction(partition.mesh) is False:
        raise DomainError(f'mesh {partition.mesh} too coarse for a contracting clean-state step')
    t, x, delta = partition.nodes, x_path.values, partition.widths
    theta = np.asarray(theta, dtype=float)
    z = np.empty((partition.N + 1, model.q))
    z[0] = np.asarray(z0, dtype=float).reshape(model.q)
    max_iterations, max_residual = 0, 0.0
    if model.clean_drift_z_independent:
        h = model.h(t, x, np.zeros((partition.N + 1, model.q)), theta)
        _check_finite(h, 'clean drift')
        z[1:] = z[0] + np.cumsum(0.5 * (h[:-1] + h[1:]) * delta[:, None], axis=0)
        max_iterations = 1
    else:
        for k in range(partition.N):
            h_k = model.h(t[k], x[k], z[k], theta)
            if not np.all(np.isfinite(h_k)):
                raise EvaluationError(f'non-finite clean drift at step {k}', step=k)
            limit = tol * (1.0 + np.linalg.norm(z[k]))
            current = z[k].copy()
            for iteration in range(1, max_iter + 1):
                nxt = z[k] + 0.5 * delta[k] * (h_k + model.h(t[k + 1], x[k + 1], current, theta))
                residual = float(np.linalg.norm(nxt - current))
                if not np.isfinite(residual):
                    raise EvaluationError(f'non-finite clean drift at step {k + 1}', step=k + 1)
                current = nxt
                if residual < limit:
                    break
            else:
                raise FixedPointError(f'clean-state fixed point did not converge at step {k}',
                                      step=k, residual=residual)
            z[k + 1] = current
            max_iterations = max(max_iterations, iteration)
            max_residual = max(max_residual, residual)
    if diagnostics is not None:
        diagnostics['fixed_point_iterations'] = max_iterations
        diagnostics['fixed_point_residual'] = max_residual
    return PwlPath(partition, z)


def _measurement_indices(meas: MeasurementModel, partition: Partition) -> np.ndarray:
    if meas.sample_times.size == 0:
        return np.zeros(0, dtype=int)
    return partition.node_indices(meas.sample_times)


def _as_measurements(meas: MeasurementModel, y) -> np.ndarray:
    values = getattr(y, 'values', y)
    if values is None:
        return np.zeros((0, 1))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != meas.sample_times.size:
        raise InputError(f'{values.shape[0]} measurements for '
                         f'{meas.sample_times.size} sample times')
    return values


def _evaluate(kind: str, model: DynamicsModel, prior: PriorModel, meas: MeasurementModel,
              y, v: DecisionVector, want_gradient: bool
              ) -> Tuple[ObjectiveReport, Optional[np.ndarray]]:
    if kind not in KINDS:
        raise InputError(f'unknown objective {kind!r}; expected one of {KINDS}')
    partition = v.partition
    x, z0, theta = v.x, v.z0, v.theta
    n, q, m = model.n, model.q, model.m
    if v.n != n or v.q != q or v.m != m:
        raise InputError('decision vector does not match the model dimensions')
    diagnostics: Dict[str, Any] = {'objective': kind}

    log_prior = prior.log_density(x[0], z0, theta)
    if not np.isfinite(log_prior):
        diagnostics['reason'] = 'outside prior support'
        report = ObjectiveReport(-np.inf, -np.inf, 0.0, 0.0, 0.0, None, diagnostics)
        return report, None

    trapezoidal = kind == 'trapezoidal'
    x_path = v.x_path()
    if trapezoidal:
        z_path = clean_path_trapezoidal(model, x_path, z0, theta, diagnostics=diagnostics)
    else:
        z_path = clean_path_euler(model, x_path, z0, theta)
    z = z_path.values
    t, delta = partition.nodes, partition.widths

    idx = _measurement_indices(meas, partition)
    values = _as_measurements(meas, y)
    log_lik = meas.log_likelihood_at(x[idx], z[idx], theta, values)

    f = model.f(t, x, z, theta)
    f_bar = 0.5 * (f[:-1] + f[1:]) if trapezoidal else f[:-1]
    g_inv = model.diffusion_inverse
    e = np.diff(x, axis=0) / delta[:, None] - f_bar
    r = e @ g_inv.T
    energy = -0.5 * float(np.sum(delta * np.sum(r ** 2, axis=1)))

    log_det = 0.0
    fx = fz = fth = None
    if trapezoidal:
        fx, fz, fth = model.noisy_jacobians(t, x, z, theta)
        M = np.eye(n)[None] - 0.5 * delta[:, None, None] * fx[1:]
        sign, logabs = np.linalg.slogdet(M)
        if np.any(sign <= 0.0):
            step = int(np.argmax(sign <= 0.0))
            logger.debug('non-positive det(I - f_x delta / 2) at step %d', step)
            diagnostics['nonpositive_det_step'] = step
            report = ObjectiveReport(-np.inf, log_prior, log_lik, energy, -np.inf, z_path,
                                     diagnostics)
            return report, None
        log_det = float(np.sum(logabs))

    value = log_prior + log_lik + energy + log_det
    report = ObjectiveReport(float(value), float(log_prior), float(log_lik), energy, log_det,
                             z_path, diagnostics)
    if not want_gradient or not np.isfinite(value):
        return report, None

    gx = np.zeros_like(x)
    direct_z = np.zeros_like(z)
    gth = np.zeros(m)

    px, pz, pth = prior.gradient(x[0], z0, theta)
    gx[0] += px
    direct_z[0] += pz
    gth += pth

    if idx.size:
        lx, lz, lth = meas.gradient_at(x[idx], z[idx], theta, values)
        np.add.at(gx, idx, lx)
        np.add.at(direct_z, idx, lz)
        gth += lth

    # energy: g_k is the derivative with respect to e_k
    g = -delta[:, None] * (r @ g_inv)
    gx[1:] += g / delta[:, None]
    gx[:-1] -= g / delta[:, None]
    if fx is None:
        fx, fz, fth = model.noisy_jacobians(t, x, z, theta)
    if trapezoidal:
        F = np.zeros_like(x)
        F[:-1] -= 0.5 * g
        F[1:] -= 0.5 * g
    else:
        F = np.zeros_like(x)
        F[:-1] = -g
    gx += np.einsum('kij,ki->kj', fx, F)
    direct_z += np.einsum('kij,ki->kj', fz, F)
    gth += np.einsum('kij,ki->j', fth, F)

    if trapezoidal:
        M_inv = np.linalg.inv(M)
        H = model.noisy_jacobian_x_gradient(t[1:], x[1:], z[1:], theta)
        dlogdet = -0.5 * delta[:, None] * np.einsum('kji,kijl->kl', M_inv, H)
        gx[1:] += dlogdet[:, :n]
        direct_z[1:] += dlogdet[:, n:n + q]
        gth += dlogdet[:, n + q:].sum(axis=0)

    hx, hz, hth = model.clean_jacobians(t, x, z, theta)
    lam = direct_z[-1].copy()
    eye_q = np.eye(q)
    for k in range(partition.N - 1, -1, -1):
        if trapezoidal:
            A = eye_q - 0.5 * delta[k] * hz[k + 1]
            mu = np.linalg.solve(A.T, lam) if q else lam
            gx[k] += 0.5 * delta[k] * hx[k].T @ mu
            gx[k + 1] += 0.5 * delta[k] * hx[k + 1].T @ mu
            gth += 0.5 * delta[k] * (hth[k] + hth[k + 1]).T @ mu
            lam = direct_z[k] + (eye_q + 0.5 * delta[k] * hz[k]).T @ mu
        else:
            gx[k] += delta[k] * hx[k].T @ lam
            gth += delta[k] * hth[k].T @ lam
            lam = direct_z[k] + (eye_q + delta[k] * hz[k]).T @ lam

    grad = np.concatenate([gx.ravel(), lam, gth])
    if not np.all(np.isfinite(grad)):
        raise GradientError('non-finite gradient')
    return report, grad


def euler_log_posterior(model: DynamicsModel, prior: PriorModel, meas: MeasurementModel, y,
                        v: DecisionVector) -> ObjectiveReport:
    """Euler-discretised log-posterior (minimum-energy objective).

    ``ln psi + ln pi - 1/2 sum_k delta_k |G^{-1}(dx_k / delta_k - f_k)|^2``
    with the clean path from :func:`clean_path_euler`; ``-inf`` outside the
    prior support.
    """
    return _evaluate('euler', model, prior, meas, y, v, want_gradient=False)[0]


def trapezoidal_log_posterior(model: DynamicsModel, prior: PriorModel, meas: MeasurementModel,
                              y, v: DecisionVector) -> ObjectiveReport:
    """Trapezoidally-discretised log-posterior (MAP objective).

    Energy of ``dx_k / delta_k - (f_k + f_{k+1}) / 2`` plus
    ``sum_k ln det(I - f_x(t_{k+1}) delta_k / 2)``; a non-positive determinant
    gives ``-inf`` with ``diagnostics['nonpositive_det_step']``.
    """
    return _evaluate('trapezoidal', model, prior, meas, y, v, want_gradient=False)[0]


def evaluate(kind: str, model: DynamicsModel, prior: PriorModel, meas: MeasurementModel, y,
             v: DecisionVector) -> ObjectiveReport:
    return _evaluate(kind, model, prior, meas, y, v, want_gradient=False)[0]


def value_and_gradient(kind: str, model: DynamicsModel, prior: PriorModel,
                       meas: MeasurementModel, y, v: DecisionVector
                       ) -> Tuple[ObjectiveReport, Optional[np.ndarray]]:
    """Objective report and flat gradient in one pass.

    The gradient is ``None`` when the value is not finite.
    """
    return _evaluate(kind, model, prior, meas, y, v, want_gradient=True)


def gradient(kind: str, model: DynamicsModel, prior: PriorModel, meas: MeasurementModel, y,
             v: DecisionVector) -> np.ndarray:
    """Gradient of a discretised objective with respect to the flat decision vector.

    Raises:
        GradientError: If the objective is ``-inf`` at ``v``.
    """
    report, grad = value_and_gradient(kind, model, prior, meas, y, v)
    if grad is None:
        raise GradientError(f'{kind} objective is not finite at the evaluation point')
    return grad


# -- continuous functionals -------------------------------------------------


@dataclass(frozen=True)
class SmoothPath:
    """Smooth noisy-state path on ``[0, t_f]`` with its time derivative."""

    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    t_f: float

    def sample(self, times: np.ndarray) -> np.ndarray:
        out = np.asarray(self.value(times), dtype=float)
        return out.reshape(np.size(times), -1)

    def sample_derivative(self, times: np.ndarray) -> np.ndarray:
        out = np.asarray(self.derivative(times), dtype=float)
        return out.reshape(np.size(times), -1)


def _rk4_clean_path(model, x: SmoothPath, z0, theta, quad_N: int):
    times = uniform_partition(x.t_f, quad_N).nodes
    h = x.t_f / quad_N
    z = np.empty((quad_N + 1, model.q))
    z[0] = np.asarray(z0, dtype=float).reshape(model.q)
    x_nodes = x.sample(times)
    x_mid = x.sample(times[:-1] + 0.5 * h)
    for k in range(quad_N):
        t = times[k]
        k1 = model.h(t, x_nodes[k], z[k], theta)
        k2 = model.h(t + 0.5 * h, x_mid[k], z[k] + 0.5 * h * k1, theta)
        k3 = model.h(t + 0.5 * h, x_mid[k], z[k] + 0.5 * h * k2, theta)
        k4 = model.h(times[k + 1], x_nodes[k + 1], z[k] + h * k3, theta)
        z[k + 1] = z[k] + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return times, x_nodes, z


def continuous_terms(model: DynamicsModel, prior: PriorModel, meas: MeasurementModel, y,
                     x: SmoothPath, z0, theta, quad_N: int) -> Dict[str, float]:
    """Signed parts of the continuous log-posteriors for a smooth path.

    The clean state is integrated by fixed-step RK4 with step ``t_f / quad_N``;
    the energy and divergence integrals use the composite trapezoid rule on the
    same ``quad_N`` panels.

    Returns:
        Dict[str, float]: ``prior``, ``likelihood``, ``energy_sum`` and
            ``divergence_sum``.
    """
    if quad_N < 1:
        raise DomainError('quad_N must be at least 1')
    theta = np.asarray(theta, dtype=float)
    times, x_nodes, z = _rk4_clean_path(model, x, z0, theta, quad_N)
    g_inv = model.diffusion_inverse
    r = (model.f(times, x_nodes, z, theta) - x.sample_derivative(times)) @ g_inv.T
    energy = -0.5 * float(trapezoid(np.sum(r ** 2, axis=1), times))
    divergence = -0.5 * float(trapezoid(model.divergence(times, x_nodes, z, theta), times))

    log_prior = prior.log_density(x_nodes[0], z[0], theta)
    log_lik = 0.0
    if meas.sample_times.size:
        spline = CubicSpline(times, z, axis=0)
        xs = x.sample(meas.sample_times)
        log_lik = meas.log_likelihood_at(xs, spline(meas.sample_times), theta,
                                         _as_measurements(meas, y))
    return {'prior': float(log_prior), 'likelihood': float(log_lik),
            'energy_sum': energy, 'divergence_sum': divergence}


def continuous_log_posterior(model: DynamicsModel, prior: PriorModel, meas: MeasurementModel,
                             y, x: SmoothPath, z0, theta, quad_N: int) -> float:
    """``ln psi + ln pi - 1/2 int |G^{-1}(f - dx/dt)|^2 dt - 1/2 int div_x f dt``."""
    terms = continuous_terms(model, prior, meas, y, x, z0, theta, quad_N)
    return float(sum(terms.values()))


def continuous_energy_log_posterior(model: DynamicsModel, prior: PriorModel,
                                    meas: MeasurementModel, y, x: SmoothPath, z0, theta,
                                    quad_N: int) -> float:
    """As :func:`continuous_log_posterior` without the divergence integral."""
    terms = continuous_terms(model, prior, meas, y, x, z0, theta, quad_N)
    return float(terms['prior'] + terms['likelihood'] + terms['energy_sum'])


def fixed_path_convergence(model: DynamicsModel, prior: PriorModel, meas: MeasurementModel, y,
                           x: SmoothPath, z0, theta, deltas: Sequence[float],
                           reference_delta: float = 0.001) -> List[Dict[str, float]]:
    """Gaps between discretised and continuous functionals on nested meshes.

    The first mesh has ``ceil(t_f / deltas[0])`` intervals and each further
    mesh doubles that count, so the meshes are nested and close to the
    requested widths.

    Returns:
        List[Dict[str, float]]: One row per mesh with the Euler and trapezoidal
            values, the continuous references and both absolute gaps.
    """
    theta = np.asarray(theta, dtype=float)
    quad_N = int(np.ceil(x.t_f / reference_delta))
    terms = continuous_terms(model, prior, meas, y, x, z0, theta, quad_N)
    energy_reference = terms['prior'] + terms['likelihood'] + terms['energy_sum']
    map_reference = energy_reference + terms['divergence_sum']

    rows = []
    N = int(np.ceil(x.t_f / deltas[0]))
    for i, _ in enumerate(deltas):
        partition = uniform_partition(x.t_f, N * 2 ** i)
        v = DecisionVector(partition, x.sample(partition.nodes), z0, theta)
        euler = euler_log_posterior(model, prior, meas, y, v).value
        trap = trapezoidal_log_posterior(model, prior, meas, y, v).value
        rows.append({
            'delta': partition.mesh,
            'N': partition.N,
            'euler': euler,
            'trapezoidal': trap,
            'energy_reference': energy_reference,
            'map_reference': map_reference,
            'euler_gap': abs(euler - energy_reference),
            'trapezoidal_gap': abs(trap - map_reference),
        })
    return rows
