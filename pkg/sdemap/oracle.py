"""Linear-Gaussian reference solutions: Kalman filter + RTS smoother and a dense MAP."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from sdemap.errors import InputError, NumericalError
from sdemap.grid import Partition
from sdemap.model import BenchmarkSpec, DynamicsModel, MeasurementModel, PriorModel
from sdemap.utils import make_generator

logger = logging.getLogger(__name__)

CLEAN_JITTER = 1e-12


@dataclass(frozen=True, eq=False)
class LinearGaussianSystem:
    """Discrete linear-Gaussian chain over the joint state ``s = [x; z]``.

    ``s_{k+1} = A[k] s_k + b[k] + w_k`` with ``w_k ~ N(0, Q[k])`` for
    ``k = 0..N-1``; measurements ``y_j = C[j] s_{nodes[j]} + v_j`` with
    ``v_j ~ N(0, R[j])``; ``s_0 ~ N(mu0, P0)``. The first ``n`` coordinates
    are noise-driven, the remaining ``q`` are not.
    """

    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    n: int
    mu0: np.ndarray
    P0: np.ndarray
    meas_nodes: np.ndarray
    C: np.ndarray
    R: np.ndarray

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.A.shape[0]

    def check(self) -> None:
        """Raise :class:`NumericalError` unless P0, R and the noisy block of Q are PD."""
        _cholesky(self.P0, node=0, what='P0')
        for j, R in enumerate(self.R):
            _cholesky(R, node=int(self.meas_nodes[j]), what='R')
        for k, Q in enumerate(self.Q):
            _cholesky(Q[:self.n, :self.n], node=k, what='Q')


def _cholesky(M: np.ndarray, node: int, what: str):
    try:
        return scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f'{what} is not positive definite at node {node}', node=node) from exc


def _affine_parts(model: DynamicsModel, t: np.ndarray, theta: np.ndarray, rng):
    """Joint drift Jacobian and offset at times ``t`` for an affine drift."""
    K, n, q = t.size, model.n, model.q
    d = n + q

    def drift(s):
        return np.concatenate([model.f(t, s[:, :n], s[:, n:], theta),
                               model.h(t, s[:, :n], s[:, n:], theta)], axis=1)

    offset = drift(np.zeros((K, d)))
    J = np.empty((K, d, d))
    for i in range(d):
        e = np.zeros((K, d))
        e[:, i] = 1.0
        J[:, :, i] = drift(e) - offset
    probe = rng.standard_normal((K, d))
    predicted = offset + np.einsum('kij,kj->ki', J, probe)
    actual = drift(probe)
    scale = 1.0 + np.max(np.abs(actual))
    if np.max(np.abs(predicted - actual)) > 1e-10 * scale:
        raise InputError(f'{model.name} drift is not affine in the state')
    return J, offset


def discretize_linear(model: DynamicsModel, partition: Partition, theta,
                      prior: Optional[PriorModel] = None,
                      measurement: Optional[MeasurementModel] = None) -> LinearGaussianSystem:
    """Euler discretisation of an affine model on ``partition``.

    ``A_k = I + J(t_k) delta_k``, ``b_k = c(t_k) delta_k`` and
    ``Q_k = [G; 0][G; 0]^T delta_k`` with ``1e-12`` added on the clean diagonal.
    Without a prior, ``s_0 ~ N(0, I)``; without a measurement model there are
    no measurements.

    Args:
        model (DynamicsModel): System whose drift is affine in ``(x, z)``.
        partition (Partition): Discretisation grid.
        theta (np.ndarray): Parameters at which the drift is taken.
        prior (Optional[PriorModel]): Supplies ``initial_gaussian``.
        measurement (Optional[MeasurementModel]): Supplies ``linear_gaussian``.

    Returns:
        LinearGaussianSystem: The discrete chain.

    Raises:
        InputError: If the drift is not affine or the prior/measurement models
            carry no Gaussian description.
    """
    theta = np.asarray(theta, dtype=float)
    n, q = model.n, model.q
    d = n + q
    delta = partition.widths
    J, offset = _affine_parts(model, partition.nodes[:-1], theta, make_generator(0))
    A = np.eye(d)[None] + J * delta[:, None, None]
    b = offset * delta[:, None]
    B = np.vstack([model.diffusion, np.zeros((q, n))])
    Q = (B @ B.T)[None] * delta[:, None, None]
    Q[:, n:, n:] += CLEAN_JITTER * np.eye(q)

    if prior is None:
        mu0, P0 = np.zeros(d), np.eye(d)
    elif prior.initial_gaussian is None:
        raise InputError('prior has no Gaussian initial-state description')
    else:
        mu0, P0 = (np.asarray(a, dtype=float) for a in prior.initial_gaussian)

    if measurement is None or measurement.sample_times.size == 0:
        nodes = np.zeros(0, dtype=int)
        C = np.zeros((0, 0, d))
        R = np.zeros((0, 0, 0))
    elif measurement.linear_gaussian is None:
        raise InputError('measurement model is not linear-Gaussian')
    else:
        nodes = partition.node_indices(measurement.sample_times)
        C0, R0 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in measurement.linear_gaussian)
        C = np.broadcast_to(C0, (nodes.size,) + C0.shape).copy()
        R = np.broadcast_to(R0, (nodes.size,) + R0.shape).copy()
    return LinearGaussianSystem(A=A, b=b, Q=Q, n=n, mu0=mu0, P0=P0, meas_nodes=nodes, C=C, R=R)


def linear_system_for(spec: BenchmarkSpec, partition: Partition) -> LinearGaussianSystem:
    """Linear-Gaussian chain of a benchmark at its nominal parameters."""
    return discretize_linear(spec.dynamics, partition, spec.theta_nominal,
                             prior=spec.prior, measurement=spec.measurement)


def _measurements(sys: LinearGaussianSystem, y) -> np.ndarray:
    values = np.asarray(getattr(y, 'values', y) if y is not None else np.zeros((0, 1)),
                        dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != sys.meas_nodes.size:
        raise InputError(f'{values.shape[0]} measurements for {sys.meas_nodes.size} nodes')
    return values


def rts_smoother(sys: LinearGaussianSystem, y) -> Tuple[np.ndarray, np.ndarray]:
    """Kalman filter followed by the Rauch-Tung-Striebel backward pass.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Smoothed means ``(N+1, d)`` and
            covariances ``(N+1, d, d)``.

    Raises:
        NumericalError: If an innovation or predicted covariance is not PD.
    """
    ys = _measurements(sys, y)
    N, d = sys.N, sys.dim
    lookup = {int(node): j for j, node in enumerate(sys.meas_nodes)}
    xs = np.empty((N + 1, d))
    Ps = np.empty((N + 1, d, d))
    x_pred = np.empty((N + 1, d))
    P_pred = np.empty((N + 1, d, d))
    x, P = sys.mu0.copy(), sys.P0.copy()
    eye = np.eye(d)
    for k in range(N + 1):
        x_pred[k], P_pred[k] = x, P
        j = lookup.get(k)
        if j is not None:
            C, R = sys.C[j], sys.R[j]
            S = C @ P @ C.T + R
            factor = _cholesky(S, node=k, what='innovation covariance')
            K = scipy.linalg.cho_solve(factor, C @ P).T
            x = x + K @ (ys[j] - C @ x)
            I_KC = eye - K @ C
            P = I_KC @ P @ I_KC.T + K @ R @ K.T
            P = 0.5 * (P + P.T)
        xs[k], Ps[k] = x, P
        if k < N:
            x = sys.A[k] @ x + sys.b[k]
            P = sys.A[k] @ P @ sys.A[k].T + sys.Q[k]
            P = 0.5 * (P + P.T)

    for k in range(N - 1, -1, -1):
        factor = _cholesky(P_pred[k + 1], node=k + 1, what='predicted covariance')
        G = scipy.linalg.cho_solve(factor, sys.A[k] @ Ps[k]).T
        xs[k] = xs[k] + G @ (xs[k + 1] - x_pred[k + 1])
        Ps[k] = Ps[k] + G @ (Ps[k + 1] - P_pred[k + 1]) @ G.T
        Ps[k] = 0.5 * (Ps[k] + Ps[k].T)
    return xs, Ps


def dense_map(sys: LinearGaussianSystem, y) -> np.ndarray:
    """Maximiser of the joint Gaussian log-density by dense normal equations.

    The decision variables are the noisy states at every node and the initial
    clean state; later clean states follow from the deterministic recursion,
    so no jitter is needed.

    Returns:
        np.ndarray: Means ``(N+1, d)``.

    Raises:
        InputError: If the problem exceeds 5000 unknowns.
        NumericalError: If the normal matrix is singular.
    """
    ys = _measurements(sys, y)
    N, d, n = sys.N, sys.dim, sys.n
    q = d - n
    size = (N + 1) * n + q
    if size > 5000:
        raise InputError(f'dense MAP limited to 5000 unknowns, got {size}')

    # s_k = S[k] u + o[k]
    S = np.zeros((N + 1, d, size))
    o = np.zeros((N + 1, d))
    for k in range(N + 1):
        S[k, :n, k * n:(k + 1) * n] = np.eye(n)
    S[0, n:, (N + 1) * n:] = np.eye(q)
    for k in range(N):
        S[k + 1, n:] = sys.A[k, n:] @ S[k]
        o[k + 1, n:] = sys.A[k, n:] @ o[k] + sys.b[k, n:]

    H = np.zeros((size, size))
    rhs = np.zeros(size)

    def add(L, c, W):
        nonlocal H, rhs
        LW = L.T @ W
        H += LW @ L
        rhs += LW @ c

    add(S[0], sys.mu0 - o[0], scipy.linalg.cho_solve(_cholesky(sys.P0, 0, 'P0'), np.eye(d)))
    for k in range(N):
        L = S[k + 1, :n] - sys.A[k, :n] @ S[k]
        c = sys.A[k, :n] @ o[k] + sys.b[k, :n] - o[k + 1, :n]
        W = scipy.linalg.cho_solve(_cholesky(sys.Q[k, :n, :n], k, 'Q'), np.eye(n))
        add(L, c, W)
    for j, node in enumerate(sys.meas_nodes):
        C = sys.C[j]
        W = scipy.linalg.cho_solve(_cholesky(sys.R[j], int(node), 'R'), np.eye(C.shape[0]))
        add(C @ S[node], ys[j] - C @ o[node], W)

    try:
        u = scipy.linalg.solve(H, rhs, assume_a='pos')
    except np.linalg.LinAlgError as exc:
        raise NumericalError('normal matrix of the dense MAP is singular') from exc
    return np.einsum('kij,j->ki', S, u) + o
