"""Seeded simulation of the noisy/clean SDE system.

Schemes:
    euler_maruyama:    X += f h + G dW,  Z += h_clean h
    order15_additive:  strong order 1.5 Taylor scheme for additive noise, with
                       drift derivatives taken by central differences along the
                       needed directions.

Both step the clean states as drift-only channels. Every run is determined by
its seed through a counter-based Philox generator (see ``RNG_METADATA``).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from sdemap.errors import DomainError, InputError
from sdemap.grid import Partition, PwlPath
from sdemap.model import BenchmarkSpec, DynamicsModel
from sdemap.utils import RNG_METADATA, make_generator, read_csv, spawn_generators, write_csv

logger = logging.getLogger(__name__)

SCHEMES = ('euler_maruyama', 'order15_additive')


@dataclass(frozen=True)
class SimConfig:
    """Simulator settings: substep, scheme and 64-bit seed."""

    h_sim: float = 0.005
    scheme: str = 'order15_additive'
    seed: int = 0

    def __post_init__(self):
        if not self.h_sim > 0.0:
            raise DomainError('h_sim must be positive')
        if self.scheme not in SCHEMES:
            raise InputError(f'unknown scheme {self.scheme!r}; expected one of {SCHEMES}')
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InputError('seed must be a 64-bit unsigned integer')


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Simulated path on the dense grid ``times``."""

    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    seed: Optional[int]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def t_f(self) -> float:
        return float(self.times[-1])

    def x_path(self) -> PwlPath:
        return PwlPath(Partition(self.times), self.x)

    def z_path(self) -> PwlPath:
        return PwlPath(Partition(self.times), self.z)

    def at(self, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """States at grid times (exact lookup on the dense grid)."""
        idx = Partition(self.times).node_indices(times)
        return self.x[idx], self.z[idx]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Measurements ``values[k]`` taken at ``times[k]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != times.size:
            raise InputError('dataset needs one row of values per measurement time')
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'values', values)


def _step_count(t_f: float, h: float) -> int:
    if not t_f > 0.0:
        raise DomainError('t_f must be positive')
    steps = int(round(t_f / h))
    if steps < 1 or abs(steps * h - t_f) > 1e-9 * t_f:
        raise InputError(f'h_sim = {h} does not divide t_f = {t_f}')
    return steps


def draw_increments(rng: np.random.Generator, steps: int, paths: int, channels: int,
                    h: float, double_integrals: bool = True):
    """Wiener increments and (optionally) their double integrals.

    ``dW = sqrt(h) U1`` and ``dZ = h^{3/2} (U1 + U2 / sqrt(3)) / 2`` so that
    each channel has covariance ``[[h, h^2/2], [h^2/2, h^3/3]]``.

    Returns:
        Tuple[np.ndarray, Optional[np.ndarray]]: Arrays of shape
            ``(steps, paths, channels)``.
    """
    u1 = rng.standard_normal((steps, paths, channels))
    dW = np.sqrt(h) * u1
    if not double_integrals:
        return dW, None
    u2 = rng.standard_normal((steps, paths, channels))
    dZ = 0.5 * h ** 1.5 * (u1 + u2 / np.sqrt(3.0))
    return dW, dZ


def _joint_drift(model: DynamicsModel, t: np.ndarray, y: np.ndarray, theta: np.ndarray):
    x, z = y[:, :model.n], y[:, model.n:]
    return np.concatenate([model.f(t, x, z, theta), model.h(t, x, z, theta)], axis=1)


def _directional(model, t, y, theta, direction, scale=1e-6):
    """Central-difference derivative of the joint drift along ``direction`` (per row)."""
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    eps = scale * (1.0 + np.linalg.norm(y, axis=1, keepdims=True))
    unit = direction / safe
    plus = _joint_drift(model, t, y + eps * unit, theta)
    minus = _joint_drift(model, t, y - eps * unit, theta)
    return (plus - minus) / (2.0 * eps) * norm


def _order15_step(model, t, y, theta, h, B, dW, dZ, a):
    d = y.shape[1]
    K = y.shape[0]
    # dt derivative
    eps_t = 1e-6 * (1.0 + abs(float(t[0])))
    a_t = (_joint_drift(model, t + eps_t, y, theta)
           - _joint_drift(model, t - eps_t, y, theta)) / (2.0 * eps_t)
    # (grad a) a
    grad_a_a = _directional(model, t, y, theta, a)
    L0a = a_t + grad_a_a
    increment = a * h + dW @ B.T
    for j in range(B.shape[1]):
        bj = np.broadcast_to(B[:, j], (K, d))
        if not np.any(bj):
            continue
        first = _directional(model, t, y, theta, bj)
        increment += first * dZ[:, j:j + 1]
        eps2 = 1e-4 * (1.0 + np.linalg.norm(y, axis=1, keepdims=True))
        unit = bj / np.linalg.norm(B[:, j])
        second = (_joint_drift(model, t, y + eps2 * unit, theta) - 2.0 * a
                  + _joint_drift(model, t, y - eps2 * unit, theta)) / eps2 ** 2
        L0a += 0.5 * second * np.linalg.norm(B[:, j]) ** 2
    return y + increment + 0.5 * L0a * h ** 2


def simulate_ensemble(model: DynamicsModel, x0: np.ndarray, z0: np.ndarray, theta: np.ndarray,
                      t_f: float, cfg: SimConfig, rng: Optional[np.random.Generator] = None,
                      dW: Optional[np.ndarray] = None, dZ: Optional[np.ndarray] = None,
                      keep_path: bool = True) -> Dict[str, Any]:
    """Simulate many paths at once.

    Args:
        model (DynamicsModel): System to simulate.
        x0 (np.ndarray): Initial noisy states, shape ``(paths, n)``.
        z0 (np.ndarray): Initial clean states, shape ``(paths, q)``.
        theta (np.ndarray): Parameter vector shared by all paths.
        t_f (float): Horizon; must be a multiple of ``cfg.h_sim``.
        cfg (SimConfig): Scheme, substep and seed.
        rng (Optional[np.random.Generator]): Overrides the generator built
            from ``cfg.seed``.
        dW (Optional[np.ndarray]): Pre-drawn Wiener increments of shape
            ``(steps, paths, n)`` for common-noise studies.
        dZ (Optional[np.ndarray]): Matching double integrals; required with
            ``dW`` for the order 1.5 scheme.
        keep_path (bool): Store every substep, otherwise only the endpoints.

    Returns:
        Dict[str, Any]: ``times``, ``x`` and ``z`` (stacked over time first),
            ``left_box`` per path and the first exit time (``nan`` if none).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    z0 = np.asarray(z0, dtype=float).reshape(x0.shape[0], model.q)
    theta = np.asarray(theta, dtype=float)
    h = cfg.h_sim
    steps = _step_count(t_f, h)
    paths = x0.shape[0]
    order15 = cfg.scheme == 'order15_additive'

    if dW is None:
        generator = rng if rng is not None else make_generator(cfg.seed)
        dW, dZ = draw_increments(generator, steps, paths, model.n, h, double_integrals=order15)
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (steps, paths, model.n):
            raise InputError(f'dW must have shape {(steps, paths, model.n)}, got {dW.shape}')
        if order15:
            if dZ is None:
                raise InputError('the order 1.5 scheme needs double integrals dZ with dW')
            dZ = np.asarray(dZ, dtype=float)
            if dZ.shape != dW.shape:
                raise InputError('dZ must have the shape of dW')

    B = np.vstack([model.diffusion, np.zeros((model.q, model.n))])
    times = np.arange(steps + 1, dtype=float) * h
    times[-1] = float(t_f)
    y = np.concatenate([x0, z0], axis=1)
    history = [y.copy()] if keep_path else None
    left_box = ~model.in_box(y[:, :model.n], y[:, model.n:])
    first_exit = np.where(left_box, 0.0, np.nan)

    for k in range(steps):
        t = np.full(paths, times[k])
        a = _joint_drift(model, t, y, theta)
        if order15:
            y = _order15_step(model, t, y, theta, h, B, dW[k], dZ[k], a)
        else:
            y = y + a * h + dW[k] @ B.T
        if not np.all(np.isfinite(y)):
            raise DomainError(f'simulation diverged at t = {times[k + 1]}')
        outside = ~model.in_box(y[:, :model.n], y[:, model.n:])
        newly = outside & ~left_box
        if np.any(newly):
            first_exit[newly] = times[k + 1]
            left_box |= outside
        if keep_path:
            history.append(y.copy())

    if np.any(left_box):
        logger.warning('%d of %d paths of %s left the validity box', int(left_box.sum()),
                       paths, model.name)
    states = np.stack(history) if keep_path else np.stack([np.concatenate([x0, z0], axis=1), y])
    return {
        'times': times if keep_path else times[[0, -1]],
        'x': states[:, :, :model.n],
        'z': states[:, :, model.n:],
        'left_box': left_box,
        'first_exit': first_exit,
    }


def simulate(model: DynamicsModel, x0, z0, theta, t_f: float, cfg: SimConfig,
             rng: Optional[np.random.Generator] = None, dW: Optional[np.ndarray] = None,
             dZ: Optional[np.ndarray] = None) -> Trajectory:
    """Simulate one path; deterministic given ``cfg.seed`` (or ``rng``).

    Leaving the validity box does not stop the run; it is recorded in the
    trajectory metadata.
    """
    x0 = np.asarray(x0, dtype=float).reshape(1, model.n)
    z0 = np.asarray(z0, dtype=float).reshape(1, model.q)
    if dW is not None:
        dW = np.asarray(dW, dtype=float).reshape(-1, 1, model.n)
        dZ = None if dZ is None else np.asarray(dZ, dtype=float).reshape(-1, 1, model.n)
    out = simulate_ensemble(model, x0, z0, theta, t_f, cfg, rng=rng, dW=dW, dZ=dZ)
    exit_time = float(out['first_exit'][0])
    metadata = {
        'scheme': cfg.scheme,
        'h_sim': cfg.h_sim,
        'model': model.name,
        'rng': dict(RNG_METADATA),
        'left_validity_box': bool(out['left_box'][0]),
        'first_exit_time': None if np.isnan(exit_time) else exit_time,
    }
    return Trajectory(times=out['times'], x=out['x'][:, 0, :], z=out['z'][:, 0, :],
                      theta=np.asarray(theta, dtype=float).copy(), seed=int(cfg.seed),
                      metadata=metadata)


def generate_dataset(spec: BenchmarkSpec, seed: int, cfg: Optional[SimConfig] = None
                     ) -> Tuple[Trajectory, Dataset]:
    """Simulate a benchmark from its initial-state prior and sample measurements.

    The seed spawns three independent streams: initial state, process noise
    and measurement noise. Parameters are the benchmark's nominal values.
    """
    cfg = SimConfig(seed=int(seed)) if cfg is None else SimConfig(cfg.h_sim, cfg.scheme, int(seed))
    ratio = spec.t_s / cfg.h_sim
    if abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise InputError(f'h_sim = {cfg.h_sim} does not divide t_s = {spec.t_s}')
    init_rng, noise_rng, meas_rng = spawn_generators(seed, 3)
    x0, z0, _ = spec.prior.sample(init_rng)
    theta = spec.theta_nominal
    traj = simulate(spec.dynamics, x0, z0, theta, spec.t_f, cfg, rng=noise_rng)
    times = spec.measurement.sample_times
    xs, zs = traj.at(times)
    y = spec.measurement.sample(xs, zs, theta, meas_rng)
    metadata = dict(traj.metadata, benchmark=spec.name, seed=int(seed))
    traj = Trajectory(traj.times, traj.x, traj.z, traj.theta, int(seed), metadata)
    return traj, Dataset(times, y)


# -- CSV persistence --------------------------------------------------------


def write_trajectory_csv(path: str, traj: Trajectory) -> None:
    """Columns ``t, x_1..x_n, z_1..z_q``."""
    n, q = traj.x.shape[1], traj.z.shape[1]
    header = ['t'] + [f'x_{i + 1}' for i in range(n)] + [f'z_{i + 1}' for i in range(q)]
    write_csv(path, header, np.column_stack([traj.times, traj.x, traj.z]))


def read_trajectory_csv(path: str) -> Trajectory:
    header, rows = read_csv(path)
    if not header or header[0] != 't':
        raise InputError(f'{path}: trajectory CSV must start with a t column')
    n = sum(1 for h in header if h.startswith('x_'))
    return Trajectory(times=rows[:, 0], x=rows[:, 1:1 + n], z=rows[:, 1 + n:],
                      theta=np.zeros(0), seed=None)


def write_dataset_csv(path: str, data: Dataset) -> None:
    """Columns ``t_k, y_1..y_p``."""
    header = ['t_k'] + [f'y_{i + 1}' for i in range(data.values.shape[1])]
    write_csv(path, header, np.column_stack([data.times, data.values]))


def read_dataset_csv(path: str) -> Dataset:
    header, rows = read_csv(path)
    if not header or header[0] != 't_k':
        raise InputError(f'{path}: dataset CSV must start with a t_k column')
    return Dataset(rows[:, 0], rows[:, 1:])
