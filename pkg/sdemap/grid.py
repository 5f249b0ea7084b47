"""Time partitions and piecewise-linear paths over them."""

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from sdemap.errors import DomainError, InputError

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class Partition:
    """Strictly increasing grid ``0 = t_0 < ... < t_N = t_f``.

    Uniform grids keep ``(t_f, N)`` and build node ``k`` as ``k * t_f / N`` so
    that refining by doubling reproduces the coarse nodes bit-for-bit.
    """

    nodes: np.ndarray
    uniform: bool = False
    widths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).copy()
        if nodes.ndim != 1 or nodes.size < 2:
            raise InputError('a partition needs at least two nodes')
        if nodes[0] != 0.0:
            raise InputError('a partition must start at t = 0')
        widths = np.diff(nodes)
        if np.any(widths <= 0.0):
            raise InputError('partition nodes must be strictly increasing')
        nodes.setflags(write=False)
        widths.setflags(write=False)
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'widths', widths)

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def t_f(self) -> float:
        return float(self.nodes[-1])

    @property
    def mesh(self) -> float:
        return float(np.max(self.widths))

    def refine(self, times: int = 1) -> 'Partition':
        """Halve every interval ``times`` times (nested refinement)."""
        partition = self
        for _ in range(times):
            if partition.uniform:
                partition = uniform_partition(partition.t_f, 2 * partition.N)
            else:
                mids = 0.5 * (partition.nodes[:-1] + partition.nodes[1:])
                merged = np.empty(2 * partition.N + 1)
                merged[0::2] = partition.nodes
                merged[1::2] = mids
                partition = Partition(merged)
        return partition

    def node_indices(self, times: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
        """Indices of the nodes matching ``times`` within ``rtol * t_f``.

        Raises:
            InputError: If any time is not a node of the partition.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.clip(np.searchsorted(self.nodes, times), 0, self.N)
        left = np.clip(idx - 1, 0, self.N)
        pick_left = np.abs(self.nodes[left] - times) < np.abs(self.nodes[idx] - times)
        idx = np.where(pick_left, left, idx)
        tol = rtol * max(self.t_f, 1.0)
        if np.any(np.abs(self.nodes[idx] - times) > tol):
            raise InputError('measurement times must coincide with partition nodes')
        return idx

    def contains(self, other: 'Partition') -> bool:
        """True when every node of ``other`` is a node of this partition."""
        try:
            self.node_indices(other.nodes)
        except InputError:
            return False
        return True


def uniform_partition(t_f: float, N: int) -> Partition:
    """Uniform partition of ``[0, t_f]`` into ``N`` intervals."""
    if N < 1:
        raise DomainError('N must be at least 1')
    if t_f <= 0.0:
        raise DomainError('t_f must be positive')
    k = np.arange(N + 1, dtype=float)
    nodes = k * float(t_f) / N
    nodes[-1] = float(t_f)
    return Partition(nodes, uniform=True)


@dataclass(frozen=True, eq=False)
class PwlPath:
    """Piecewise-linear path with values ``values[k]`` at ``partition.nodes[k]``."""

    partition: Partition
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.size == 0 and values.ndim < 2:
            values = values.reshape(self.partition.N + 1, 0)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.partition.N + 1:
            raise InputError('path values must have one row per partition node')
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t: ArrayLike) -> np.ndarray:
        return eval_path(self, t)


def eval_path(path: PwlPath, t: ArrayLike) -> np.ndarray:
    """Evaluate a piecewise-linear path.

    Args:
        path (PwlPath): The path.
        t (float or np.ndarray): Time or times in ``[0, t_f]``.

    Returns:
        np.ndarray: Shape ``(dim,)`` for a scalar time, ``(len(t), dim)`` otherwise.

    Raises:
        DomainError: If a time lies outside ``[0, t_f]``.
    """
    scalar = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    nodes = path.partition.nodes
    if np.any(times < 0.0) or np.any(times > nodes[-1]):
        raise DomainError('evaluation time outside [0, t_f]')
    if path.dim == 0:
        out = np.zeros((times.size, 0))
    else:
        out = np.column_stack([np.interp(times, nodes, path.values[:, j])
                               for j in range(path.dim)])
    return out[0] if scalar else out


def resample(path: PwlPath, partition: Partition) -> PwlPath:
    """Sample ``path`` at the nodes of ``partition``."""
    if not np.isclose(partition.t_f, path.partition.t_f, rtol=1e-12, atol=0.0):
        raise DomainError('partitions cover different horizons')
    times = np.minimum(partition.nodes, path.partition.t_f)
    return PwlPath(partition, eval_path(path, times))


def sup_norm_distance(a: PwlPath, b: PwlPath) -> float:
    """Supremum over ``[0, t_f]`` of ``|a(t) - b(t)|``.

    The difference of two piecewise-linear paths is piecewise linear on the
    union of both grids, so the supremum is attained at one of those nodes.
    """
    if not np.isclose(a.partition.t_f, b.partition.t_f, rtol=1e-12, atol=0.0):
        raise DomainError('paths cover different horizons')
    if a.dim != b.dim:
        raise InputError('paths have different dimensions')
    t_f = min(a.partition.t_f, b.partition.t_f)
    times = np.minimum(np.union1d(a.partition.nodes, b.partition.nodes), t_f)
    diff = eval_path(a, times) - eval_path(b, times)
    if diff.shape[1] == 0:
        return 0.0
    return float(np.max(np.linalg.norm(diff, axis=1)))


def path_from_function(fun, partition: Partition) -> PwlPath:
    """Piecewise-linear interpolant of ``fun`` sampled at the partition nodes."""
    values = np.asarray([np.atleast_1d(fun(t)) for t in partition.nodes], dtype=float)
    return PwlPath(partition, values)
