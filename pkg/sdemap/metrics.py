"""Estimate quality metrics and Monte Carlo aggregation."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
from scipy.integrate import trapezoid

from sdemap.errors import DomainError, InputError
from sdemap.grid import PwlPath, eval_path
from sdemap.sim import Trajectory
from sdemap.utils import to_jsonable

STATISTICS = ('median', 'lower_quartile', 'upper_quartile', 'min', 'max')


@dataclass
class RunSummary:
    """One Monte Carlo replicate: per-estimator parameters, ISE and solver record."""

    replicate: int
    seed: int
    theta: Dict[str, Dict[str, float]] = field(default_factory=dict)
    ise: Dict[str, float] = field(default_factory=dict)
    objective: Dict[str, float] = field(default_factory=dict)
    diagnostics: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def completed(self) -> bool:
        return self.error is None


def ise(truth: Trajectory, x_hat: PwlPath, z_hat: PwlPath) -> float:
    """Normalised integrated square error of an estimated state path.

    ``(1/t_f) int_0^t_f |X_t - x_hat(t)|^2 + |Z_t - z_hat(t)|^2 dt`` by the
    composite trapezoid rule on the truth's dense grid.

    Raises:
        DomainError: If the horizons differ.
    """
    t_f = truth.t_f
    for path in (x_hat, z_hat):
        if not np.isclose(path.partition.t_f, t_f, rtol=1e-9, atol=0.0):
            raise DomainError(f'estimate horizon {path.partition.t_f} differs from truth {t_f}')
    times = np.minimum(truth.times, min(x_hat.partition.t_f, z_hat.partition.t_f))
    err = (np.sum((truth.x - eval_path(x_hat, times)) ** 2, axis=1)
           + np.sum((truth.z - eval_path(z_hat, times)) ** 2, axis=1))
    return float(trapezoid(err, truth.times) / t_f)


def quartiles(values: Iterable[float]) -> Dict[str, float]:
    """Five-number summary with median-of-halves quartiles.

    The lower (upper) quartile is the median of the lower (upper) half of the
    sorted values; for an odd count the median belongs to both halves. A
    single value gives five equal statistics.
    """
    v = np.sort(np.asarray(list(values), dtype=float))
    if v.size == 0:
        raise InputError('cannot summarise an empty sample')
    half = v.size // 2
    lower = v[:half + v.size % 2]
    upper = v[half:]
    return {
        'median': float(np.median(v)),
        'lower_quartile': float(np.median(lower)),
        'upper_quartile': float(np.median(upper)),
        'min': float(v[0]),
        'max': float(v[-1]),
    }


def aggregate(runs: List[RunSummary]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Per estimator and quantity, the :func:`quartiles` summary over completed runs.

    Quantities are ``ise``, ``objective`` and every parameter name. Runs are
    sorted by replicate index first, so the result does not depend on input
    order.
    """
    ordered = sorted((r for r in runs if r.completed), key=lambda r: r.replicate)
    if not ordered:
        raise InputError('no completed runs to aggregate')
    collected: Dict[str, Dict[str, List[float]]] = {}
    for run in ordered:
        for estimator, value in run.ise.items():
            collected.setdefault(estimator, {}).setdefault('ise', []).append(value)
        for estimator, value in run.objective.items():
            collected.setdefault(estimator, {}).setdefault('objective', []).append(value)
        for estimator, params in run.theta.items():
            for name, value in params.items():
                collected.setdefault(estimator, {}).setdefault(name, []).append(value)
    return {estimator: {quantity: quartiles(values)
                        for quantity, values in sorted(quantities.items())}
            for estimator, quantities in sorted(collected.items())}


def run_summary_to_dict(run: RunSummary) -> Dict[str, Any]:
    return to_jsonable(asdict(run))


def run_summary_from_dict(data: Dict[str, Any]) -> RunSummary:
    return RunSummary(
        replicate=int(data['replicate']), seed=int(data['seed']),
        theta={k: dict(v) for k, v in data.get('theta', {}).items()},
        ise=dict(data.get('ise', {})), objective=dict(data.get('objective', {})),
        diagnostics=dict(data.get('diagnostics', {})), error=data.get('error'))
