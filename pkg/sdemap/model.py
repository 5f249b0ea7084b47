"""System class, prior and measurement models, and the benchmark registry.

Every drift map is batched: ``t`` has shape ``(K,)``, ``x`` ``(K, n)``, ``z``
``(K, q)`` and ``theta`` ``(m,)``; noisy drifts return ``(K, n)`` and clean
drifts ``(K, q)``. Jacobian hooks return ``(K, out, dim)`` arrays.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.special import log_ndtr
from scipy.stats import norm

from sdemap.errors import DomainError, InputError
from sdemap.grid import PwlPath, eval_path
from sdemap.utils import central_difference, fd_steps, make_generator, smooth_clamp

logger = logging.getLogger(__name__)

_warned_missing_hint = set()


def _as_batch(t, x, z):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        z = z.reshape(1, -1)
    if t.size == 1 and x.shape[0] > 1:
        t = np.full(x.shape[0], t[0])
    return t, x, z, single


def _fd_batched(fun, t, x, z, theta):
    """Central differences of a batched map ``fun(t, x, z, theta) -> (K, p)``.

    Returns the three Jacobian blocks with respect to x, z and theta.
    """
    base = np.asarray(fun(t, x, z, theta))
    K, p = base.shape[0], base.reshape(base.shape[0], -1).shape[1]

    def along(arr, which):
        cols = []
        for i in range(arr.shape[1]):
            step = np.maximum(1e-6, 1e-6 * np.abs(arr[:, i]))
            plus, minus = arr.copy(), arr.copy()
            plus[:, i] += step
            minus[:, i] -= step
            args_p = (t, plus, z) if which == 'x' else (t, x, plus)
            args_m = (t, minus, z) if which == 'x' else (t, x, minus)
            fp = np.asarray(fun(*args_p, theta)).reshape(K, p)
            fm = np.asarray(fun(*args_m, theta)).reshape(K, p)
            cols.append((fp - fm) / (2.0 * step[:, None]))
        return np.stack(cols, axis=-1) if cols else np.zeros((K, p, 0))

    jx = along(x, 'x')
    jz = along(z, 'z')
    cols = []
    steps = fd_steps(theta)
    for i in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += steps[i]
        minus[i] -= steps[i]
        fp = np.asarray(fun(t, x, z, plus)).reshape(K, p)
        fm = np.asarray(fun(t, x, z, minus)).reshape(K, p)
        cols.append((fp - fm) / (2.0 * steps[i]))
    jth = np.stack(cols, axis=-1) if cols else np.zeros((K, p, 0))
    return jx, jz, jth


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Drift pair (f, h) and constant diffusion G of the noisy/clean SDE system.

    ``dX = f(t, X, Z, theta) dt + G dW`` and ``dZ = h(t, X, Z, theta) dt``.
    Optional hooks supply analytic derivatives; missing ones fall back to
    central differences. When ``validity_box`` is given, the states are
    passed through :func:`sdemap.utils.smooth_clamp` before every drift
    evaluation. ``clean_drift_z_independent`` declares that h does not read z,
    which lets the clean-state recursions run vectorised.
    """

    n: int
    q: int
    m: int
    drift_noisy: Callable
    drift_clean: Callable
    diffusion: np.ndarray
    drift_divergence: Optional[Callable] = None
    noisy_jacobian: Optional[Callable] = None
    clean_jacobian: Optional[Callable] = None
    noisy_jacobian_x_derivative: Optional[Callable] = None
    linear_drift: Optional[Callable] = None
    linear_parameters: Tuple[int, ...] = ()
    lipschitz_hint: Optional[Tuple[float, float]] = None
    validity_box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    clean_drift_z_independent: bool = False
    name: str = 'model'

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.diffusion, dtype=float))
        if G.shape != (self.n, self.n):
            raise InputError(f'diffusion must be {self.n}x{self.n}, got {G.shape}')
        G.setflags(write=False)
        object.__setattr__(self, 'diffusion', G)
        if self.validity_box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.validity_box)
            if lo.shape != (self.n + self.q,) or np.any(hi <= lo):
                raise InputError('validity box must bound every x and z coordinate')
            object.__setattr__(self, 'validity_box', (lo, hi))

    # -- diffusion -------------------------------------------------------

    def is_diffusion_invertible(self) -> bool:
        """LU check ``|det G| > 1e-12 * ||G||^n``."""
        G = self.diffusion
        scale = np.linalg.norm(G, 2)
        if scale == 0.0:
            return False
        lu, _ = scipy.linalg.lu_factor(G, check_finite=True)
        det = np.prod(np.diag(lu))
        return bool(abs(det) > 1e-12 * scale ** self.n)

    @property
    def diffusion_inverse(self) -> np.ndarray:
        if not self.is_diffusion_invertible():
            raise DomainError(f'diffusion matrix of {self.name} is not invertible')
        return np.linalg.inv(self.diffusion)

    # -- clamping --------------------------------------------------------

    def _clamp(self, x, z):
        if self.validity_box is None:
            ones_x, ones_z = np.ones_like(x), np.ones_like(z)
            return x, z, ones_x, ones_z, np.zeros_like(x), np.zeros_like(z)
        lo, hi = self.validity_box
        xc, dx1, dx2 = smooth_clamp(x, lo[:self.n], hi[:self.n])
        zc, dz1, dz2 = smooth_clamp(z, lo[self.n:], hi[self.n:])
        return xc, zc, dx1, dz1, dx2, dz2

    def in_box(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Boolean per batch row: state inside the validity box."""
        x = np.atleast_2d(x)
        z = np.asarray(z).reshape(x.shape[0], -1)
        if self.validity_box is None:
            return np.ones(x.shape[0], dtype=bool)
        lo, hi = self.validity_box
        s = np.concatenate([x, z], axis=1)
        return np.all((s >= lo) & (s <= hi), axis=1)

    # -- drifts ----------------------------------------------------------

    def f(self, t, x, z, theta) -> np.ndarray:
        t, x, z, single = _as_batch(t, x, z)
        xc, zc = self._clamp(x, z)[:2]
        out = np.asarray(self.drift_noisy(t, xc, zc, np.asarray(theta, dtype=float)),
                         dtype=float).reshape(x.shape[0], self.n)
        return out[0] if single else out

    def h(self, t, x, z, theta) -> np.ndarray:
        t, x, z, single = _as_batch(t, x, z)
        xc, zc = self._clamp(x, z)[:2]
        out = np.asarray(self.drift_clean(t, xc, zc, np.asarray(theta, dtype=float)),
                         dtype=float).reshape(x.shape[0], self.q)
        return out[0] if single else out

    def noisy_jacobians(self, t, x, z, theta):
        """Effective (fx, fz, ftheta) including the clamp's chain rule."""
        t, x, z, _ = _as_batch(t, x, z)
        theta = np.asarray(theta, dtype=float)
        xc, zc, dx1, dz1, _, _ = self._clamp(x, z)
        if self.noisy_jacobian is not None:
            fx, fz, fth = (np.asarray(a, dtype=float) for a in self.noisy_jacobian(t, xc, zc, theta))
        else:
            fx, fz, fth = _fd_batched(self.drift_noisy, t, xc, zc, theta)
        K = x.shape[0]
        fx = fx.reshape(K, self.n, self.n) * dx1[:, None, :]
        fz = fz.reshape(K, self.n, self.q) * dz1[:, None, :]
        return fx, fz, fth.reshape(K, self.n, self.m)

    def clean_jacobians(self, t, x, z, theta):
        """Effective (hx, hz, htheta) including the clamp's chain rule."""
        t, x, z, _ = _as_batch(t, x, z)
        theta = np.asarray(theta, dtype=float)
        xc, zc, dx1, dz1, _, _ = self._clamp(x, z)
        if self.clean_jacobian is not None:
            hx, hz, hth = (np.asarray(a, dtype=float) for a in self.clean_jacobian(t, xc, zc, theta))
        else:
            hx, hz, hth = _fd_batched(self.drift_clean, t, xc, zc, theta)
        K = x.shape[0]
        hx = hx.reshape(K, self.q, self.n) * dx1[:, None, :]
        hz = hz.reshape(K, self.q, self.q) * dz1[:, None, :]
        return hx, hz, hth.reshape(K, self.q, self.m)

    def noisy_jacobian_x_gradient(self, t, x, z, theta) -> np.ndarray:
        """Derivative of the effective x-Jacobian of f.

        Returns:
            np.ndarray: Shape ``(K, n, n, n + q + m)``; entry ``[k, i, j, l]`` is
                the derivative of ``df_i/dx_j`` with respect to variable ``l`` of
                the stacked ``(x, z, theta)``.
        """
        t, x, z, _ = _as_batch(t, x, z)
        theta = np.asarray(theta, dtype=float)
        n, q, m = self.n, self.q, self.m
        K = x.shape[0]
        if self.noisy_jacobian_x_derivative is None:
            def fx_flat(tt, xx, zz, th):
                return self.noisy_jacobians(tt, xx, zz, th)[0].reshape(xx.shape[0], n * n)
            jx, jz, jth = _fd_batched(fx_flat, t, x, z, theta)
            full = np.concatenate([jx, jz, jth], axis=-1)
            return full.reshape(K, n, n, n + q + m)

        xc, zc, dx1, dz1, dx2, _ = self._clamp(x, z)
        raw = np.asarray(self.noisy_jacobian_x_derivative(t, xc, zc, theta), dtype=float)
        raw = raw.reshape(K, n, n, n + q + m)
        scale = np.concatenate([dx1, dz1, np.ones((K, m))], axis=1)
        out = raw * dx1[:, None, :, None] * scale[:, None, None, :]
        if np.any(dx2 != 0.0):
            if self.noisy_jacobian is not None:
                fx_raw = np.asarray(self.noisy_jacobian(t, xc, zc, theta)[0]).reshape(K, n, n)
            else:
                fx_raw = _fd_batched(self.drift_noisy, t, xc, zc, theta)[0]
            for j in range(n):
                out[:, :, j, j] += fx_raw[:, :, j] * dx2[:, j][:, None]
        return out

    def divergence(self, t, x, z, theta) -> np.ndarray:
        """div_x f, analytic when supplied and no clamp is active."""
        t, x, z, single = _as_batch(t, x, z)
        theta = np.asarray(theta, dtype=float)
        xc, zc, dx1, _, _, _ = self._clamp(x, z)
        if self.drift_divergence is not None and np.all(dx1 == 1.0):
            out = np.asarray(self.drift_divergence(t, xc, zc, theta), dtype=float).reshape(-1)
            out = np.broadcast_to(out, (x.shape[0],)).copy()
        else:
            fx = self.noisy_jacobians(t, x, z, theta)[0]
            out = np.trace(fx, axis1=1, axis2=2)
        return out[0] if single else out

    def numerical_divergence(self, t, x, z, theta) -> np.ndarray:
        """Central-difference divergence of the effective noisy drift."""
        t, x, z, single = _as_batch(t, x, z)
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(x.shape[0])
        for i in range(self.n):
            step = np.maximum(1e-6, 1e-6 * np.abs(x[:, i]))
            plus, minus = x.copy(), x.copy()
            plus[:, i] += step
            minus[:, i] -= step
            out += (self.f(t, plus, z, theta)[:, i] - self.f(t, minus, z, theta)[:, i]) / (2.0 * step)
        return out[0] if single else out

    def check_contraction(self, mesh: float) -> Optional[bool]:
        """Check ``(L_f + L_h) * mesh < 2``; None (with a warning) without a hint."""
        if self.lipschitz_hint is None:
            if self.name not in _warned_missing_hint:
                _warned_missing_hint.add(self.name)
                logger.warning('no Lipschitz hint for %s; contraction check skipped, '
                               'relying on the fixed-point residual', self.name)
            return None
        L_f, L_h = self.lipschitz_hint
        return bool((L_f + L_h) * mesh < 2.0)


@dataclass(frozen=True, eq=False)
class PriorModel:
    """Joint prior over (x0, z0, theta) given as a log-density up to a constant."""

    log_density_fn: Callable
    sampler: Callable
    support_indicator: Callable
    gradient_fn: Optional[Callable] = None
    theta_guess: Optional[np.ndarray] = None
    initial_gaussian: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def log_density(self, x0, z0, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if not self.support_indicator(theta):
            return -np.inf
        return float(self.log_density_fn(np.asarray(x0, dtype=float),
                                         np.asarray(z0, dtype=float), theta))

    def gradient(self, x0, z0, theta) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x0, z0, theta = (np.asarray(a, dtype=float) for a in (x0, z0, theta))
        if self.gradient_fn is not None:
            gx, gz, gth = self.gradient_fn(x0, z0, theta)
            return np.asarray(gx, float), np.asarray(gz, float), np.asarray(gth, float)
        n, q = x0.size, z0.size
        g = central_difference(lambda v: self.log_density(v[:n], v[n:n + q], v[n + q:]),
                               np.concatenate([x0, z0, theta]))
        return g[:n], g[n:n + q], g[n + q:]

    def sample(self, rng: np.random.Generator):
        """Draw (x0, z0, theta)."""
        return self.sampler(rng)


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Discrete-time measurements at ``sample_times`` with log-likelihood ``ln psi``."""

    sample_times: np.ndarray
    log_density_fn: Callable
    sampler_fn: Callable
    gradient_fn: Optional[Callable] = None
    linear_gaussian: Optional[Tuple[np.ndarray, np.ndarray]] = None
    kind: str = 'custom'

    def __post_init__(self):
        times = np.asarray(self.sample_times, dtype=float).reshape(-1)
        if times.size > 1 and np.any(np.diff(times) <= 0.0):
            raise InputError('sample times must be strictly increasing')
        times.setflags(write=False)
        object.__setattr__(self, 'sample_times', times)

    def log_likelihood_at(self, xs, zs, theta, y) -> float:
        if self.sample_times.size == 0:
            return 0.0
        return float(self.log_density_fn(np.asarray(xs, float), np.asarray(zs, float),
                                         np.asarray(theta, float), np.asarray(y, float)))

    def log_likelihood(self, x_path: PwlPath, z_path: PwlPath, theta, y) -> float:
        """ln psi(y | x, z, theta) with the paths evaluated at the sample times."""
        return self.log_likelihood_at(eval_path(x_path, self.sample_times),
                                      eval_path(z_path, self.sample_times), theta, y)

    def gradient_at(self, xs, zs, theta, y):
        """Derivatives of ln psi with respect to (xs, zs, theta)."""
        xs, zs, theta, y = (np.asarray(a, dtype=float) for a in (xs, zs, theta, y))
        if self.sample_times.size == 0:
            return np.zeros_like(xs), np.zeros_like(zs), np.zeros_like(theta)
        if self.gradient_fn is not None:
            gx, gz, gth = self.gradient_fn(xs, zs, theta, y)
            return np.asarray(gx, float), np.asarray(gz, float), np.asarray(gth, float)
        sx, sz = xs.size, zs.size
        g = central_difference(
            lambda v: self.log_likelihood_at(v[:sx].reshape(xs.shape),
                                             v[sx:sx + sz].reshape(zs.shape), v[sx + sz:], y),
            np.concatenate([xs.ravel(), zs.ravel(), theta]))
        return g[:sx].reshape(xs.shape), g[sx:sx + sz].reshape(zs.shape), g[sx + sz:]

    def sample(self, xs, zs, theta, rng: np.random.Generator) -> np.ndarray:
        y = np.asarray(self.sampler_fn(np.asarray(xs, float), np.asarray(zs, float),
                                       np.asarray(theta, float), rng), dtype=float)
        return y.reshape(self.sample_times.size, -1)

    @classmethod
    def empty(cls) -> 'MeasurementModel':
        """Model with no measurements; ln psi is identically zero."""
        return cls(np.zeros(0), lambda xs, zs, th, y: 0.0,
                   lambda xs, zs, th, rng: np.zeros((0, 1)),
                   gradient_fn=lambda xs, zs, th, y: (np.zeros_like(xs), np.zeros_like(zs),
                                                      np.zeros_like(th)),
                   kind='none')


@dataclass(frozen=True, eq=False)
class BenchmarkSpec:
    """Named bundle of dynamics, prior, measurement model and nominal parameters."""

    name: str
    dynamics: DynamicsModel
    prior: PriorModel
    measurement: MeasurementModel
    theta_nominal: np.ndarray
    parameter_names: Tuple[str, ...]
    t_f: float
    t_s: float
    options: Dict[str, Any] = field(default_factory=dict)
    guess_hook: Optional[Callable] = None

    def __post_init__(self):
        theta = np.asarray(self.theta_nominal, dtype=float)
        object.__setattr__(self, 'theta_nominal', theta)
        times = self.measurement.sample_times
        if times.size and (times[0] < 0.0 or times[-1] > self.t_f * (1 + 1e-12)):
            raise InputError('sample times must lie in [0, t_f]')
        if len(self.parameter_names) != theta.size or theta.size != self.dynamics.m:
            raise InputError('parameter names, nominal values and model size disagree')
        if not self.prior.support_indicator(theta):
            raise InputError('nominal parameters lie outside the prior support')


# -- measurement log-likelihoods ------------------------------------------


def _residuals(y, z_at_samples) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    z = np.asarray(z_at_samples, dtype=float)
    return (y.reshape(z.shape) if y.size == z.size else y) - z


def _check_scale(name: str, value: float) -> None:
    if not value > 0.0:
        raise DomainError(f'{name} must be positive, got {value}')


def gaussian_loglik(y, z_at_samples, sigma_y: float) -> float:
    """Gaussian log-likelihood, constants dropped.

    ``-1/2 sum_k (y_k - z_k)^2 / sigma_y^2 - (N+1) ln sigma_y``
    """
    _check_scale('sigma_y', sigma_y)
    r = _residuals(y, z_at_samples)
    return float(-0.5 * np.sum(r ** 2) / sigma_y ** 2 - r.size * np.log(sigma_y))


def gaussian_loglik_grad(y, z_at_samples, sigma_y: float) -> Tuple[np.ndarray, float]:
    """Derivatives of :func:`gaussian_loglik` with respect to z and sigma_y."""
    _check_scale('sigma_y', sigma_y)
    r = _residuals(y, z_at_samples)
    return r / sigma_y ** 2, float(np.sum(r ** 2) / sigma_y ** 3 - r.size / sigma_y)


def student_t4_loglik(y, z_at_samples, sigma_y: float) -> float:
    """Student-t (4 degrees of freedom) log-likelihood with scale sigma_y.

    Each measurement contributes ``-(5/2) ln(1 + r^2 / (4 sigma_y^2)) - ln sigma_y``.
    """
    _check_scale('sigma_y', sigma_y)
    r = _residuals(y, z_at_samples)
    return float(-2.5 * np.sum(np.log1p(r ** 2 / (4.0 * sigma_y ** 2)))
                 - r.size * np.log(sigma_y))


def student_t4_loglik_grad(y, z_at_samples, sigma_y: float) -> Tuple[np.ndarray, float]:
    _check_scale('sigma_y', sigma_y)
    r = _residuals(y, z_at_samples)
    denom = 4.0 * sigma_y ** 2 + r ** 2
    dz = 5.0 * r / denom
    dsigma = float(np.sum(5.0 * r ** 2 / (sigma_y * denom)) - r.size / sigma_y)
    return dz, dsigma


def _log1mexp(d: np.ndarray) -> np.ndarray:
    """ln(1 - e^d) for d <= 0, switching at d = -ln 2."""
    out = np.full(d.shape, -np.inf)
    near = d > -np.log(2.0)
    with np.errstate(divide='ignore'):
        out[near] = np.log(-np.expm1(d[near]))
    out[~near] = np.log1p(-np.exp(d[~near]))
    return out


def _log_ndtr_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ln(Phi(b) - Phi(a)) for b > a, evaluated in the safer tail."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty(np.broadcast(a, b).shape)
    a, b = np.broadcast_to(a, out.shape), np.broadcast_to(b, out.shape)
    right = a > 0.0
    la, lb = log_ndtr(-a[right]), log_ndtr(-b[right])
    out[right] = la + _log1mexp(lb - la)
    left = ~right
    la, lb = log_ndtr(a[left]), log_ndtr(b[left])
    out[left] = lb + _log1mexp(la - lb)
    return out


def _check_lattice(y: np.ndarray, l_b: float) -> None:
    k = np.round(y / l_b)
    if np.any(np.abs(y - k * l_b) > 1e-9 * l_b):
        raise InputError('quantized measurements must be integer multiples of l_b')


def quantized_loglik(y, z_at_samples, sigma_y: float, l_b: float) -> float:
    """Log-likelihood of measurements rounded to the nearest multiple of ``l_b``.

    ``sum_k ln(Phi((z - y_k + l_b/2)/sigma_y) - Phi((z - y_k - l_b/2)/sigma_y))``
    """
    _check_scale('sigma_y', sigma_y)
    _check_scale('l_b', l_b)
    y = np.asarray(y, dtype=float)
    _check_lattice(y, l_b)
    d = -_residuals(y, z_at_samples)
    b = (d + 0.5 * l_b) / sigma_y
    a = (d - 0.5 * l_b) / sigma_y
    return float(np.sum(_log_ndtr_diff(a, b)))


def quantized_loglik_grad(y, z_at_samples, sigma_y: float, l_b: float) -> Tuple[np.ndarray, float]:
    _check_scale('sigma_y', sigma_y)
    _check_scale('l_b', l_b)
    d = -_residuals(y, z_at_samples)
    b = (d + 0.5 * l_b) / sigma_y
    a = (d - 0.5 * l_b) / sigma_y
    log_mass = _log_ndtr_diff(a, b)
    wb = np.exp(norm.logpdf(b) - log_mass)
    wa = np.exp(norm.logpdf(a) - log_mass)
    dz = (wb - wa) / sigma_y
    dsigma = float(np.sum(a * wa - b * wb) / sigma_y)
    return dz, dsigma


def quantized_masses(z: float, sigma_y: float, l_b: float, bins: np.ndarray) -> np.ndarray:
    """Probability of each lattice value ``k * l_b`` given the clean state ``z``."""
    _check_scale('sigma_y', sigma_y)
    _check_scale('l_b', l_b)
    centers = np.asarray(bins, dtype=float) * l_b
    b = (z - centers + 0.5 * l_b) / sigma_y
    a = (z - centers - 0.5 * l_b) / sigma_y
    return np.exp(_log_ndtr_diff(a, b))


def outlier_mixture_sample(z_at_samples, sigma_r: float, sigma_o: float, p_o: float,
                           seed) -> np.ndarray:
    """Draw ``y_k ~ p_o N(z_k, sigma_o^2) + (1 - p_o) N(z_k, sigma_r^2)``.

    Args:
        z_at_samples (np.ndarray): Clean state at the measurement times.
        sigma_r (float): Regular measurement standard deviation.
        sigma_o (float): Outlier standard deviation.
        p_o (float): Outlier probability in ``[0, 1]``.
        seed (int or np.random.Generator): Seed or generator.

    Returns:
        np.ndarray: Measurements with the shape of ``z_at_samples``.
    """
    if not 0.0 <= p_o <= 1.0:
        raise DomainError('p_o must lie in [0, 1]')
    _check_scale('sigma_r', sigma_r)
    _check_scale('sigma_o', sigma_o)
    rng = seed if isinstance(seed, np.random.Generator) else make_generator(seed)
    z = np.asarray(z_at_samples, dtype=float)
    outlier = rng.random(z.shape) < p_o
    noise = rng.standard_normal(z.shape)
    return z + noise * np.where(outlier, sigma_o, sigma_r)


# -- builders ---------------------------------------------------------------


def measurement_times(t_f: float, t_s: float) -> np.ndarray:
    """Sample times ``k * t_s`` for ``k = 0..N`` with ``N t_s = t_f``."""
    _check_scale('t_f', t_f)
    _check_scale('t_s', t_s)
    N = int(round(t_f / t_s))
    if abs(N * t_s - t_f) > 1e-9 * t_f:
        raise DomainError('t_f must be an integer multiple of t_s')
    return np.arange(N + 1, dtype=float) * t_s


def scalar_measurement(kind: str, sample_times: np.ndarray, sigma_index: int,
                       n: int, q: int, m: int, l_b: Optional[float] = None,
                       sampler: Optional[Callable] = None) -> MeasurementModel:
    """Measurements of the first clean state with scale parameter ``theta[sigma_index]``.

    ``kind`` selects the likelihood: ``gaussian``, ``student_t`` or ``quantized``.
    The default sampler draws from the same family.
    """
    if kind == 'gaussian':
        loglik, grad = gaussian_loglik, gaussian_loglik_grad
    elif kind == 'student_t':
        loglik, grad = student_t4_loglik, student_t4_loglik_grad
    elif kind == 'quantized':
        if l_b is None:
            raise InputError('quantized measurements need a bit length l_b')
        loglik = lambda y, z, s: quantized_loglik(y, z, s, l_b)
        grad = lambda y, z, s: quantized_loglik_grad(y, z, s, l_b)
    else:
        raise InputError(f'unknown measurement kind {kind!r}')

    def log_density(xs, zs, theta, y):
        return loglik(y.reshape(zs.shape[0], -1)[:, 0], zs[:, 0], theta[sigma_index])

    def gradient(xs, zs, theta, y):
        dz, dsigma = grad(y.reshape(zs.shape[0], -1)[:, 0], zs[:, 0], theta[sigma_index])
        gz = np.zeros_like(zs)
        gz[:, 0] = dz
        gth = np.zeros(m)
        gth[sigma_index] = dsigma
        return np.zeros_like(xs), gz, gth

    def default_sampler(xs, zs, theta, rng):
        sigma = theta[sigma_index]
        z = zs[:, 0]
        if kind == 'gaussian':
            y = z + sigma * rng.standard_normal(z.shape)
        elif kind == 'student_t':
            y = z + sigma * rng.standard_t(4, size=z.shape)
        else:
            y = np.round((z + sigma * rng.standard_normal(z.shape)) / l_b) * l_b
        return y[:, None]

    return MeasurementModel(sample_times, log_density, sampler or default_sampler,
                            gradient_fn=gradient, kind=kind)


def oscillator_prior(sigma_x: float, sigma_z: float, sigma_theta: float,
                     n_drift: int, gamma_shape: float, gamma_scale: float) -> PriorModel:
    """Independent Gaussian initial states, Gaussian drift parameters and a
    gamma prior on the trailing measurement scale ``sigma_y``."""
    r, s = gamma_shape, gamma_scale

    def log_density(x0, z0, theta):
        drift, sigma_y = theta[:n_drift], theta[n_drift]
        return (-0.5 * (x0[0] ** 2 / sigma_x ** 2 + z0[0] ** 2 / sigma_z ** 2
                        + np.sum(drift ** 2) / sigma_theta ** 2)
                + (r - 1.0) * np.log(sigma_y) - sigma_y / s)

    def gradient(x0, z0, theta):
        gth = np.empty_like(theta)
        gth[:n_drift] = -theta[:n_drift] / sigma_theta ** 2
        gth[n_drift] = (r - 1.0) / theta[n_drift] - 1.0 / s
        return -x0 / sigma_x ** 2, -z0 / sigma_z ** 2, gth

    def sampler(rng):
        x0 = rng.normal(0.0, sigma_x, size=1)
        z0 = rng.normal(0.0, sigma_z, size=1)
        theta = np.concatenate([rng.normal(0.0, sigma_theta, size=n_drift),
                                [rng.gamma(r, s)]])
        return x0, z0, theta

    def support(theta):
        return bool(np.all(np.isfinite(theta)) and theta[n_drift] > 0.0)

    guess = np.concatenate([np.zeros(n_drift), [max(r - 1.0, 0.0) * s or s]])
    return PriorModel(log_density, sampler, support, gradient_fn=gradient,
                      theta_guess=guess,
                      initial_gaussian=(np.zeros(2), np.diag([sigma_x ** 2, sigma_z ** 2])))


def make_duffing(measurement_kind: str = 'gaussian', t_f: float = 50.0,
                 sigma_y: float = 0.1, p_o: float = 0.4, sigma_o: float = 1.0,
                 sigma_r: float = 0.2) -> BenchmarkSpec:
    """Duffing oscillator ``f = -a z^3 - b z - d x + gamma cos t``, ``h = x``.

    Unknown parameters are ``(a, b, d, sigma_y)``; ``gamma = 0.3`` and
    ``sigma_D = 0.1`` are known.

    Args:
        measurement_kind (str): ``gaussian``, ``student_t`` or ``outlier_sim``
            (Student-t likelihood on data drawn from the outlier mixture).
        t_f (float): Horizon; must be a multiple of ``t_s = 0.1``.
        sigma_y (float): Nominal measurement scale.
        p_o, sigma_o, sigma_r (float): Outlier mixture used by ``outlier_sim``.

    Returns:
        BenchmarkSpec: The assembled benchmark.
    """
    _check_scale('t_f', t_f)
    gamma, sigma_d = 0.3, 0.1
    t_s = 0.1

    def drift_noisy(t, x, z, theta):
        a, b, d = theta[0], theta[1], theta[2]
        zz = z[:, 0]
        return (-a * zz ** 3 - b * zz - d * x[:, 0] + gamma * np.cos(t))[:, None]

    def drift_clean(t, x, z, theta):
        return x[:, :1].copy()

    def divergence(t, x, z, theta):
        return np.full(x.shape[0], -theta[2])

    def noisy_jacobian(t, x, z, theta):
        K = x.shape[0]
        zz, xx = z[:, 0], x[:, 0]
        fx = np.full((K, 1, 1), -theta[2])
        fz = (-(3.0 * theta[0] * zz ** 2 + theta[1]))[:, None, None]
        fth = np.stack([-zz ** 3, -zz, -xx, np.zeros(K)], axis=-1)[:, None, :]
        return fx, fz, fth

    def clean_jacobian(t, x, z, theta):
        K = x.shape[0]
        return np.ones((K, 1, 1)), np.zeros((K, 1, 1)), np.zeros((K, 1, 4))

    def fx_derivative(t, x, z, theta):
        out = np.zeros((x.shape[0], 1, 1, 6))
        out[..., 4] = -1.0
        return out

    def linear_drift(t, x, z):
        K = x.shape[0]
        zz = z[:, 0]
        offset = (gamma * np.cos(t))[:, None]
        basis = np.stack([-zz ** 3, -zz, -x[:, 0], np.zeros(K)], axis=-1)[:, None, :]
        return offset, basis

    dynamics = DynamicsModel(
        n=1, q=1, m=4, drift_noisy=drift_noisy, drift_clean=drift_clean,
        diffusion=np.array([[sigma_d]]), drift_divergence=divergence,
        noisy_jacobian=noisy_jacobian, clean_jacobian=clean_jacobian,
        noisy_jacobian_x_derivative=fx_derivative, linear_drift=linear_drift,
        linear_parameters=(0, 1, 2),
        validity_box=(np.array([-5.0, -5.0]), np.array([5.0, 5.0])),
        clean_drift_z_independent=True, name='duffing')
    prior = oscillator_prior(0.4, 0.4, 10.0, 3, 1.1, 10.0)
    times = measurement_times(t_f, t_s)
    if measurement_kind == 'gaussian':
        measurement = scalar_measurement('gaussian', times, 3, 1, 1, 4)
    elif measurement_kind == 'student_t':
        measurement = scalar_measurement('student_t', times, 3, 1, 1, 4)
    elif measurement_kind == 'outlier_sim':
        measurement = scalar_measurement(
            'student_t', times, 3, 1, 1, 4,
            sampler=_mixture_sampler(sigma_r, sigma_o, p_o))
    else:
        raise InputError(f'unknown Duffing measurement kind {measurement_kind!r}')
    options = {'measurement_kind': measurement_kind, 'gamma': gamma, 'sigma_D': sigma_d}
    if measurement_kind == 'outlier_sim':
        options.update(p_o=p_o, sigma_o=sigma_o, sigma_r=sigma_r)
    return BenchmarkSpec(
        name=f'duffing-{measurement_kind}', dynamics=dynamics, prior=prior,
        measurement=measurement, theta_nominal=np.array([1.0, -1.0, 0.2, sigma_y]),
        parameter_names=('a', 'b', 'd', 'sigma_y'), t_f=float(t_f), t_s=t_s,
        options=options)


def _mixture_sampler(sigma_r: float, sigma_o: float, p_o: float) -> Callable:
    def sampler(xs, zs, theta, rng):
        return outlier_mixture_sample(zs[:, :1], sigma_r, sigma_o, p_o, rng)
    return sampler


def with_outlier_sampler(spec: BenchmarkSpec, p_o: float, sigma_o: float,
                         sigma_r: float) -> BenchmarkSpec:
    """Same estimation model, data drawn from the Gaussian outlier mixture."""
    measurement = replace(spec.measurement, sampler_fn=_mixture_sampler(sigma_r, sigma_o, p_o))
    options = dict(spec.options, p_o=p_o, sigma_o=sigma_o, sigma_r=sigma_r)
    return replace(spec, measurement=measurement, options=options)


def make_holmes_rand(t_f: float = 50.0, sigma_y_nominal: float = 0.05,
                     l_b: float = 0.05) -> BenchmarkSpec:
    """Holmes–Rand oscillator with quantized measurements of z.

    ``f = -(a + gamma z^2) x - b z - d z^3 + phi cos t``, ``h = x``; unknown
    parameters ``(a, b, gamma, d, sigma_y)``, known ``phi = 0.4`` and
    ``sigma_D = 0.1``.
    """
    _check_scale('t_f', t_f)
    _check_scale('sigma_y_nominal', sigma_y_nominal)
    _check_scale('l_b', l_b)
    phi, sigma_d = 0.4, 0.1
    t_s = 0.1

    def drift_noisy(t, x, z, theta):
        a, b, g, d = theta[0], theta[1], theta[2], theta[3]
        xx, zz = x[:, 0], z[:, 0]
        return (-(a + g * zz ** 2) * xx - b * zz - d * zz ** 3 + phi * np.cos(t))[:, None]

    def drift_clean(t, x, z, theta):
        return x[:, :1].copy()

    def divergence(t, x, z, theta):
        return -(theta[0] + theta[2] * z[:, 0] ** 2)

    def noisy_jacobian(t, x, z, theta):
        a, b, g, d = theta[0], theta[1], theta[2], theta[3]
        xx, zz = x[:, 0], z[:, 0]
        K = x.shape[0]
        fx = (-(a + g * zz ** 2))[:, None, None]
        fz = (-2.0 * g * zz * xx - b - 3.0 * d * zz ** 2)[:, None, None]
        fth = np.stack([-xx, -zz, -zz ** 2 * xx, -zz ** 3, np.zeros(K)], axis=-1)[:, None, :]
        return fx, fz, fth

    def clean_jacobian(t, x, z, theta):
        K = x.shape[0]
        return np.ones((K, 1, 1)), np.zeros((K, 1, 1)), np.zeros((K, 1, 5))

    def fx_derivative(t, x, z, theta):
        zz = z[:, 0]
        out = np.zeros((x.shape[0], 1, 1, 7))
        out[:, 0, 0, 1] = -2.0 * theta[2] * zz
        out[:, 0, 0, 2] = -1.0
        out[:, 0, 0, 4] = -zz ** 2
        return out

    def linear_drift(t, x, z):
        xx, zz = x[:, 0], z[:, 0]
        offset = (phi * np.cos(t))[:, None]
        basis = np.stack([-xx, -zz, -zz ** 2 * xx, -zz ** 3, np.zeros(x.shape[0])],
                         axis=-1)[:, None, :]
        return offset, basis

    dynamics = DynamicsModel(
        n=1, q=1, m=5, drift_noisy=drift_noisy, drift_clean=drift_clean,
        diffusion=np.array([[sigma_d]]), drift_divergence=divergence,
        noisy_jacobian=noisy_jacobian, clean_jacobian=clean_jacobian,
        noisy_jacobian_x_derivative=fx_derivative, linear_drift=linear_drift,
        linear_parameters=(0, 1, 2, 3),
        validity_box=(np.array([-5.0, -5.0]), np.array([5.0, 5.0])),
        clean_drift_z_independent=True, name='holmes-rand')
    prior = oscillator_prior(0.1, 0.1, 10.0, 4, 4.0, l_b / 3.0)
    measurement = scalar_measurement('quantized', measurement_times(t_f, t_s), 4, 1, 1, 5,
                                     l_b=l_b)
    return BenchmarkSpec(
        name='holmes-rand', dynamics=dynamics, prior=prior, measurement=measurement,
        theta_nominal=np.array([0.2, -1.0, 0.2, 1.0, sigma_y_nominal]),
        parameter_names=('a', 'b', 'gamma', 'd', 'sigma_y'), t_f=float(t_f), t_s=t_s,
        options={'phi': phi, 'sigma_D': sigma_d, 'l_b': l_b})


# -- linear-Gaussian building blocks ------------------------------------------


def linear_dynamics(F: np.ndarray, G: np.ndarray, n: int, offset: Optional[np.ndarray] = None,
                    name: str = 'linear') -> DynamicsModel:
    """Time-invariant affine drift ``[f; h] = F [x; z] + offset`` without parameters."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    d = F.shape[0]
    q = d - n
    c = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)

    def drift_noisy(t, x, z, theta):
        return np.concatenate([x, z], axis=1) @ F[:n].T + c[:n]

    def drift_clean(t, x, z, theta):
        return np.concatenate([x, z], axis=1) @ F[n:].T + c[n:]

    def noisy_jacobian(t, x, z, theta):
        K = x.shape[0]
        return (np.broadcast_to(F[:n, :n], (K, n, n)), np.broadcast_to(F[:n, n:], (K, n, q)),
                np.zeros((K, n, 0)))

    def clean_jacobian(t, x, z, theta):
        K = x.shape[0]
        return (np.broadcast_to(F[n:, :n], (K, q, n)), np.broadcast_to(F[n:, n:], (K, q, q)),
                np.zeros((K, q, 0)))

    def fx_derivative(t, x, z, theta):
        return np.zeros((x.shape[0], n, n, d))

    def divergence(t, x, z, theta):
        return np.full(x.shape[0], np.trace(F[:n, :n]))

    lipschitz = (float(np.linalg.norm(F[:n], 2)) if n else 0.0,
                 float(np.linalg.norm(F[n:], 2)) if q else 0.0)
    return DynamicsModel(n=n, q=q, m=0, drift_noisy=drift_noisy, drift_clean=drift_clean,
                         diffusion=G, drift_divergence=divergence,
                         noisy_jacobian=noisy_jacobian, clean_jacobian=clean_jacobian,
                         noisy_jacobian_x_derivative=fx_derivative,
                         lipschitz_hint=lipschitz, name=name)


def gaussian_prior(mean: np.ndarray, cov: np.ndarray, n: int) -> PriorModel:
    """Gaussian prior over the initial state ``[x0; z0]``; no parameters."""
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = scipy.linalg.cho_factor(cov)
    precision = scipy.linalg.cho_solve(chol, np.eye(mean.size))

    def log_density(x0, z0, theta):
        r = np.concatenate([x0, z0]) - mean
        return -0.5 * r @ precision @ r

    def gradient(x0, z0, theta):
        g = -precision @ (np.concatenate([x0, z0]) - mean)
        return g[:n], g[n:], np.zeros(0)

    def sampler(rng):
        s = rng.multivariate_normal(mean, cov)
        return s[:n], s[n:], np.zeros(0)

    return PriorModel(log_density, sampler, lambda theta: True, gradient_fn=gradient,
                      theta_guess=np.zeros(0), initial_gaussian=(mean, cov))


def linear_gaussian_measurement(sample_times: np.ndarray, C: np.ndarray, R: np.ndarray,
                                n: int) -> MeasurementModel:
    """``y_k = C [x; z](t_k) + v_k`` with ``v_k ~ N(0, R)``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    chol = scipy.linalg.cho_factor(R)
    R_inv = scipy.linalg.cho_solve(chol, np.eye(R.shape[0]))

    def residual(xs, zs, y):
        return y - np.concatenate([xs, zs], axis=1) @ C.T

    def log_density(xs, zs, theta, y):
        r = residual(xs, zs, y)
        return -0.5 * np.einsum('ki,ij,kj->', r, R_inv, r)

    def gradient(xs, zs, theta, y):
        g = residual(xs, zs, y) @ R_inv @ C
        return g[:, :n], g[:, n:], np.zeros(theta.size)

    def sampler(xs, zs, theta, rng):
        mean = np.concatenate([xs, zs], axis=1) @ C.T
        return mean + rng.multivariate_normal(np.zeros(R.shape[0]), R, size=mean.shape[0])

    return MeasurementModel(sample_times, log_density, sampler, gradient_fn=gradient,
                            linear_gaussian=(C, R), kind='linear_gaussian')


def make_linear_gaussian(t_f: float = 10.0, sigma_y: float = 0.1, b: float = 1.0,
                         d: float = 0.5, sigma_d: float = 0.5) -> BenchmarkSpec:
    """Linear damped oscillator ``dX = (-b Z - d X) dt + sigma_D dW``, ``dZ = X dt``.

    All parameters are known, so the decision vector holds only the path and
    ``z0``; the posterior is Gaussian and the oracle module computes it exactly.
    """
    F = np.array([[-d, -b], [1.0, 0.0]])
    dynamics = linear_dynamics(F, np.array([[sigma_d]]), n=1, name='linear-gaussian')
    dynamics = replace(dynamics, clean_drift_z_independent=True,
                       linear_drift=lambda t, x, z: ((-d * x - b * z), np.zeros((x.shape[0], 1, 0))))
    prior = gaussian_prior(np.zeros(2), np.eye(2), n=1)
    times = measurement_times(t_f, 0.1)
    measurement = linear_gaussian_measurement(times, [[0.0, 1.0]], [[sigma_y ** 2]], n=1)
    return BenchmarkSpec(name='linear-gaussian', dynamics=dynamics, prior=prior,
                         measurement=measurement, theta_nominal=np.zeros(0),
                         parameter_names=(), t_f=float(t_f), t_s=0.1,
                         options={'b': b, 'd': d, 'sigma_D': sigma_d, 'sigma_y': sigma_y})


# -- known/unknown parameter split ---------------------------------------------


def fix_parameters(spec: BenchmarkSpec, known: Dict[str, float]) -> BenchmarkSpec:
    """Remove the ``known`` parameters from the decision vector.

    The returned benchmark evaluates every map on the full parameter vector
    with the known entries filled in; derivatives are restricted to the free
    coordinates.
    """
    if not known:
        return spec
    names = list(spec.parameter_names)
    unknown_names = [k for k in known if k not in names]
    if unknown_names:
        raise InputError(f'unknown parameter(s) {unknown_names} for {spec.name}')
    fixed_idx = np.array([names.index(k) for k in known], dtype=int)
    fixed_val = np.array([float(known[k]) for k in known])
    free = np.array([i for i in range(len(names)) if i not in set(fixed_idx)], dtype=int)
    full_nominal = spec.theta_nominal.copy()
    full_nominal[fixed_idx] = fixed_val

    def embed(theta):
        full = full_nominal.copy()
        full[free] = theta
        return full

    dyn = spec.dynamics
    n, q = dyn.n, dyn.q
    xz_cols = np.arange(n + q)

    def wrap_jac(fun):
        if fun is None:
            return None

        def jac(t, x, z, theta):
            a, b, c = fun(t, x, z, embed(theta))
            return a, b, np.asarray(c)[..., free]
        return jac

    fx_der = None
    if dyn.noisy_jacobian_x_derivative is not None:
        keep = np.concatenate([xz_cols, n + q + free])
        fx_der = lambda t, x, z, th: np.asarray(
            dyn.noisy_jacobian_x_derivative(t, x, z, embed(th)))[..., keep]

    linear_drift = None
    linear_parameters = ()
    if dyn.linear_drift is not None:
        lin_full = [i for i in dyn.linear_parameters]

        def linear_drift(t, x, z):
            offset, basis = dyn.linear_drift(t, x, z)
            offset = offset + basis[..., fixed_idx] @ fixed_val
            return offset, basis[..., free]
        linear_parameters = tuple(int(np.where(free == i)[0][0]) for i in lin_full if i in free)

    divergence = None
    if dyn.drift_divergence is not None:
        divergence = lambda t, x, z, th: dyn.drift_divergence(t, x, z, embed(th))

    dynamics = replace(
        dyn, m=free.size,
        drift_noisy=lambda t, x, z, th: dyn.drift_noisy(t, x, z, embed(th)),
        drift_clean=lambda t, x, z, th: dyn.drift_clean(t, x, z, embed(th)),
        drift_divergence=divergence,
        noisy_jacobian=wrap_jac(dyn.noisy_jacobian),
        clean_jacobian=wrap_jac(dyn.clean_jacobian),
        noisy_jacobian_x_derivative=fx_der,
        linear_drift=linear_drift, linear_parameters=linear_parameters)

    pr = spec.prior
    prior_grad = None
    if pr.gradient_fn is not None:
        def prior_grad(x0, z0, theta):
            gx, gz, gth = pr.gradient_fn(x0, z0, embed(theta))
            return gx, gz, np.asarray(gth)[free]

    def prior_sampler(rng):
        x0, z0, theta = pr.sampler(rng)
        return x0, z0, np.asarray(theta)[free]

    prior = replace(
        pr, log_density_fn=lambda x0, z0, th: pr.log_density_fn(x0, z0, embed(th)),
        sampler=prior_sampler, support_indicator=lambda th: pr.support_indicator(embed(th)),
        gradient_fn=prior_grad,
        theta_guess=None if pr.theta_guess is None else np.asarray(pr.theta_guess)[free])

    me = spec.measurement
    meas_grad = None
    if me.gradient_fn is not None:
        def meas_grad(xs, zs, theta, y):
            gx, gz, gth = me.gradient_fn(xs, zs, embed(theta), y)
            return gx, gz, np.asarray(gth)[free]

    measurement = replace(
        me, log_density_fn=lambda xs, zs, th, y: me.log_density_fn(xs, zs, embed(th), y),
        sampler_fn=lambda xs, zs, th, rng: me.sampler_fn(xs, zs, embed(th), rng),
        gradient_fn=meas_grad)

    options = dict(spec.options, known=dict(known))
    return replace(spec, dynamics=dynamics, prior=prior, measurement=measurement,
                   theta_nominal=full_nominal[free],
                   parameter_names=tuple(names[i] for i in free), options=options)


# -- registry -------------------------------------------------------------------

_REGISTRY: Dict[str, Callable[..., BenchmarkSpec]] = {}


def register_benchmark(name: str, factory: Callable[..., BenchmarkSpec]) -> None:
    """Register a benchmark factory under ``name`` (e.g. further flight models)."""
    _REGISTRY[name] = factory


def get_benchmark(name: str, **options) -> BenchmarkSpec:
    """Build the registered benchmark ``name`` with keyword ``options``."""
    if name not in _REGISTRY:
        raise InputError(f'unknown benchmark {name!r}; known: {sorted(_REGISTRY)}')
    return _REGISTRY[name](**options)


def benchmark_names() -> List[str]:
    return sorted(_REGISTRY)


register_benchmark('duffing-gaussian', lambda **kw: make_duffing('gaussian', **kw))
register_benchmark('duffing-student-t', lambda **kw: make_duffing('student_t', **kw))
register_benchmark('duffing-outliers', lambda **kw: make_duffing('outlier_sim', **kw))
register_benchmark('holmes-rand', make_holmes_rand)
register_benchmark('linear-gaussian', make_linear_gaussian)
