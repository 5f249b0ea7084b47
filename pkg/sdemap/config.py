"""Experiment configuration: JSON schema, validation and benchmark assembly."""

import copy
import json
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

from sdemap.errors import ConfigError, InputError
from sdemap.model import BenchmarkSpec, benchmark_names, fix_parameters, get_benchmark, \
    with_outlier_sampler
from sdemap.sim import SCHEMES, SimConfig
from sdemap.solve import SolverConfig
from sdemap.utils import config_hash

OUTPUT_DIR_ENV = 'SDEMAP_OUTPUT_DIR'

ESTIMATOR_CHOICES = ('map', 'mee', 'map_gaussian')

# field -> (type, default); nested dicts describe sections
SCHEMA: Dict[str, Any] = {
    'benchmark': (str, None),
    't_f': (float, None),
    'known': (dict, {}),
    'measurement': {
        'sigma_y': (float, None),
        'l_b': (float, None),
    },
    'outliers': {
        'p_o': (float, 0.4),
        'sigma_o': (float, 1.0),
        'sigma_r': (float, 0.2),
    },
    'grid_refinement': (int, 0),
    'estimators': (list, ['map', 'mee']),
    'replicates': (int, 20),
    'base_seed': (int, 0),
    'simulation': {
        'h_sim': (float, 0.005),
        'scheme': (str, 'order15_additive'),
    },
    'solver': {
        'grad_tol': (float, None),
        'max_iters': (int, 500),
        'memory': (int, 20),
        'c1': (float, 1e-4),
        'c2': (float, 0.9),
    },
    'convergence': {
        'refinements': (list, [0, 1, 2, 3]),
        'deltas': (list, [0.1, 0.05, 0.025, 0.0125]),
        'reference_delta': (float, 0.001),
        't_f': (float, 2.0 * math.pi),
    },
    'output_dir': (str, 'out'),
}

REQUIRED = ('benchmark',)
SECTIONS_WITHOUT_DEFAULTS = ('outliers',)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment configuration with every default filled in."""

    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def hash(self) -> str:
        return config_hash(self.values)

    @property
    def sim_config(self) -> SimConfig:
        sim = self.values['simulation']
        return SimConfig(h_sim=sim['h_sim'], scheme=sim['scheme'], seed=self.values['base_seed'])

    @property
    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.values['solver'])

    def output_dir(self, override: Optional[str] = None) -> str:
        """``override`` (``--out``), else the environment variable, else the config."""
        if override:
            return override
        return os.environ.get(OUTPUT_DIR_ENV) or self.values['output_dir']


def _check_type(value: Any, expected: type, path: str) -> Any:
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'expected a number, got {type(value).__name__}', path)
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'expected an integer, got {type(value).__name__}', path)
        return value
    if not isinstance(value, expected):
        raise ConfigError(f'expected {expected.__name__}, got {type(value).__name__}', path)
    return value


def _apply_schema(raw: Dict[str, Any], schema: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError('expected an object', prefix.rstrip('.') or '<root>')
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError('unknown key', prefix + unknown[0])
    out: Dict[str, Any] = {}
    for key, spec in schema.items():
        path = prefix + key
        if isinstance(spec, dict):
            if key in raw:
                out[key] = _apply_schema(raw[key], spec, path + '.')
            elif key in SECTIONS_WITHOUT_DEFAULTS:
                out[key] = None
            else:
                out[key] = _apply_schema({}, spec, path + '.')
            continue
        expected, default = spec
        if key in raw and raw[key] is not None:
            out[key] = _check_type(raw[key], expected, path)
        else:
            out[key] = copy.deepcopy(default)
    return out


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a config mapping against :data:`SCHEMA` and the benchmark registry.

    Raises:
        ConfigError: Naming the dotted path of the first offending field.
    """
    values = _apply_schema(raw, SCHEMA, '')
    for key in REQUIRED:
        if values[key] is None:
            raise ConfigError('missing required field', key)
    if values['benchmark'] not in benchmark_names():
        raise ConfigError(f'unknown benchmark {values["benchmark"]!r}; '
                          f'known: {benchmark_names()}', 'benchmark')
    if values['t_f'] is not None and values['t_f'] <= 0.0:
        raise ConfigError('must be positive', 't_f')
    for name, value in values['known'].items():
        _check_type(value, float, f'known.{name}')
    values['known'] = {k: float(v) for k, v in values['known'].items()}

    estimators = values['estimators']
    if not estimators:
        raise ConfigError('at least one estimator is required', 'estimators')
    for i, name in enumerate(estimators):
        if name not in ESTIMATOR_CHOICES:
            raise ConfigError(f'unknown estimator {name!r}', f'estimators[{i}]')
    if 'map_gaussian' in estimators and not values['benchmark'].startswith('duffing'):
        raise ConfigError('map_gaussian needs a Duffing benchmark', 'estimators')
    if len(set(estimators)) != len(estimators):
        raise ConfigError('duplicate estimator', 'estimators')

    for key in ('grid_refinement', 'base_seed'):
        if values[key] < 0:
            raise ConfigError('must be non-negative', key)
    if values['replicates'] < 1:
        raise ConfigError('must be at least 1', 'replicates')
    if values['simulation']['scheme'] not in SCHEMES:
        raise ConfigError(f'expected one of {SCHEMES}', 'simulation.scheme')
    if values['simulation']['h_sim'] <= 0.0:
        raise ConfigError('must be positive', 'simulation.h_sim')

    solver = values['solver']
    if not 0.0 < solver['c1'] < solver['c2'] < 1.0:
        raise ConfigError('need 0 < c1 < c2 < 1', 'solver.c2')
    if solver['max_iters'] < 0 or solver['memory'] < 1:
        raise ConfigError('must be positive', 'solver.memory')

    conv = values['convergence']
    if not conv['deltas'] or any(not isinstance(d, (int, float)) or d <= 0 for d in conv['deltas']):
        raise ConfigError('expected positive numbers', 'convergence.deltas')
    if any(not isinstance(r, int) or isinstance(r, bool) or r < 0 for r in conv['refinements']):
        raise ConfigError('expected non-negative integers', 'convergence.refinements')

    measurement = values['measurement']
    name = values['benchmark']
    if measurement['l_b'] is not None and name != 'holmes-rand':
        raise ConfigError('only the holmes-rand benchmark is quantized', 'measurement.l_b')
    if values['outliers'] is not None and not name.startswith('duffing'):
        raise ConfigError('outlier sampling needs a Duffing benchmark', 'outliers')

    config = ExperimentConfig(values)
    build_spec(config)
    return config


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a JSON config file.

    Raises:
        ConfigError: Malformed JSON or invalid content.
        OSError: If the file cannot be read.
    """
    with open(path, 'r', encoding='utf-8') as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'invalid JSON: {exc.msg} (line {exc.lineno})', '<root>') from exc
    return parse_config(raw)


def _benchmark_options(values: Dict[str, Any], name: str) -> Dict[str, Any]:
    options: Dict[str, Any] = {}
    if values['t_f'] is not None:
        options['t_f'] = values['t_f']
    measurement = values['measurement']
    if measurement['sigma_y'] is not None:
        key = 'sigma_y_nominal' if name == 'holmes-rand' else 'sigma_y'
        options[key] = measurement['sigma_y']
    if measurement['l_b'] is not None:
        options['l_b'] = measurement['l_b']
    if name == 'duffing-outliers' and values['outliers'] is not None:
        options.update(values['outliers'])
    return options


def build_spec(config: ExperimentConfig, benchmark: Optional[str] = None) -> BenchmarkSpec:
    """Benchmark for ``config`` with the known parameters removed from the estimate.

    ``benchmark`` builds a sibling benchmark (same options) instead, e.g. the
    Gaussian-likelihood Duffing model used by the ``map_gaussian`` estimator.
    """
    values = config.values
    name = benchmark or values['benchmark']
    try:
        spec = get_benchmark(name, **_benchmark_options(values, name))
    except (InputError, ValueError) as exc:
        raise ConfigError(str(exc), 'benchmark') from exc
    if values['outliers'] is not None and name != 'duffing-outliers' and benchmark is None:
        spec = with_outlier_sampler(spec, **values['outliers'])
    try:
        spec = fix_parameters(spec, values['known'])
    except InputError as exc:
        raise ConfigError(str(exc), 'known') from exc
    return spec


def estimation_specs(config: ExperimentConfig) -> List[Tuple[str, str, BenchmarkSpec]]:
    """``(estimator label, estimator, spec)`` for every requested estimator."""
    specs = []
    main = build_spec(config)
    for label in config['estimators']:
        if label == 'map_gaussian':
            specs.append((label, 'map', build_spec(config, benchmark='duffing-gaussian')))
        else:
            specs.append((label, label, main))
    return specs
