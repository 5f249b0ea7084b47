#!/usr/bin/env python
"""
Command-line interface for the sdemap experiment harness.

Subcommands simulate benchmark data, run the estimators on a dataset, run
seeded Monte Carlo batches and run mesh-refinement studies. Every run is
driven by a JSON config (see :mod:`sdemap.config`).
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from sdemap import __version__
from sdemap.config import ExperimentConfig, build_spec, estimation_specs, load_config
from sdemap.errors import ConfigError, InputError, SdeMapError
from sdemap.grid import PwlPath, sup_norm_distance
from sdemap.metrics import RunSummary, aggregate, ise, run_summary_from_dict, run_summary_to_dict
from sdemap.model import BenchmarkSpec, MeasurementModel
from sdemap.objective import SmoothPath, fixed_path_convergence
from sdemap.oracle import linear_system_for, rts_smoother
from sdemap.sim import (Dataset, Trajectory, generate_dataset, read_dataset_csv,
                        read_trajectory_csv, write_dataset_csv, write_trajectory_csv)
from sdemap.solve import EstimateResult, EstimationProblem, estimate
from sdemap.utils import write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INCOMPLETE = 4
MIN_COMPLETED_FRACTION = 0.9
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def _header(config: ExperimentConfig) -> Dict[str, Any]:
    return {'config_hash': config.hash, 'version': __version__}


def _seed(config: ExperimentConfig, override: Optional[int]) -> int:
    return config['base_seed'] if override is None else int(override)


def _theta_dict(spec: BenchmarkSpec, theta) -> Dict[str, float]:
    return {name: float(value) for name, value in zip(spec.parameter_names, theta)}


def _paths(result: EstimateResult) -> Tuple[PwlPath, PwlPath]:
    return result.v.x_path(), result.report.z_path


def _result_record(spec: BenchmarkSpec, estimator: str, result: EstimateResult) -> Dict[str, Any]:
    return {
        'estimator': estimator,
        'objective_kind': result.objective_kind,
        'objective': result.report.value,
        'decomposition': result.report.decomposition(),
        'theta': _theta_dict(spec, result.v.theta),
        'iterations': result.iterations,
        'evaluations': result.evaluations,
        'grad_norm': result.grad_norm,
        'termination': result.termination,
        'wall_time': result.wall_time,
        'diagnostics': result.report.diagnostics,
    }


def _check_dataset(spec: BenchmarkSpec, data: Dataset) -> None:
    times = spec.measurement.sample_times
    if data.times.size != times.size or not np.allclose(data.times, times, rtol=1e-9, atol=1e-12):
        raise InputError(f'dataset sample times do not match benchmark {spec.name} '
                         f'({data.times.size} rows, expected {times.size})')


def cmd_simulate(config: ExperimentConfig, out_dir: str, seed: int) -> int:
    """Simulate one truth path and its measurements.

    Writes ``trajectory.csv``, ``dataset.csv`` and ``simulation.json``.
    """
    spec = build_spec(config)
    traj, data = generate_dataset(spec, seed, config.sim_config)
    write_trajectory_csv(os.path.join(out_dir, 'trajectory.csv'), traj)
    write_dataset_csv(os.path.join(out_dir, 'dataset.csv'), data)
    metadata = dict(_header(config), **traj.metadata)
    metadata['theta'] = _theta_dict(spec, traj.theta)
    metadata['known'] = config['known']
    write_json(os.path.join(out_dir, 'simulation.json'), metadata)
    if traj.metadata['left_validity_box']:
        logger.warning('seed %d: truth left the validity box at t = %s',
                       seed, traj.metadata['first_exit_time'])
    logger.info('simulated %s with seed %d into %s', spec.name, seed, out_dir)
    return EXIT_OK


def _write_oracle(spec: BenchmarkSpec, problem: EstimationProblem, partition, path: str) -> None:
    system = linear_system_for(spec, partition)
    means, _ = rts_smoother(system, problem.y)
    n = spec.dynamics.n
    write_trajectory_csv(path, Trajectory(partition.nodes, means[:, :n], means[:, n:],
                                          spec.theta_nominal, None))


def cmd_estimate(config: ExperimentConfig, dataset_path: str, out_dir: str,
                 truth_path: Optional[str] = None) -> int:
    """Run every requested estimator on a dataset CSV.

    Writes one ``estimate_<estimator>.csv`` per estimator and a combined
    ``estimate.json``. A solver that fails records its termination reason.
    Linear-Gaussian benchmarks without unknown parameters also get the RTS
    smoother means in ``oracle_rts.csv``.
    """
    data = read_dataset_csv(dataset_path)
    truth = read_trajectory_csv(truth_path) if truth_path else None
    refinement = config['grid_refinement']
    records: Dict[str, Any] = {}
    for label, estimator, spec in estimation_specs(config):
        _check_dataset(spec, data)
        problem = EstimationProblem(spec, data)
        try:
            result = estimate(problem, estimator, refinement, config.solver_config)
        except SdeMapError as exc:
            logger.warning('%s estimator failed: %s', label, exc)
            records[label] = {'estimator': estimator, 'termination': 'error', 'error': str(exc)}
            continue
        record = _result_record(spec, estimator, result)
        x_hat, z_hat = _paths(result)
        if truth is not None:
            record['ise'] = ise(truth, x_hat, z_hat)
        records[label] = record
        write_trajectory_csv(os.path.join(out_dir, f'estimate_{label}.csv'),
                             Trajectory(x_hat.partition.nodes, x_hat.values, z_hat.values,
                                        result.v.theta, None))
        logger.info('%s: %s after %d iterations, objective %.6g', label, result.termination,
                    result.iterations, result.report.value)

    spec = build_spec(config)
    if (spec.dynamics.m == 0 and spec.measurement.linear_gaussian is not None
            and spec.prior.initial_gaussian is not None):
        problem = EstimationProblem(spec, data)
        _write_oracle(spec, problem, problem.partition(refinement),
                      os.path.join(out_dir, 'oracle_rts.csv'))

    out = dict(_header(config), dataset=os.path.abspath(dataset_path),
               grid_refinement=refinement, estimates=records)
    write_json(os.path.join(out_dir, 'estimate.json'), out)
    return EXIT_OK


def run_replicate(values: Dict[str, Any], replicate: int, seed: int, out_dir: str) -> Dict[str, Any]:
    """One Monte Carlo replicate; top-level so worker processes can import it.

    The benchmark is rebuilt from the validated config values, the dataset is
    simulated from ``seed`` and every estimator runs on it. Failures are
    recorded in the summary. The summary is also written to
    ``runs/run_<replicate>.json``.
    """
    config = ExperimentConfig(values)
    summary = RunSummary(replicate=replicate, seed=seed)
    try:
        traj, data = generate_dataset(build_spec(config), seed, config.sim_config)
        summary.diagnostics['truth'] = {
            'left_validity_box': traj.metadata['left_validity_box'],
            'first_exit_time': traj.metadata['first_exit_time'],
        }
        for label, estimator, spec in estimation_specs(config):
            result = estimate(EstimationProblem(spec, data), estimator,
                              config['grid_refinement'], config.solver_config)
            x_hat, z_hat = _paths(result)
            summary.theta[label] = _theta_dict(spec, result.v.theta)
            summary.ise[label] = ise(traj, x_hat, z_hat)
            summary.objective[label] = result.report.value
            summary.diagnostics[label] = {
                'iterations': result.iterations,
                'grad_norm': result.grad_norm,
                'termination': result.termination,
                'wall_time': result.wall_time,
            }
    except SdeMapError as exc:
        logger.warning('replicate %d (seed %d) failed: %s', replicate, seed, exc)
        summary.error = f'{type(exc).__name__}: {exc}'
    record = dict(_header(config), **run_summary_to_dict(summary))
    write_json(os.path.join(out_dir, 'runs', f'run_{replicate:05d}.json'), record)
    return record


def cmd_montecarlo(config: ExperimentConfig, out_dir: str, seed: int, workers: int = 1) -> int:
    """Seeded replicate batch; replicate ``i`` uses seed ``base + i``.

    Writes per-run JSON files, the merged ``runs.jsonl`` (sorted by replicate)
    and ``aggregate.json``. The outputs do not depend on ``workers``.
    """
    count = config['replicates']
    jobs = [(config.values, i, seed + i, out_dir) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_replicate, *zip(*jobs)))
    else:
        records = [run_replicate(*job) for job in jobs]
    records.sort(key=lambda r: r['replicate'])

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'runs.jsonl'), 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write('\n')

    runs = [run_summary_from_dict(r) for r in records]
    completed = sum(run.completed for run in runs)
    summary = dict(_header(config), replicates=count, completed=completed,
                   aggregate=aggregate(runs) if completed else {})
    write_json(os.path.join(out_dir, 'aggregate.json'), summary)
    logger.info('%d of %d replicates completed', completed, count)
    if completed < MIN_COMPLETED_FRACTION * count:
        print(f'Error: only {completed} of {count} replicates completed', file=sys.stderr)
        return EXIT_INCOMPLETE
    return EXIT_OK


def fixed_path_table(spec: BenchmarkSpec, config: ExperimentConfig) -> List[Dict[str, float]]:
    """Discretised vs continuous functionals along the fixed test path.

    Uses the benchmark's dynamics and prior at the nominal parameters, no
    measurements and the clean path started from ``z0 = -1``, which for an
    integrator clean state is the matched path ``-cos t``.
    """
    conv = config['convergence']
    model = spec.dynamics
    x = SmoothPath(value=lambda t: np.repeat(np.sin(t)[..., None], model.n, axis=-1),
                   derivative=lambda t: np.repeat(np.cos(t)[..., None], model.n, axis=-1),
                   t_f=conv['t_f'])
    return fixed_path_convergence(model, spec.prior, MeasurementModel.empty(), None, x,
                                  -np.ones(model.q), spec.theta_nominal, conv['deltas'],
                                  conv['reference_delta'])


def cmd_convergence(config: ExperimentConfig, out_dir: str, seed: int) -> int:
    """Mesh-refinement study on one dataset plus the fixed-path functional table.

    Writes ``convergence.json`` (refinement rows and fixed-path rows) and
    ``fixed_path.csv``.
    """
    spec = build_spec(config)
    _, data = generate_dataset(spec, seed, config.sim_config)
    rows: List[Dict[str, Any]] = []
    for label, estimator, est_spec in estimation_specs(config):
        problem = EstimationProblem(est_spec, data)
        previous: Optional[PwlPath] = None
        for refinement in config['convergence']['refinements']:
            result = estimate(problem, estimator, refinement, config.solver_config)
            x_hat = result.v.x_path()
            rows.append({
                'refinement': refinement,
                'estimator': label,
                'N': x_hat.partition.N,
                'theta': _theta_dict(est_spec, result.v.theta),
                'objective': result.report.value,
                'termination': result.termination,
                'sup_distance_to_previous': (None if previous is None
                                             else sup_norm_distance(x_hat, previous)),
            })
            previous = x_hat
            logger.info('%s refinement %d: objective %.6g', label, refinement,
                        result.report.value)

    fixed = fixed_path_table(spec, config)
    columns = ['delta', 'N', 'euler', 'trapezoidal', 'energy_reference', 'map_reference',
               'euler_gap', 'trapezoidal_gap']
    write_csv(os.path.join(out_dir, 'fixed_path.csv'), columns,
              np.array([[row[c] for c in columns] for row in fixed]))
    out = dict(_header(config), seed=seed, refinement_rows=rows, fixed_path_rows=fixed)
    write_json(os.path.join(out_dir, 'convergence.json'), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, required=True, help='Experiment config (JSON)')
    common.add_argument('--out', type=str, help='Output directory (overrides config and '
                                                'SDEMAP_OUTPUT_DIR)')
    common.add_argument('--seed-override', type=int, help='Replaces base_seed from the config')
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help='-v for progress, -vv for debug output')

    parser = argparse.ArgumentParser(prog='sdemap',
                                     description='MAP and minimum-energy estimation for SDEs')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True, help='Command to execute')

    subparsers.add_parser('simulate', parents=[common],
                          help='Simulate a truth path and its measurements')

    estimate_parser = subparsers.add_parser('estimate', parents=[common],
                                            help='Run the estimators on a dataset CSV')
    estimate_parser.add_argument('--dataset', type=str, required=True, help='Dataset CSV')
    estimate_parser.add_argument('--truth', type=str, help='Truth trajectory CSV (enables ISE)')

    mc_parser = subparsers.add_parser('montecarlo', parents=[common],
                                      help='Seeded Monte Carlo replicate batch')
    mc_parser.add_argument('--workers', type=int, default=1, help='Worker processes (default: 1)')

    subparsers.add_parser('convergence', parents=[common],
                          help='Mesh-refinement and fixed-path convergence study')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point for the command-line interface.

    Returns:
        int: 0 on success, 2 for a bad config or dataset, 3 for an I/O
            failure, 4 when too few Monte Carlo replicates completed.
    """
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format=LOG_FORMAT)

    try:
        config = load_config(args.config)
        out_dir = config.output_dir(args.out)
        seed = _seed(config, args.seed_override)
        if args.command == 'simulate':
            return cmd_simulate(config, out_dir, seed)
        if args.command == 'estimate':
            return cmd_estimate(config, args.dataset, out_dir, args.truth)
        if args.command == 'montecarlo':
            if args.workers < 1:
                raise ConfigError('must be at least 1', '--workers')
            return cmd_montecarlo(config, out_dir, seed, args.workers)
        return cmd_convergence(config, out_dir, seed)
    except (ConfigError, InputError) as e:
        print(f'Error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f'Error: {e}', file=sys.stderr)
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
