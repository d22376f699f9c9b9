"""
This module contains the command line front end.

    pyphil analyze|simulate|sweep|cosim SCENARIO [--out DIR] [--seed N]
                                                 [--epsilon EPS]

Errors are reported on stderr, one line per error:
``error<TAB><exception name><TAB><message>``, with exit status 1.
"""
import argparse
import os
import sys
from time import time

import numpy as np

from .bench import (run_time_domain, reference_direct, accuracy_metrics,
                    power_exchange)
from .compensation import accurate_bandwidth
from .cosim import run_master
from .netem import make_netem_unit
from .scenario import load_scenario, ScenarioError
from .stability import (classify, open_loop_response, analysis_grid,
                        stability_map)
from .units import split_loop, split_wiring
from .utils import write_csv, format_float, check_seed
from . import __version__


MODES = ('analyze', 'simulate', 'sweep', 'cosim')


def _analyze(scenario, out_dir, n_jobs, verbose):
    loop = scenario.compensated_loop()
    verdict = classify(loop, scenario.margin())
    block = loop.open_loop_block()
    points = open_loop_response(loop, analysis_grid(block.delay_s))
    rows = zip(points['omega_rad_s'].tolist(),
               (points['omega_rad_s'] / (2 * np.pi)).tolist(),
               points['magnitude'].tolist(), points['phase_rad'].tolist())
    return [
        verdict.to_csv(os.path.join(out_dir, 'verdict.csv')),
        write_csv(os.path.join(out_dir, 'frequency_response.csv'),
                  ['omega_rad_s', 'frequency_hz', 'magnitude', 'phase_rad'],
                  rows, comments=[
                      f'total_delay_s={format_float(block.delay_s)}',
                      f'accurate_bandwidth_hz='
                      f'{format_float(accurate_bandwidth(block.delay_s))}']),
    ]


def _write_accuracy(trace, reference, harmonics, path, channel='voltage'):
    if trace.diverged or trace.n_samples != reference.n_samples:
        return write_csv(path, ['harmonic', 'magnitude_error',
                                'phase_error_deg'], [],
                         comments=['diverged=true'])
    report = accuracy_metrics(trace, reference, harmonics, channel=channel)
    return report.to_csv(path)


def _simulate(scenario, out_dir, n_jobs, verbose):
    loop = scenario.compensated_loop()
    trace = run_time_domain(loop, scenario.dt_s, scenario.duration_s,
                            verbose=verbose)
    reference = reference_direct(loop, scenario.dt_s, scenario.duration_s)
    harmonics = loop.source.orders
    paths = [trace.to_csv(os.path.join(out_dir, 'trace.csv')),
             reference.to_csv(os.path.join(out_dir, 'reference.csv')),
             _write_accuracy(trace, reference, harmonics,
                             os.path.join(out_dir, 'accuracy.csv'))]
    rows = []
    if not trace.diverged:
        for label, run in (('phil', trace), ('reference', reference)):
            for record in power_exchange(run, harmonics):
                rows.append((label,) + tuple(record.tolist()))
    paths.append(write_csv(os.path.join(out_dir, 'power.csv'),
                           ['run', 'harmonic', 'active_power_w',
                            'reactive_power_var', 'power_factor'], rows))
    return paths


def _sweep(scenario, out_dir, n_jobs, verbose):
    result = stability_map(scenario.seeded_loop(), scenario.ratios,
                           scenario.delays_s, scenario.margin(),
                           n_jobs=n_jobs, verbose=verbose)
    return [result.to_csv(os.path.join(out_dir, 'stability_map.csv'))]


def _cosim(scenario, out_dir, n_jobs, verbose):
    loop = scenario.compensated_loop()
    end_time_s = (scenario.duration_s if scenario.end_time_s is None
                  else scenario.end_time_s)
    simulator, hardware = split_loop(loop, scenario.dt_s, end_time_s)
    units = [simulator, hardware]
    netem = None
    spec = scenario.network_spec()
    if spec is not None:
        netem = make_netem_unit(spec)
        units.append(netem)
    wiring = split_wiring(simulator, hardware, netem=netem,
                          netem_path=scenario.netem_path)
    result = run_master(units, scenario.master_config(wiring),
                        verbose=verbose)
    paths = [trace.to_csv(os.path.join(out_dir, f'trace_{name}.csv'))
             for name, trace in sorted(result.traces.items())]
    paths.append(result.log.write(os.path.join(out_dir, 'master.log')))
    if result.skew is not None:
        paths.append(result.skew_to_csv(os.path.join(out_dir, 'skew.csv')))
    if hardware.name in result.traces:
        reference = reference_direct(loop, scenario.dt_s, end_time_s)
        paths.append(_write_accuracy(result.traces[hardware.name], reference,
                                     loop.source.orders,
                                     os.path.join(out_dir, 'accuracy.csv')))
    return paths


_RUNNERS = {'analyze': _analyze, 'simulate': _simulate, 'sweep': _sweep,
            'cosim': _cosim}


def run(mode, scenario, out_dir=None, n_jobs=1, verbose=0):
    """Run one mode of a scenario and write its artifacts.

    Parameters
    ----------
    mode : {'analyze', 'simulate', 'sweep', 'cosim'}
    scenario : Scenario
    out_dir : str or None, optional(default=None)
        Defaults to the scenario output directory.
    n_jobs : int, optional(default=1)
        Parallel sweep cells.
    verbose : int, optional(default=0)

    Returns
    -------
    paths : list of str
        The files written.
    """
    if mode not in _RUNNERS:
        raise ValueError(f'mode={mode!r} is not supported. Accepted modes '
                         f'are {", ".join(MODES)}.')
    out_dir = scenario.output_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    tic = time()
    paths = _RUNNERS[mode](scenario, out_dir, n_jobs, verbose)
    if verbose:
        print(f"{mode} of scenario {scenario.name!r} done in "
              f"{time() - tic:.3f} s", flush=True)
        for path in paths:
            print(f"Wrote {path}", flush=True)
    return paths


def _seed(text):
    try:
        return check_seed(int(text))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _build_parser():
    parser = argparse.ArgumentParser(
        prog='pyphil',
        description='Virtual power hardware-in-the-loop testbench.')
    parser.add_argument('--version', action='version',
                        version=f'%(prog)s {__version__}')
    parser.add_argument('mode', choices=MODES, help='What to run.')
    parser.add_argument('scenario', help='Scenario file.')
    parser.add_argument('--out', default=None,
                        help='Output directory, overrides the scenario.')
    parser.add_argument('--seed', type=_seed, default=None,
                        help='Unsigned 64-bit master seed, overrides the '
                             'scenario.')
    parser.add_argument('--epsilon', type=float, default=None,
                        help='Uncertainty margin, overrides the scenario.')
    parser.add_argument('--n-jobs', type=int, default=1,
                        help='Parallel sweep cells.')
    parser.add_argument('--verbose', '-v', action='count', default=0)
    return parser


def _error_lines(exc):
    name = type(exc).__name__
    if isinstance(exc, ScenarioError):
        messages = [f'line {line}: {message}' if line else message
                    for line, message in exc.errors]
    else:
        messages = [str(exc)]
    return [f'error\t{name}\t{" ".join(message.split())}'
            for message in messages]


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario.set_params(seed=args.seed)
        if args.epsilon is not None:
            if not args.epsilon >= 0:
                raise ValueError(f'--epsilon={args.epsilon} violates the '
                                 f'constraint epsilon >= 0.')
            scenario.set_params(epsilon=args.epsilon)
        run(args.mode, scenario, out_dir=args.out, n_jobs=args.n_jobs,
            verbose=args.verbose)
    except (ValueError, RuntimeError, ArithmeticError, OSError) as e:
        for line in _error_lines(e):
            print(line, file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
