"""
This module contains the frequency-domain stability analysis of PHIL loops.

The open-loop chain of a loop is scanned on a logarithmic grid, phase
crossovers (total phase equal to -pi modulo 2 pi) are located by sign change
and refined by bisection, and the largest open-loop magnitude found at a
crossover is compared with the margin threshold 1 / (1 + epsilon).
"""
from time import time

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial import polynomial as P
from scipy.optimize import bisect
from sklearn.base import BaseEstimator, clone
from sklearn.model_selection import ParameterGrid

from .bench import ImpedanceModel, run_time_domain
from .lti import frequency_response
from .utils import write_csv, ParamsEqualityMixin


MARGINAL_BAND = 0.02
ORACLE_EXCLUSION = 0.05
POINTS_PER_DECADE = 500
LOWEST_FREQUENCY_HZ = 0.1
# Upper end of the scan for loops without delay.
HIGHEST_FREQUENCY_HZ = 1e6
CROSSOVER_RTOL = 1e-6
CLASSIFICATIONS = ('stable', 'marginal', 'unstable')


class UncertaintyMargin(ParamsEqualityMixin, BaseEstimator):
    """Conservative shrinking of the Bode threshold to 1 / (1 + epsilon).

    Parameters
    ----------
    epsilon : float, optional(default=0.)
        Nonnegative uncertainty on the open-loop magnitude.
    """
    def __init__(self, epsilon=0.):
        self.epsilon = epsilon

    def _validate_parameters(self):
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f'epsilon={self.epsilon} must satisfy '
                             f'epsilon >= 0.')

    @property
    def threshold(self):
        self._validate_parameters()
        return 1. / (1. + self.epsilon)


class StabilityVerdict:
    """Outcome of classify().

    Attributes
    ----------
    classification : {'stable', 'marginal', 'unstable'}
    phase_crossovers : array of float
        Angular frequencies (rad/s) where the open-loop phase is -pi modulo
        2 pi.
    worst_magnitude_at_crossover : float
        Largest open-loop magnitude among the crossovers, or the magnitude
        at the upper end of the scan when there is no crossover.
    gain_margin_db : float
        ``20 log10(threshold / worst_magnitude_at_crossover)``.
    epsilon_used : float
    """
    def __init__(self, classification, phase_crossovers,
                 worst_magnitude_at_crossover, gain_margin_db, epsilon_used):
        self.classification = classification
        self.phase_crossovers = phase_crossovers
        self.worst_magnitude_at_crossover = worst_magnitude_at_crossover
        self.gain_margin_db = gain_margin_db
        self.epsilon_used = epsilon_used

    def __repr__(self):
        return (f"StabilityVerdict({self.classification!r}, "
                f"worst_magnitude_at_crossover="
                f"{self.worst_magnitude_at_crossover!r}, "
                f"gain_margin_db={self.gain_margin_db!r}, "
                f"epsilon_used={self.epsilon_used!r})")

    @property
    def rank(self):
        return CLASSIFICATIONS.index(self.classification)

    def to_csv(self, path):
        return write_csv(
            path, ['classification', 'worst_magnitude', 'gain_margin_db',
                   'epsilon', 'n_crossovers', 'first_crossover_rad_s'],
            [(self.classification, self.worst_magnitude_at_crossover,
              self.gain_margin_db, self.epsilon_used,
              len(self.phase_crossovers),
              self.phase_crossovers[0] if len(self.phase_crossovers)
              else np.nan)])


def analysis_grid(delay_s, points_per_decade=POINTS_PER_DECADE):
    """Log-spaced grid from 2 pi 0.1 Hz to 2 pi 10 / delay_s."""
    low = 2 * np.pi * LOWEST_FREQUENCY_HZ
    if delay_s > 0:
        high = 2 * np.pi * 10. / delay_s
    else:
        high = 2 * np.pi * HIGHEST_FREQUENCY_HZ
    n_decades = np.log10(high / low)
    n_points = int(np.ceil(n_decades * points_per_decade)) + 1
    return np.logspace(np.log10(low), np.log10(high), n_points)


def open_loop_response(loop, omega_grid):
    """Magnitude and unwrapped phase of the open loop of ``loop``.

    Parameters
    ----------
    loop : PhilLoop
    omega_grid : array-like of float
        Strictly increasing angular frequencies.

    Returns
    -------
    points : array of lti.FREQUENCY_POINT_DTYPE
    """
    return frequency_response(loop.open_loop_block(), omega_grid)


def _rational_angle(block, omega):
    s = 1j * omega
    return (np.angle(P.polyval(s, block.numerator)) -
            np.angle(P.polyval(s, block.denominator)))


def _magnitude(block, omega):
    s = 1j * omega
    return (np.abs(P.polyval(s, block.numerator)) /
            np.abs(P.polyval(s, block.denominator)))


def _find_crossovers(block, points):
    """Locate the frequencies where the phase equals -pi + 2 pi m."""
    omega = points['omega_rad_s']
    phase = points['phase_rad']
    level = np.floor((phase + np.pi) / (2 * np.pi))
    crossovers = []
    for idx in np.flatnonzero(level[1:] != level[:-1]):
        left, right = omega[idx], omega[idx + 1]
        # continue the rational phase from the unwrapped left value
        left_rational = phase[idx] + left * block.delay_s
        left_angle = _rational_angle(block, left)

        def continued_phase(w):
            step = _rational_angle(block, w) - left_angle
            step = (step + np.pi) % (2 * np.pi) - np.pi
            return left_rational + step - w * block.delay_s

        low, high = sorted((level[idx], level[idx + 1]))
        for m in np.arange(low + 1, high + 1):
            target = -np.pi + 2 * np.pi * m

            def residual(w):
                return continued_phase(w) - target

            crossovers.append(bisect(residual, left, right,
                                     rtol=CROSSOVER_RTOL))
    return np.array(sorted(crossovers))


def classify(loop, margin=None, omega_grid=None):
    """Bode classification of a PHIL loop under an uncertainty margin.

    The open-loop rational part of every constructible loop is stable, so
    the loop is unstable when the open-loop magnitude at a phase crossover
    exceeds the threshold. Cases within MARGINAL_BAND of the threshold are
    classified 'marginal'. A feedback extrapolator is not part of the
    analyzed chain.

    Parameters
    ----------
    loop : PhilLoop
    margin : UncertaintyMargin or None, optional(default=None)
        None means epsilon = 0.
    omega_grid : array-like of float or None, optional(default=None)
        Scan grid. Defaults to analysis_grid(total loop delay).

    Returns
    -------
    verdict : StabilityVerdict
    """
    margin = UncertaintyMargin() if margin is None else margin
    threshold = margin.threshold
    block = loop.open_loop_block()
    if omega_grid is None:
        omega_grid = analysis_grid(block.delay_s)
    points = frequency_response(block, omega_grid)
    if not (np.all(np.isfinite(points['magnitude'])) and
            np.all(np.isfinite(points['phase_rad']))):
        raise ValueError('The open-loop response is not finite on the '
                         'analysis grid.')
    crossovers = _find_crossovers(block, points)
    if crossovers.shape[0]:
        worst = float(np.max(_magnitude(block, crossovers)))
    else:
        worst = float(points['magnitude'][-1])

    if crossovers.shape[0] == 0 or worst < threshold - MARGINAL_BAND:
        classification = 'stable'
    elif worst > threshold + MARGINAL_BAND:
        classification = 'unstable'
    else:
        classification = 'marginal'
    with np.errstate(divide='ignore'):
        gain_margin_db = float(20 * np.log10(threshold / worst))
    return StabilityVerdict(classification, crossovers, worst,
                            gain_margin_db, float(margin.epsilon))


def sweep_cell(loop, ratio, delay_s):
    """The loop with R_s = ratio * R_hut (resistive) and T_d = delay_s.

    The whole delay is put on the amplifier, and any extrapolator is
    dropped since its horizon is tied to the original delay.
    """
    cell = clone(loop)
    r_source = ratio * cell.load.resistance_ohm
    simulated_side = clone(cell.source).set_params(
        source_impedance=ImpedanceModel('resistive', r_source))
    amplifier = clone(cell.amp).set_params(delay_s=delay_s)
    return cell.set_params(simulated_side=simulated_side, amplifier=amplifier,
                           sensor_delay_s=0., extrapolator=None)


def _check_grids(ratios, delays):
    ratios = np.asarray(ratios, dtype=np.float64)
    delays = np.asarray(delays, dtype=np.float64)
    if ratios.ndim != 1 or ratios.shape[0] == 0:
        raise ValueError('ratios must be a nonempty 1d grid.')
    if delays.ndim != 1 or delays.shape[0] == 0:
        raise ValueError('delays must be a nonempty 1d grid.')
    return ratios, delays


def _classify_cell(loop, ratio, delay_s, margin):
    try:
        return classify(sweep_cell(loop, ratio, delay_s), margin)
    except (ValueError, ArithmeticError) as e:
        return f'{type(e).__name__}: {e}'


class StabilityMap:
    """Verdicts over a (ratio, delay) grid.

    Attributes
    ----------
    ratios : array of float, shape=(n_ratios,)
    delays : array of float, shape=(n_delays,)
    verdicts : array of object, shape=(n_ratios, n_delays)
        StabilityVerdict per cell, or the error message of a failed cell.
    epsilon : float
    """
    def __init__(self, ratios, delays, verdicts, epsilon):
        self.ratios = ratios
        self.delays = delays
        self.verdicts = verdicts
        self.epsilon = epsilon

    @property
    def threshold(self):
        return 1. / (1. + self.epsilon)

    @property
    def errors(self):
        return {(i, j): verdict for (i, j), verdict
                in np.ndenumerate(self.verdicts)
                if isinstance(verdict, str)}

    def classifications(self):
        out = np.empty(self.verdicts.shape, dtype=object)
        for idx, verdict in np.ndenumerate(self.verdicts):
            out[idx] = ('error' if isinstance(verdict, str)
                        else verdict.classification)
        return out

    def worst_magnitudes(self):
        out = np.full(self.verdicts.shape, np.nan)
        for idx, verdict in np.ndenumerate(self.verdicts):
            if not isinstance(verdict, str):
                out[idx] = verdict.worst_magnitude_at_crossover
        return out

    def to_csv(self, path):
        rows = []
        for (i, j), verdict in np.ndenumerate(self.verdicts):
            if isinstance(verdict, str):
                rows.append((self.ratios[i], self.delays[j], 'error',
                             np.nan, np.nan))
            else:
                rows.append((self.ratios[i], self.delays[j],
                             verdict.classification,
                             verdict.worst_magnitude_at_crossover,
                             verdict.gain_margin_db))
        comments = [f'epsilon={self.epsilon!r}']
        comments += [f'cell ({i}, {j}) failed: {message}'
                     for (i, j), message in sorted(self.errors.items())]
        return write_csv(path, ['ratio', 'delay_s', 'classification',
                                'worst_magnitude', 'gain_margin_db'], rows,
                         comments=comments)


def _grid_cells(ratios, delays):
    grid = ParameterGrid({'ratio_index': range(ratios.shape[0]),
                          'delay_index': range(delays.shape[0])})
    return [(cell['ratio_index'], cell['delay_index']) for cell in grid]


def stability_map(loop, ratios, delays, margin=None, n_jobs=1, verbose=0):
    """Classify every (R_s / R_hut, T_d) cell of a sweep.

    Cells are independent; they are run with joblib and assembled by index,
    so the result does not depend on n_jobs. A failing cell records its
    error message and the sweep continues.

    Parameters
    ----------
    loop : PhilLoop
        Template loop (HUT, amplifier dynamics, interface).
    ratios : array-like of float
        Grid of R_s / R_hut.
    delays : array-like of float
        Grid of total loop delays in seconds.
    margin : UncertaintyMargin or None, optional(default=None)
    n_jobs : int, optional(default=1)
    verbose : int, optional(default=0)

    Returns
    -------
    result : StabilityMap
    """
    margin = UncertaintyMargin() if margin is None else margin
    margin._validate_parameters()
    loop._validate_parameters()
    ratios, delays = _check_grids(ratios, delays)
    cells = _grid_cells(ratios, delays)
    tic = time()
    results = Parallel(n_jobs=n_jobs)(
        delayed(_classify_cell)(loop, ratios[i], delays[j], margin)
        for i, j in cells)
    verdicts = np.empty((ratios.shape[0], delays.shape[0]), dtype=object)
    for (i, j), verdict in zip(cells, results):
        verdicts[i, j] = verdict
    result = StabilityMap(ratios, delays, verdicts, float(margin.epsilon))
    if verbose:
        counts = {c: int(np.sum(result.classifications() == c))
                  for c in CLASSIFICATIONS + ('error',)}
        print(f"Classified {len(cells)} cells in {time() - tic:.3f} s: "
              + ', '.join(f'{n} {c}' for c, n in counts.items()),
              flush=True)
    return result


def _run_cell(loop, ratio, delay_s, dt, duration):
    try:
        trace = run_time_domain(sweep_cell(loop, ratio, delay_s), dt,
                                duration)
    except (ValueError, ArithmeticError):
        return -1
    return int(trace.diverged)


def time_domain_map(loop, ratios, delays, dt, duration, n_jobs=1,
                    verbose=0):
    """Boundedness oracle: run every sweep cell in the time domain.

    Returns
    -------
    diverged : array of int, shape=(n_ratios, n_delays)
        1 if the run diverged, 0 if it stayed bounded, -1 if the cell could
        not be run (for instance a delay that is not a multiple of dt).
    """
    loop._validate_parameters()
    ratios, delays = _check_grids(ratios, delays)
    cells = _grid_cells(ratios, delays)
    tic = time()
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_cell)(loop, ratios[i], delays[j], dt, duration)
        for i, j in cells)
    diverged = np.empty((ratios.shape[0], delays.shape[0]), dtype=np.int64)
    for (i, j), outcome in zip(cells, results):
        diverged[i, j] = outcome
    if verbose:
        print(f"Ran {len(cells)} cells in {time() - tic:.3f} s, "
              f"{int(np.sum(diverged == 1))} diverged", flush=True)
    return diverged


def oracle_agreement(frequency_map, diverged, exclusion=ORACLE_EXCLUSION):
    """Fraction of cells where the verdict matches the time-domain outcome.

    Cells whose worst magnitude lies within ``exclusion`` of the threshold,
    and cells that failed in either map, are not scored.

    Returns
    -------
    agreement : float
        nan when no cell is scored.
    n_scored : int
    """
    worst = frequency_map.worst_magnitudes()
    scored = (np.isfinite(worst) &
              (np.abs(worst - frequency_map.threshold) > exclusion) &
              (diverged >= 0))
    n_scored = int(np.sum(scored))
    if n_scored == 0:
        return np.nan, 0
    predicted_unstable = frequency_map.classifications() == 'unstable'
    matches = predicted_unstable[scored] == (diverged[scored] == 1)
    return float(np.mean(matches)), n_scored
