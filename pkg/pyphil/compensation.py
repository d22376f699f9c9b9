"""
This module contains the delay compensation strategies of the testbench:
phase advance of the reference harmonics, low-pass filtering of the feedback
signal and extrapolation of the feedback samples.
"""
import numpy as np
from sklearn.base import BaseEstimator, clone

from .lti import TransferBlock
from .utils import ParamsEqualityMixin


class PhaseAdvancePlan(ParamsEqualityMixin, BaseEstimator):
    """Per-harmonic phase advance of the amplifier command.

    Parameters
    ----------
    fundamental_hz : float, optional(default=50.)
    entries : tuple of (int, float), optional(default=())
        ``(harmonic order, advance_rad)`` pairs, advance in [0, 2 pi).

    A plan is single-phase. Components of the command that are not listed
    (interharmonics, DC, disturbance) are not advanced.
    """
    def __init__(self, fundamental_hz=50., entries=()):
        self.fundamental_hz = fundamental_hz
        self.entries = entries

    def _validate_parameters(self):
        if not self.fundamental_hz > 0:
            raise ValueError(f'fundamental_hz={self.fundamental_hz} must be '
                             f'strictly positive.')
        if len(self.entries) == 0:
            raise ValueError('A phase advance plan needs at least one '
                             'harmonic.')
        for h, advance in self.entries:
            if not 0 <= advance < 2 * np.pi:
                raise ValueError(f'advance_rad={advance} of harmonic {h} '
                                 f'must be in [0, 2 pi).')

    @property
    def harmonics(self):
        return tuple(int(h) for h, _ in self.entries)

    def advance_deg(self, harmonic):
        return float(np.degrees(self.phase_shifts()[harmonic]))

    def phase_shifts(self):
        return {int(h): float(advance) for h, advance in self.entries}

    def check_source(self, simulated_side):
        """Raise if the plan does not match the declared source."""
        self._validate_parameters()
        if self.fundamental_hz != simulated_side.fundamental_hz:
            raise ValueError(
                f'Plan fundamental {self.fundamental_hz!r} Hz does not match '
                f'the source fundamental {simulated_side.fundamental_hz!r} '
                f'Hz.')
        if sorted(self.harmonics) != sorted(simulated_side.orders):
            raise ValueError(
                f'Plan harmonics {sorted(self.harmonics)} do not cover '
                f'exactly the source harmonics '
                f'{sorted(simulated_side.orders)}.')


def design_phase_advance(fundamental_hz, harmonics, total_delay_s):
    """Advance each harmonic by the phase the loop delay costs it.

    Parameters
    ----------
    fundamental_hz : float
    harmonics : iterable of int
        Nonempty set of harmonic orders.
    total_delay_s : float
        Amplifier plus sensor delay, nonnegative.

    Returns
    -------
    plan : PhaseAdvancePlan
        Advance of harmonic h is ``2 pi h f0 total_delay_s`` mod 2 pi.
    """
    harmonics = sorted(set(int(h) for h in harmonics))
    if not harmonics:
        raise ValueError('harmonics must not be empty.')
    if not total_delay_s >= 0:
        raise ValueError(f'total_delay_s={total_delay_s} must not be '
                         f'negative.')
    entries = []
    for h in harmonics:
        advance = (2 * np.pi * h * fundamental_hz * total_delay_s) % (
            2 * np.pi)
        entries.append((h, float(advance)))
    plan = PhaseAdvancePlan(fundamental_hz, tuple(entries))
    plan._validate_parameters()
    return plan


def apply_phase_advance(loop, plan):
    """Return a copy of ``loop`` whose command harmonics are advanced.

    Only the source phases change: the open-loop chain is untouched.
    """
    plan.check_source(loop.source)
    return clone(loop).set_params(phase_advance=plan)


def design_feedback_filter(cutoff_hz):
    """First-order low-pass 1 / (1 + s / (2 pi cutoff_hz)).

    ``np.inf`` gives the identity block.
    """
    if not cutoff_hz > 0:
        raise ValueError(f'cutoff_hz={cutoff_hz} must be strictly positive.')
    if np.isinf(cutoff_hz):
        return TransferBlock([1.], [1.], label='feedback filter')
    return TransferBlock([1.], [1., 1. / (2 * np.pi * cutoff_hz)],
                         label='feedback filter')


def apply_feedback_filter(loop, cutoff_hz):
    """Turn ``loop`` into a feedback-filter loop with the given cutoff.

    A shifting impedance, if any, is dropped. The loop's open-loop chain
    then carries design_feedback_filter(cutoff_hz) between the simulated
    side and the amplifier.
    """
    filtered = clone(loop).set_params(interface='feedback-filter',
                                      cutoff_hz=cutoff_hz, z_shift_ohm=None)
    filtered._validate_parameters()
    return filtered


class Extrapolator(ParamsEqualityMixin, BaseEstimator):
    """Forward prediction of the feedback samples.

    Parameters
    ----------
    order : {0, 1}, optional(default=1)
        0 holds the last sample, 1 adds the backward-difference slope times
        the horizon.
    horizon_s : float, optional(default=0.)
        Prediction span, the total loop delay.
    """
    def __init__(self, order=1, horizon_s=0.):
        self.order = order
        self.horizon_s = horizon_s

    def _validate_parameters(self):
        if self.order not in (0, 1):
            raise ValueError(f'Extrapolation order={self.order} is not '
                             f'supported, order must be 0 or 1.')
        if not self.horizon_s >= 0:
            raise ValueError(f'horizon_s={self.horizon_s} must not be '
                             f'negative.')

    def check_horizon(self, total_delay_s):
        self._validate_parameters()
        if not np.isclose(self.horizon_s, total_delay_s, rtol=1e-9,
                          atol=0.):
            raise ValueError(f'horizon_s={self.horizon_s!r} must equal the '
                             f'total loop delay {total_delay_s!r}.')

    def gain(self, dt):
        """Weight of the last sample difference, order * horizon / dt."""
        self._validate_parameters()
        return self.order * self.horizon_s / dt

    def predict(self, x, dt, initial=0.):
        """Predict a whole sequence sampled at ``dt``.

        ``initial`` is the sample preceding ``x[0]``.
        """
        x = np.asarray(x, dtype=np.float64)
        previous = np.concatenate([[initial], x[:-1]])
        return x + self.gain(dt) * (x - previous)


def apply_extrapolator(loop, extrapolator):
    """Return a copy of ``loop`` predicting its feedback samples."""
    extrapolator.check_horizon(loop.total_delay_s)
    return clone(loop).set_params(extrapolator=extrapolator)


def accurate_bandwidth(total_delay_s, tolerance_deg=5.):
    """Highest frequency whose uncompensated delay phase error stays below
    ``tolerance_deg``."""
    if not tolerance_deg > 0:
        raise ValueError(f'tolerance_deg={tolerance_deg} must be strictly '
                         f'positive.')
    if not total_delay_s > 0:
        return np.inf
    return tolerance_deg / (360. * total_delay_s)
