"""
This module contains the linear time-invariant building blocks.

A TransferBlock is a rational transfer function in the Laplace variable
with an optional pure delay. Blocks are evaluated in the frequency domain
with evaluate() and turned into fixed-step DiscreteStepper objects with
discretize(), using the trapezoidal (bilinear) rule for the rational part
and an integer-sample ring buffer for the delay.
"""
import numpy as np
from numba import njit
from numpy.polynomial import polynomial as P
from scipy.signal import bilinear

from .utils import delay_samples


FREQUENCY_POINT_DTYPE = np.dtype([
    ('omega_rad_s', np.float64),
    ('magnitude', np.float64),
    ('phase_rad', np.float64),
])


def _trim(coeffs):
    """Drop vanishing highest-degree coefficients (ascending order)."""
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=np.float64))
    nonzero = np.flatnonzero(coeffs)
    if nonzero.size == 0:
        return coeffs[:1] * 0.
    return coeffs[:nonzero[-1] + 1]


class TransferBlock:
    """Rational block N(s)/D(s) with a pure delay exp(-s * delay_s).

    Parameters
    ----------
    numerator : array-like of float
        Polynomial coefficients of N(s) in ascending degree.
    denominator : array-like of float
        Polynomial coefficients of D(s) in ascending degree.
    delay_s : float, optional(default=0.)
        The pure delay in seconds.
    label : str, optional(default='')
        A free text label, used in diagrams and error messages.
    allow_improper : bool, optional(default=False)
        Accept degree(numerator) > degree(denominator). Improper blocks
        (an inductive impedance, a capacitive admittance) can be evaluated
        and chained with series(), but not discretized.
    """
    def __init__(self, numerator, denominator, delay_s=0., label='',
                 allow_improper=False):
        numerator = _trim(numerator)
        denominator = _trim(denominator)
        if not np.all(np.isfinite(numerator)) or not np.all(
                np.isfinite(denominator)):
            raise ValueError(f'Block {label!r} has non-finite coefficients.')
        if not np.any(denominator):
            raise ValueError(f'Block {label!r}: denominator must have at '
                             f'least one nonzero coefficient.')
        if not allow_improper and numerator.shape[0] > denominator.shape[0]:
            raise ValueError(
                f'Block {label!r} is improper: degree(numerator)='
                f'{numerator.shape[0] - 1} > degree(denominator)='
                f'{denominator.shape[0] - 1}.')
        if not delay_s >= 0:
            raise ValueError(f'delay_s={delay_s} must not be negative.')
        numerator.setflags(write=False)
        denominator.setflags(write=False)
        self.numerator = numerator
        self.denominator = denominator
        self.delay_s = float(delay_s)
        self.label = label

    @classmethod
    def gain(cls, value, delay_s=0., label=''):
        return cls([value], [1.], delay_s=delay_s, label=label)

    def __repr__(self):
        return (f"TransferBlock(numerator={self.numerator.tolist()}, "
                f"denominator={self.denominator.tolist()}, "
                f"delay_s={self.delay_s!r}, label={self.label!r})")

    def __eq__(self, other):
        if not isinstance(other, TransferBlock):
            return NotImplemented
        return (np.array_equal(self.numerator, other.numerator) and
                np.array_equal(self.denominator, other.denominator) and
                self.delay_s == other.delay_s)

    __hash__ = None

    @property
    def is_proper(self):
        return self.numerator.shape[0] <= self.denominator.shape[0]

    @property
    def dc_gain(self):
        """N(0)/D(0), or inf for an integrating block."""
        if self.denominator[0] == 0:
            return np.inf
        return self.numerator[0] / self.denominator[0]


def evaluate(block, omega):
    """Evaluate the block at s = j*omega.

    Parameters
    ----------
    block : TransferBlock
    omega : float or array-like of float
        Strictly positive angular frequencies in rad/s.

    Returns
    -------
    response : complex or array of complex
        N(j omega) / D(j omega) * exp(-j omega delay_s).
    """
    omega_arr = np.asarray(omega, dtype=np.float64)
    if np.any(omega_arr <= 0):
        raise ValueError('omega must be strictly positive.')
    s = 1j * omega_arr
    num = P.polyval(s, block.numerator)
    den = P.polyval(s, block.denominator)
    if np.any(den == 0):
        bad = np.atleast_1d(omega_arr)[np.atleast_1d(den == 0)][0]
        raise ValueError(f'Block {block.label!r} has a pole on imaginary '
                         f'axis at omega={bad!r} rad/s.')
    response = num / den * np.exp(-s * block.delay_s)
    if np.ndim(omega):
        return response
    return complex(response)


def frequency_response(block, omega_grid):
    """Magnitude and unwrapped phase of a block along a frequency grid.

    The phase of the rational part is unwrapped by nearest-multiple-of-2pi
    continuation from the previous grid point; the delay contributes the
    exact term -omega * delay_s.

    Parameters
    ----------
    block : TransferBlock
    omega_grid : array-like of float
        Strictly increasing, strictly positive angular frequencies.

    Returns
    -------
    points : array of FREQUENCY_POINT_DTYPE
    """
    omega_grid = np.asarray(omega_grid, dtype=np.float64)
    if omega_grid.ndim != 1 or omega_grid.shape[0] == 0:
        raise ValueError('omega_grid must be a nonempty 1d array.')
    if np.any(np.diff(omega_grid) <= 0):
        raise ValueError('omega_grid must be strictly increasing.')
    if omega_grid[0] <= 0:
        raise ValueError('omega must be strictly positive.')
    s = 1j * omega_grid
    num = P.polyval(s, block.numerator)
    den = P.polyval(s, block.denominator)
    if np.any(den == 0):
        bad = omega_grid[den == 0][0]
        raise ValueError(f'Block {block.label!r} has a pole on imaginary '
                         f'axis at omega={bad!r} rad/s.')
    points = np.empty(omega_grid.shape[0], dtype=FREQUENCY_POINT_DTYPE)
    points['omega_rad_s'] = omega_grid
    points['magnitude'] = np.abs(num) / np.abs(den)
    rational_phase = np.unwrap(np.angle(num) - np.angle(den))
    points['phase_rad'] = rational_phase - omega_grid * block.delay_s
    return points


def series(blocks, label=None):
    """Chain blocks: polynomial products and summed delays.

    Parameters
    ----------
    blocks : sequence of TransferBlock
        Nonempty, in signal-flow order.
    label : str or None, optional(default=None)
        Label of the result. If None, the labels are joined with '*'.

    Returns
    -------
    block : TransferBlock
    """
    blocks = list(blocks)
    if not blocks:
        raise ValueError('series() needs at least one block.')
    numerator = np.array([1.])
    denominator = np.array([1.])
    delay_s = 0.
    for block in blocks:
        numerator = P.polymul(numerator, block.numerator)
        denominator = P.polymul(denominator, block.denominator)
        delay_s += block.delay_s
    if label is None:
        label = '*'.join(block.label for block in blocks if block.label)
    return TransferBlock(numerator, denominator, delay_s=delay_s, label=label)


@njit
def _lfilter_step(b, a, z, x):
    """One sample of a direct form II transposed filter (a[0] == 1)."""
    y = b[0] * x
    n = z.shape[0]
    if n > 0:
        y += z[0]
        for i in range(n - 1):
            z[i] = b[i + 1] * x + z[i + 1] - a[i + 1] * y
        z[n - 1] = b[n] * x - a[n] * y
    return y


@njit
def _ring_step(ring, pos, value):
    """Push value in the ring buffer, return the value from len(ring) ago."""
    n = ring.shape[0]
    if n == 0:
        return value
    out = ring[pos[0]]
    ring[pos[0]] = value
    pos[0] = (pos[0] + 1) % n
    return out


@njit
def _run_stepper(b, a, z, ring, pos, inputs, out):
    for k in range(inputs.shape[0]):
        out[k] = _ring_step(ring, pos, _lfilter_step(b, a, z, inputs[k]))


def bilinear_coefficients(block, dt):
    """Trapezoidal mapping of the rational part of ``block``.

    Returns
    -------
    b, a : arrays of float, same length, a[0] == 1
        Coefficients of the discrete filter in increasing powers of 1/z.
    """
    if not block.is_proper:
        raise ValueError(f'Block {block.label!r} is improper and has no '
                         f'discrete realization.')
    b, a = bilinear(block.numerator[::-1], block.denominator[::-1],
                    fs=1. / dt)
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    size = max(b.shape[0], a.shape[0])
    b = np.concatenate([np.zeros(size - b.shape[0]), b])
    a = np.concatenate([a, np.zeros(size - a.shape[0])])
    b /= a[0]
    a /= a[0]
    # Keep N(0)/D(0) exact: z=1 maps to s=0.
    if block.denominator[0] != 0 and block.numerator[0] != 0:
        b *= block.dc_gain / (b.sum() / a.sum())
    return b, a


class DiscreteStepper:
    """Fixed-step realization of a TransferBlock.

    Parameters
    ----------
    b, a : array-like of float
        Direct form II transposed coefficients, same length, a[0] == 1.
    n_delay : int
        Length of the output ring buffer realizing the pure delay.
    dt_s : float
        The sample time in seconds.
    label : str, optional(default='')
    """
    def __init__(self, b, a, n_delay, dt_s, label=''):
        if dt_s <= 0:
            raise ValueError(f'dt_s={dt_s} must be strictly positive.')
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        self.a = np.ascontiguousarray(a, dtype=np.float64)
        self.dt_s = dt_s
        self.label = label
        self.state_vector = np.zeros(self.a.shape[0] - 1)
        self.delay_buffer = np.zeros(int(n_delay))
        self._pos = np.zeros(1, dtype=np.int64)

    @property
    def n_delay(self):
        return self.delay_buffer.shape[0]

    def reset(self):
        self.state_vector[:] = 0.
        self.delay_buffer[:] = 0.
        self._pos[0] = 0

    def step(self, value):
        """Advance one dt with input ``value`` and return the output."""
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f'Stepper {self.label!r} got a non-finite '
                             f'input {value!r}.')
        y = _lfilter_step(self.b, self.a, self.state_vector, value)
        return float(_ring_step(self.delay_buffer, self._pos, y))

    def run(self, inputs):
        """Step through a whole input sequence.

        Parameters
        ----------
        inputs : array-like of float, shape=(n_samples,)

        Returns
        -------
        outputs : array of float, shape=(n_samples,)
        """
        inputs = np.ascontiguousarray(inputs, dtype=np.float64)
        if not np.all(np.isfinite(inputs)):
            raise ValueError(f'Stepper {self.label!r} got non-finite '
                             f'inputs.')
        out = np.empty_like(inputs)
        _run_stepper(self.b, self.a, self.state_vector, self.delay_buffer,
                     self._pos, inputs, out)
        return out


def discretize(block, dt):
    """Build the DiscreteStepper of a block at sample time ``dt``.

    The delay must be an integer number of samples (relative tolerance
    1e-6), otherwise a ValueError naming both values is raised.
    """
    n_delay = delay_samples(block.delay_s, dt,
                            name=f'{block.label or "block"}.delay_s')
    b, a = bilinear_coefficients(block, dt)
    return DiscreteStepper(b, a, n_delay, dt, label=block.label)


def step(stepper, value):
    """Advance ``stepper`` by one sample, see DiscreteStepper.step."""
    return stepper.step(value)
