"""
This module contains the virtual PHIL testbench.

A PhilLoop couples a simulated side (ideal harmonic source behind a source
impedance) to a modeled hardware under test through a power interface made
of an amplifier and a feedback sensor. The loop is executed with a fixed
step by run_time_domain(), its ideal directly-coupled counterpart by
reference_direct(), and the two are compared with accuracy_metrics().
"""
import numbers
from time import time

import numpy as np
from numba import njit
from numpy.polynomial import polynomial as P
from sklearn.base import BaseEstimator

from .compensation import design_feedback_filter
from .lti import (TransferBlock, bilinear_coefficients, discretize, series,
                  _lfilter_step)
from .utils import (delay_samples, write_csv, read_csv, check_random_state_u64,
                    check_seed, ParamsEqualityMixin)


INTERFACE_ALGORITHMS = ('itm', 'feedback-filter', 'shifting-impedance')
IMPEDANCE_KINDS = ('resistive', 'series-rl', 'parallel-rc')
DISTURBANCE_KINDS = ('sine', 'step', 'white')
CHANNELS = ('voltage', 'current', 'command', 'feedback')

# A channel exceeding this many times the open-circuit amplitude marks the
# run as diverged.
DIVERGENCE_FACTOR = 10.
STEADY_STATE_FRACTION = 0.2

POWER_RECORD_DTYPE = np.dtype([
    ('harmonic', np.int64),
    ('active_power_w', np.float64),
    ('reactive_power_var', np.float64),
    ('power_factor', np.float64),
])


class ImpedanceModel(ParamsEqualityMixin, BaseEstimator):
    """A two-terminal passive element.

    Parameters
    ----------
    kind : {'resistive', 'series-rl', 'parallel-rc'}, \
        optional(default='resistive')
        The element topology.
    resistance_ohm : float, optional(default=1.)
        The resistance R.
    inductance_h : float or None, optional(default=None)
        The inductance L, required for 'series-rl'.
    capacitance_f : float or None, optional(default=None)
        The capacitance C, required for 'parallel-rc'.
    """
    def __init__(self, kind='resistive', resistance_ohm=1.,
                 inductance_h=None, capacitance_f=None):
        self.kind = kind
        self.resistance_ohm = resistance_ohm
        self.inductance_h = inductance_h
        self.capacitance_f = capacitance_f

    def _validate_parameters(self):
        if self.kind not in IMPEDANCE_KINDS:
            raise ValueError(f'kind={self.kind!r} is not supported. Accepted '
                             f'kinds are {", ".join(IMPEDANCE_KINDS)}.')
        if not self.resistance_ohm > 0:
            raise ValueError(f'resistance_ohm={self.resistance_ohm} must be '
                             f'strictly positive.')
        if self.kind == 'series-rl' and not (
                self.inductance_h is not None and self.inductance_h > 0):
            raise ValueError(f'inductance_h={self.inductance_h} must be '
                             f'strictly positive for a series-rl element.')
        if self.kind == 'parallel-rc' and not (
                self.capacitance_f is not None and self.capacitance_f > 0):
            raise ValueError(f'capacitance_f={self.capacitance_f} must be '
                             f'strictly positive for a parallel-rc element.')

    def impedance_polys(self):
        """Return (N, D), ascending coefficients of Z(s) = N(s)/D(s)."""
        self._validate_parameters()
        R = float(self.resistance_ohm)
        if self.kind == 'resistive':
            return np.array([R]), np.array([1.])
        if self.kind == 'series-rl':
            return np.array([R, float(self.inductance_h)]), np.array([1.])
        return np.array([R]), np.array([1., R * float(self.capacitance_f)])

    def impedance(self, omega):
        num, den = self.impedance_polys()
        s = 1j * np.asarray(omega, dtype=np.float64)
        return P.polyval(s, num) / P.polyval(s, den)


class HutModel(ImpedanceModel):
    """The hardware under test, modeled as a passive load.

    See ImpedanceModel for the parameters. The HUT admittance houses G_h.
    """


class AmplifierModel(ParamsEqualityMixin, BaseEstimator):
    """Power amplifier: gain, first-order bandwidth and pure delay.

    Parameters
    ----------
    gain : float, optional(default=1.)
        Voltage gain (V/V).
    bandwidth_hz : float, optional(default=np.inf)
        Cutoff of the first-order low-pass. ``np.inf`` models an ideal
        amplifier with no bandwidth limit.
    delay_s : float, optional(default=0.)
        The amplifier's contribution to the loop delay.
    saturation_v : float or None, optional(default=None)
        Symmetric output clamp. None disables saturation.
    """
    def __init__(self, gain=1., bandwidth_hz=np.inf, delay_s=0.,
                 saturation_v=None):
        self.gain = gain
        self.bandwidth_hz = bandwidth_hz
        self.delay_s = delay_s
        self.saturation_v = saturation_v

    def _validate_parameters(self):
        if not np.isfinite(self.gain) or self.gain == 0:
            raise ValueError(f'gain={self.gain} must be finite and nonzero.')
        if not self.bandwidth_hz > 0:
            raise ValueError(f'bandwidth_hz={self.bandwidth_hz} must be '
                             f'strictly positive.')
        if not self.delay_s >= 0:
            raise ValueError(f'delay_s={self.delay_s} must not be negative.')
        if self.saturation_v is not None and not self.saturation_v > 0:
            raise ValueError(f'saturation_v={self.saturation_v} must be '
                             f'strictly positive, or None.')

    def rational_polys(self):
        self._validate_parameters()
        if np.isinf(self.bandwidth_hz):
            return np.array([float(self.gain)]), np.array([1.])
        return (np.array([float(self.gain)]),
                np.array([1., 1. / (2 * np.pi * self.bandwidth_hz)]))

    def block(self):
        """The amplifier as gain * LP(bandwidth) * exp(-s delay_s)."""
        num, den = self.rational_polys()
        return TransferBlock(num, den, delay_s=self.delay_s, label='G_amp')


class SimulatedSide(ParamsEqualityMixin, BaseEstimator):
    """Simulated network: ideal harmonic source behind an impedance.

    Parameters
    ----------
    fundamental_hz : float, optional(default=50.)
        The fundamental frequency f0.
    harmonics : sequence of (int, float, float), \
        optional(default=((1, 1., 0.),))
        ``(order, amplitude_v, phase_rad)`` triples. Each harmonic
        contributes ``amplitude_v * sin(2 pi order f0 t + phase_rad)``.
    source_impedance : ImpedanceModel or None, optional(default=None)
        The source impedance (houses G_s). None means 1 ohm resistive.
    """
    def __init__(self, fundamental_hz=50., harmonics=((1, 1., 0.),),
                 source_impedance=None):
        self.fundamental_hz = fundamental_hz
        self.harmonics = harmonics
        self.source_impedance = source_impedance

    def _validate_parameters(self):
        if not self.fundamental_hz > 0:
            raise ValueError(f'fundamental_hz={self.fundamental_hz} must be '
                             f'strictly positive.')
        orders = [h for h, _, _ in self.harmonics]
        if not orders:
            raise ValueError('harmonics must not be empty.')
        for h, amplitude, phase in self.harmonics:
            if int(h) != h or h < 1:
                raise ValueError(f'harmonic order {h} must be a positive '
                                 f'integer.')
            if not (np.isfinite(amplitude) and np.isfinite(phase)):
                raise ValueError(f'harmonic {h} has a non-finite amplitude '
                                 f'or phase.')
        if len(set(orders)) != len(orders):
            raise ValueError(f'harmonic orders {orders} must be unique.')
        self.impedance_model._validate_parameters()

    @property
    def impedance_model(self):
        if self.source_impedance is None:
            return ImpedanceModel()
        return self.source_impedance

    @property
    def orders(self):
        return tuple(int(h) for h, _, _ in self.harmonics)

    @property
    def open_circuit_amplitude(self):
        return float(sum(abs(a) for _, a, _ in self.harmonics))

    @property
    def max_frequency_hz(self):
        return max(self.orders) * self.fundamental_hz

    def harmonic_arrays(self, phase_shifts=None):
        """Return amplitudes, angular frequencies and phases as arrays."""
        phase_shifts = phase_shifts or {}
        amplitudes = np.array([a for _, a, _ in self.harmonics], dtype=float)
        omegas = np.array([2 * np.pi * h * self.fundamental_hz
                           for h, _, _ in self.harmonics])
        phases = np.array([p + phase_shifts.get(int(h), 0.)
                           for h, _, p in self.harmonics], dtype=float)
        return amplitudes, omegas, phases

    def source_signal(self, n_samples, dt):
        amplitudes, omegas, phases = self.harmonic_arrays()
        t = np.arange(n_samples) * dt
        out = np.zeros(n_samples)
        for amplitude, omega, phase in zip(amplitudes, omegas, phases):
            out += amplitude * np.sin(omega * t + phase)
        return out


class Disturbance(ParamsEqualityMixin, BaseEstimator):
    """Additive disturbance d(t) at the amplifier output.

    Parameters
    ----------
    kind : {'sine', 'step', 'white'}, optional(default='sine')
    amplitude_v : float, optional(default=0.)
        Peak amplitude (sine), step height (step) or standard deviation
        (white).
    frequency_hz : float or None, optional(default=None)
        Frequency of the sine disturbance.
    start_s : float, optional(default=0.)
        The disturbance is zero before this time.
    random_state : int, np.random.RandomState or None, \
        optional(default=None)
        Seed of the white noise. Integer seeds may use the full unsigned
        64-bit range.
    """
    def __init__(self, kind='sine', amplitude_v=0., frequency_hz=None,
                 start_s=0., random_state=None):
        self.kind = kind
        self.amplitude_v = amplitude_v
        self.frequency_hz = frequency_hz
        self.start_s = start_s
        self.random_state = random_state

    def _validate_parameters(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f'kind={self.kind!r} is not supported. Accepted '
                             f'kinds are {", ".join(DISTURBANCE_KINDS)}.')
        if not np.isfinite(self.amplitude_v):
            raise ValueError(f'amplitude_v={self.amplitude_v} must be '
                             f'finite.')
        if self.kind == 'sine' and not (self.frequency_hz is not None and
                                        self.frequency_hz > 0):
            raise ValueError(f'frequency_hz={self.frequency_hz} must be '
                             f'strictly positive for a sine disturbance.')
        if not self.start_s >= 0:
            raise ValueError(f'start_s={self.start_s} must not be negative.')
        if isinstance(self.random_state, (numbers.Integral, np.integer)):
            check_seed(self.random_state, name='random_state')

    @property
    def peak(self):
        if self.kind == 'white':
            # unbounded; 4 sigma covers the seeded sequences in practice
            return 4 * abs(self.amplitude_v)
        return abs(self.amplitude_v)

    def sample(self, n_samples, dt):
        """Return the disturbance sampled at ``k * dt``."""
        self._validate_parameters()
        t = np.arange(n_samples) * dt
        if self.kind == 'sine':
            out = self.amplitude_v * np.sin(2 * np.pi * self.frequency_hz * t)
        elif self.kind == 'step':
            out = np.full(n_samples, float(self.amplitude_v))
        else:
            rng = check_random_state_u64(self.random_state)
            out = self.amplitude_v * rng.standard_normal(n_samples)
        out[t < self.start_s] = 0.
        return out


class PhilLoop(ParamsEqualityMixin, BaseEstimator):
    """The closed PHIL loop.

    The simulator computes the coupling voltage ``e - u`` where ``u`` is
    the voltage drop caused by the fed back current on the simulated source
    impedance. The amplifier applies it to the HUT; the sensor measures the
    HUT current and sends it back after ``sensor_delay_s``.

    Parameters
    ----------
    simulated_side : SimulatedSide or None, optional(default=None)
        None means ``SimulatedSide()``.
    amplifier : AmplifierModel or None, optional(default=None)
        None means ``AmplifierModel()``.
    hut : HutModel or None, optional(default=None)
        None means ``HutModel()``.
    interface : {'itm', 'feedback-filter', 'shifting-impedance'}, \
        optional(default='itm')
        The interface algorithm.
    cutoff_hz : float or None, optional(default=None)
        Cutoff of the feedback low-pass filter, required by
        'feedback-filter'. ``np.inf`` disables filtering.
    z_shift_ohm : float or None, optional(default=None)
        Resistance moved from the simulated side to the power interface,
        required by 'shifting-impedance'.
    sensor_delay_s : float, optional(default=0.)
        Delay of the current measurement.
    disturbance : Disturbance or None, optional(default=None)
        Additive signal at the amplifier output.
    phase_advance : PhaseAdvancePlan or None, optional(default=None)
        Per-harmonic phase advance of the amplifier command, see
        compensation.apply_phase_advance.
    extrapolator : Extrapolator or None, optional(default=None)
        Predictor applied to the feedback samples, see
        compensation.apply_extrapolator.
    """
    def __init__(self, simulated_side=None, amplifier=None, hut=None,
                 interface='itm', cutoff_hz=None, z_shift_ohm=None,
                 sensor_delay_s=0., disturbance=None, phase_advance=None,
                 extrapolator=None):
        self.simulated_side = simulated_side
        self.amplifier = amplifier
        self.hut = hut
        self.interface = interface
        self.cutoff_hz = cutoff_hz
        self.z_shift_ohm = z_shift_ohm
        self.sensor_delay_s = sensor_delay_s
        self.disturbance = disturbance
        self.phase_advance = phase_advance
        self.extrapolator = extrapolator

    @property
    def source(self):
        return (SimulatedSide() if self.simulated_side is None
                else self.simulated_side)

    @property
    def amp(self):
        return AmplifierModel() if self.amplifier is None else self.amplifier

    @property
    def load(self):
        return HutModel() if self.hut is None else self.hut

    def _validate_parameters(self):
        self.source._validate_parameters()
        self.amp._validate_parameters()
        self.load._validate_parameters()
        if self.interface not in INTERFACE_ALGORITHMS:
            raise ValueError(
                f'Unknown interface algorithm {self.interface!r}. Accepted '
                f'algorithms are {", ".join(INTERFACE_ALGORITHMS)}.')
        if self.interface == 'feedback-filter' and not (
                self.cutoff_hz is not None and self.cutoff_hz > 0):
            raise ValueError(f'cutoff_hz={self.cutoff_hz} must be strictly '
                             f'positive for the feedback-filter interface.')
        if self.interface == 'shifting-impedance' and not (
                self.z_shift_ohm is not None and self.z_shift_ohm > 0):
            raise ValueError(f'z_shift_ohm={self.z_shift_ohm} must be '
                             f'strictly positive for the shifting-impedance '
                             f'interface.')
        if not self.sensor_delay_s >= 0:
            raise ValueError(f'sensor_delay_s={self.sensor_delay_s} must not '
                             f'be negative.')
        if self.disturbance is not None:
            self.disturbance._validate_parameters()
        if self.phase_advance is not None:
            self.phase_advance.check_source(self.source)
        if self.extrapolator is not None:
            self.extrapolator.check_horizon(self.total_delay_s)

    @property
    def total_delay_s(self):
        return self.amp.delay_s + self.sensor_delay_s

    @property
    def z_shift(self):
        if self.interface == 'shifting-impedance':
            return float(self.z_shift_ohm)
        return 0.

    def filter_block(self):
        """The interface filter: the designed low-pass or the identity."""
        if self.interface != 'feedback-filter':
            return TransferBlock.gain(1., label='feedback filter')
        return design_feedback_filter(self.cutoff_hz)

    def filter_polys(self):
        block = self.filter_block()
        return block.numerator, block.denominator

    def _shifted_polys(self):
        """Source impedance minus z and HUT impedance plus z."""
        z = self.z_shift
        ns, ds = self.source.impedance_model.impedance_polys()
        nh, dh = self.load.impedance_polys()
        return (P.polysub(ns, z * ds), ds), (P.polyadd(nh, z * dh), dh)

    def chain_blocks(self):
        """The open-loop factors in signal-flow order.

        Returns
        -------
        blocks : list of TransferBlock
            The simulated source impedance (G_s, minus the shifted
            impedance), the interface filter, the amplifier, the HUT
            admittance (G_h, plus the shifted impedance) and the sensor
            delay. The impedance factors may be improper.
        """
        (ns, ds), (nh, dh) = self._shifted_polys()
        return [
            TransferBlock(ns, ds, label='G_s', allow_improper=True),
            self.filter_block(),
            self.amp.block(),
            TransferBlock(dh, nh, label='G_h', allow_improper=True),
            TransferBlock.gain(1., delay_s=self.sensor_delay_s,
                               label='sensor'),
        ]

    def section_polys(self):
        """Rational parts of the time-domain sections.

        Returns
        -------
        sections : dict
            ``name -> (numerator, denominator)`` for 'amplifier' (command to
            amplifier output), 'voltage' and 'current' (amplifier output to
            HUT voltage and current), 'feedback' (amplifier output to the
            voltage drop fed back to the simulator) and 'simulator' (HUT
            current to the fed back voltage drop).
        """
        (ns, ds), (nh, dh) = self._shifted_polys()
        nf, df = self.filter_polys()
        hut_num, _ = self.load.impedance_polys()
        return {
            'amplifier': self.amp.rational_polys(),
            'voltage': (P.polymul(hut_num, [1.]), nh),
            'current': (dh, nh),
            'feedback': (P.polymul(P.polymul(ns, dh), nf),
                         P.polymul(P.polymul(ds, nh), df)),
            'simulator': (P.polymul(ns, nf), P.polymul(ds, df)),
        }

    def open_loop_block(self):
        """The open-loop chain G_s * filter * G_amp * G_h * exp(-s T_d)."""
        self._validate_parameters()
        try:
            return series(self.chain_blocks(), label='open loop')
        except ValueError as e:
            raise ValueError(f'The open loop of this PHIL configuration is '
                             f'not proper ({e}). Add amplifier bandwidth or '
                             f'a feedback filter.') from e

    def section_block(self, name):
        num, den = self.section_polys()[name]
        try:
            return TransferBlock(num, den, label=name)
        except ValueError as e:
            raise ValueError(
                f'The {name} section of this PHIL configuration has no '
                f'time-domain realization ({e}).') from e


def build_loop(description, dt=None):
    """Build a PhilLoop from a loop description.

    Parameters
    ----------
    description : dict or PhilLoop
        Either a PhilLoop or a dict with keys 'source' (dict of
        SimulatedSide parameters, whose 'impedance' entry is a dict of
        ImpedanceModel parameters), 'amplifier', 'hut', 'disturbance'
        (dicts of the corresponding parameters) and the scalar PhilLoop
        parameters ('interface', 'cutoff_hz', 'z_shift_ohm',
        'sensor_delay_s').
    dt : float or None, optional(default=None)
        If given, every declared delay must be an integer multiple of it.

    Returns
    -------
    loop : PhilLoop
    open_loop : TransferBlock
    """
    if isinstance(description, PhilLoop):
        loop = description
    else:
        description = dict(description)
        source = dict(description.pop('source', {}))
        impedance = source.pop('impedance', None)
        if impedance is not None and not isinstance(impedance,
                                                    ImpedanceModel):
            impedance = ImpedanceModel(**impedance)
        simulated_side = SimulatedSide(source_impedance=impedance, **source)
        amplifier = AmplifierModel(**description.pop('amplifier', {}))
        hut = HutModel(**description.pop('hut', {}))
        disturbance = description.pop('disturbance', None)
        if disturbance is not None:
            disturbance = Disturbance(**disturbance)
        loop = PhilLoop(simulated_side=simulated_side, amplifier=amplifier,
                        hut=hut, disturbance=disturbance, **description)
    loop._validate_parameters()
    if dt is not None:
        check_delays(loop, dt)
    return loop, loop.open_loop_block()


def check_delays(loop, dt):
    """Return the amplifier and sensor delays in samples of ``dt``."""
    return (delay_samples(loop.amp.delay_s, dt, name='amplifier.delay_s'),
            delay_samples(loop.sensor_delay_s, dt, name='sensor_delay_s'))


class Trace:
    """Equal-length sampled channels.

    Parameters
    ----------
    dt_s : float
        The sample time.
    channels : dict
        ``name -> array of float``, all of the same length.
    fundamental_hz : float or None, optional(default=None)
        Fundamental of the source, used by accuracy_metrics.
    diverged : bool, optional(default=False)
        True if the run was stopped by the divergence check.
    """
    def __init__(self, dt_s, channels, fundamental_hz=None, diverged=False):
        channels = {name: np.asarray(values, dtype=np.float64)
                    for name, values in channels.items()}
        lengths = {values.shape[0] for values in channels.values()}
        if len(lengths) > 1:
            raise ValueError(f'All channels must have the same length, got '
                             f'{sorted(lengths)}.')
        if not diverged:
            for name, values in channels.items():
                if not np.all(np.isfinite(values)):
                    raise ValueError(f'Channel {name!r} has non-finite '
                                     f'samples.')
        self.dt_s = dt_s
        self.channels = channels
        self.fundamental_hz = fundamental_hz
        self.diverged = diverged

    def __getitem__(self, name):
        return self.channels[name]

    def __repr__(self):
        return (f"Trace(dt_s={self.dt_s!r}, channels={list(self.channels)}, "
                f"n_samples={self.n_samples}, diverged={self.diverged})")

    @property
    def n_samples(self):
        if not self.channels:
            return 0
        return next(iter(self.channels.values())).shape[0]

    @property
    def time(self):
        return np.arange(self.n_samples) * self.dt_s

    def to_csv(self, path):
        """Write time_s and every channel, 17 significant digits."""
        names = list(self.channels)
        columns = [self.time] + [self.channels[name] for name in names]
        rows = zip(*[column.tolist() for column in columns])
        comments = [f'diverged={str(self.diverged).lower()}',
                    f'dt_s={self.dt_s!r}']
        if self.fundamental_hz is not None:
            comments.append(f'fundamental_hz={self.fundamental_hz!r}')
        return write_csv(path, ['time_s'] + names, rows, comments=comments)

    @classmethod
    def from_csv(cls, path):
        """Load a trace written by to_csv."""
        comments, header, rows = read_csv(path)
        meta = dict(comment.split('=', 1) for comment in comments
                    if '=' in comment)
        if header[:1] != ['time_s'] or 'dt_s' not in meta:
            raise ValueError(f'{path} is not a trace file.')
        values = np.array(rows, dtype=np.float64).reshape(-1, len(header))
        fundamental_hz = meta.get('fundamental_hz')
        return cls(float(meta['dt_s']),
                   {name: values[:, idx]
                    for idx, name in enumerate(header) if idx > 0},
                   fundamental_hz=(None if fundamental_hz is None
                                   else float(fundamental_hz)),
                   diverged=meta.get('diverged') == 'true')


@njit
def _ring_peek(ring, pos):
    return ring[pos[0]]


@njit
def _ring_push(ring, pos, value):
    ring[pos[0]] = value
    pos[0] = (pos[0] + 1) % ring.shape[0]


@njit
def _advance_loop(k0, n, dt, src_amp, src_omega, src_phase, dist,
                  amp_b, amp_a, amp_z, amp_ring, amp_pos,
                  volt_b, volt_a, volt_z, cur_b, cur_a, cur_z,
                  fb_b, fb_a, fb_z, fb_ring, fb_pos,
                  ext_gain, ext_prev, saturation, threshold, out):
    """Run samples k0 .. k0 + n - 1 of the closed loop.

    Returns the number of samples computed and a status: 0 ok, 1 diverged,
    2 non-finite sample.
    """
    n_amp = amp_ring.shape[0]
    n_fb = fb_ring.shape[0]
    for j in range(n):
        k = k0 + j
        t = k * dt
        e = 0.
        for h in range(src_amp.shape[0]):
            e += src_amp[h] * np.sin(src_omega[h] * t + src_phase[h])

        v = 0.
        i = 0.
        r = 0.
        u_raw = 0.
        if n_fb > 0:
            u_raw = _ring_peek(fb_ring, fb_pos)
        if n_amp > 0:
            a_out = _ring_peek(amp_ring, amp_pos)
            w = min(max(a_out, -saturation), saturation) + dist[k]
            v = _lfilter_step(volt_b, volt_a, volt_z, w)
            i = _lfilter_step(cur_b, cur_a, cur_z, w)
            r = _lfilter_step(fb_b, fb_a, fb_z, w)
            if n_fb == 0:
                u_raw = r
        u = u_raw + ext_gain * (u_raw - ext_prev[0])
        ext_prev[0] = u_raw
        cmd = e - u
        if n_amp > 0:
            _ring_push(amp_ring, amp_pos,
                       _lfilter_step(amp_b, amp_a, amp_z, cmd))
        else:
            a_out = _lfilter_step(amp_b, amp_a, amp_z, cmd)
            w = min(max(a_out, -saturation), saturation) + dist[k]
            v = _lfilter_step(volt_b, volt_a, volt_z, w)
            i = _lfilter_step(cur_b, cur_a, cur_z, w)
            r = _lfilter_step(fb_b, fb_a, fb_z, w)
        if n_fb > 0:
            _ring_push(fb_ring, fb_pos, r)

        out[0, k] = v
        out[1, k] = i
        out[2, k] = cmd
        out[3, k] = u
        if not (np.isfinite(v) and np.isfinite(i) and np.isfinite(cmd) and
                np.isfinite(u)):
            return j + 1, 2
        if abs(v) > threshold or abs(cmd) > threshold:
            return j + 1, 1
    return n, 0


class LoopRealization:
    """Discretized state of a PhilLoop, advanced in chunks of samples.

    Parameters
    ----------
    loop : PhilLoop
    dt : float
        The sample time. Every delay must be a multiple of it.
    n_samples : int
        Total number of samples the realization can run.
    """
    def __init__(self, loop, dt, n_samples):
        loop._validate_parameters()
        n_amp, n_fb = check_delays(loop, dt)
        if n_amp + n_fb == 0:
            raise ValueError('The total loop delay must be strictly positive '
                             'for a PHIL run; use reference_direct() for '
                             'ideal coupling.')
        self.dt = dt
        self.n_samples = n_samples
        shifts = ({} if loop.phase_advance is None
                  else loop.phase_advance.phase_shifts())
        self.src_amp, self.src_omega, self.src_phase = \
            loop.source.harmonic_arrays(shifts)
        if loop.disturbance is None:
            self.dist = np.zeros(n_samples)
        else:
            self.dist = loop.disturbance.sample(n_samples, dt)
        self.coefficients = {}
        self.states = {}
        for name in ('amplifier', 'voltage', 'current', 'feedback'):
            b, a = bilinear_coefficients(loop.section_block(name), dt)
            self.coefficients[name] = (b, a)
            self.states[name] = np.zeros(a.shape[0] - 1)
        self.amp_ring = np.zeros(n_amp)
        self.fb_ring = np.zeros(n_fb)
        self.amp_pos = np.zeros(1, dtype=np.int64)
        self.fb_pos = np.zeros(1, dtype=np.int64)
        self.ext_prev = np.zeros(1)
        self.ext_gain = 0.
        if loop.extrapolator is not None:
            self.ext_gain = loop.extrapolator.gain(dt)
        saturation = loop.amp.saturation_v
        self.saturation = np.inf if saturation is None else float(saturation)
        peak = loop.source.open_circuit_amplitude
        if loop.disturbance is not None:
            peak += loop.disturbance.peak
        self.threshold = DIVERGENCE_FACTOR * peak
        self.out = np.zeros((len(CHANNELS), n_samples))
        self.k = 0

    def advance(self, n):
        """Compute the next ``n`` samples, return (n_done, status)."""
        n = min(n, self.n_samples - self.k)
        amp_b, amp_a = self.coefficients['amplifier']
        volt_b, volt_a = self.coefficients['voltage']
        cur_b, cur_a = self.coefficients['current']
        fb_b, fb_a = self.coefficients['feedback']
        n_done, status = _advance_loop(
            self.k, n, self.dt, self.src_amp, self.src_omega, self.src_phase,
            self.dist, amp_b, amp_a, self.states['amplifier'], self.amp_ring,
            self.amp_pos, volt_b, volt_a, self.states['voltage'], cur_b,
            cur_a, self.states['current'], fb_b, fb_a,
            self.states['feedback'], self.fb_ring, self.fb_pos,
            self.ext_gain, self.ext_prev, self.saturation, self.threshold,
            self.out)
        self.k += n_done
        if status == 2:
            raise FloatingPointError(
                f'Non-finite sample at t={(self.k - 1) * self.dt!r} s.')
        return n_done, status

    def channels(self):
        return {name: self.out[idx, :self.k].copy()
                for idx, name in enumerate(CHANNELS)}


def _check_run_parameters(loop, dt, duration):
    if not dt > 0:
        raise ValueError(f'dt={dt} must be strictly positive.')
    if not duration > 0:
        raise ValueError(f'duration={duration} must be strictly positive.')
    f_max = loop.source.max_frequency_hz
    if dt > 1. / (50 * f_max) * (1 + 1e-9):
        raise ValueError(f'dt={dt} is too large for the highest source '
                         f'harmonic ({f_max} Hz): dt must not exceed '
                         f'1/(50 f_max)={1. / (50 * f_max)!r}.')
    return int(round(duration / dt))


def run_time_domain(loop, dt, duration, verbose=0):
    """Fixed-step closed-loop execution of a PHIL loop.

    The run is stopped early and flagged as diverged as soon as the
    coupling voltage or the amplifier command exceeds 10 times the
    open-circuit amplitude of the source (plus the disturbance peak).

    Parameters
    ----------
    loop : PhilLoop
    dt : float
        The sample time in seconds.
    duration : float
        The simulated time in seconds.
    verbose : int, optional(default=0)
        If not zero, print timing information.

    Returns
    -------
    trace : Trace
        Channels 'voltage' (coupling point), 'current' (HUT current),
        'command' (amplifier command) and 'feedback' (voltage drop fed back
        to the simulated side).
    """
    loop._validate_parameters()
    n_samples = _check_run_parameters(loop, dt, duration)
    tic = time()
    realization = LoopRealization(loop, dt, n_samples)
    _, status = realization.advance(n_samples)
    diverged = status == 1
    if verbose:
        duration_s = time() - tic
        print(f"Simulated {realization.k} samples in {duration_s:.3f} s"
              f"{' (diverged)' if diverged else ''}")
    return Trace(dt, realization.channels(),
                 fundamental_hz=loop.source.fundamental_hz,
                 diverged=diverged)


def reference_direct(loop, dt, duration):
    """The same circuit with the HUT directly connected, no interface.

    Returns
    -------
    trace : Trace
        Same channels as run_time_domain: the command equals the coupling
        voltage and the feedback is the drop on the source impedance.
    """
    loop._validate_parameters()
    n_samples = _check_run_parameters(loop, dt, duration)
    ns, ds = loop.source.impedance_model.impedance_polys()
    nh, dh = loop.load.impedance_polys()
    total = P.polyadd(P.polymul(nh, ds), P.polymul(ns, dh))
    voltage_block = TransferBlock(P.polymul(nh, ds), total, label='divider')
    current_block = TransferBlock(P.polymul(ds, dh), total,
                                  label='admittance')
    e = loop.source.source_signal(n_samples, dt)
    voltage = discretize(voltage_block, dt).run(e)
    current = discretize(current_block, dt).run(e)
    return Trace(dt, {'voltage': voltage, 'current': current,
                      'command': voltage.copy(), 'feedback': e - voltage},
                 fundamental_hz=loop.source.fundamental_hz)


def steady_state_window(n_samples, dt, fundamental_hz):
    """Start and length of the analysis window.

    The window is the last 20% of the run truncated to an integer number
    of fundamental periods.
    """
    samples_per_period = 1. / (fundamental_hz * dt)
    available = int(np.floor(STEADY_STATE_FRACTION * n_samples))
    n_periods = int(np.floor(available / samples_per_period + 1e-9))
    if n_periods < 1:
        raise ValueError(
            f'The analysis window ({available} samples) is shorter than one '
            f'fundamental period ({samples_per_period:.6g} samples).')
    length = int(round(n_periods * samples_per_period))
    return n_samples - length, length


@njit
def _project(values, start, length, omega_dt):
    """Single-bin Fourier projection: 2/N sum x[k] exp(-j omega k dt)."""
    re = 0.
    im = 0.
    for k in range(start, start + length):
        angle = omega_dt * k
        re += values[k] * np.cos(angle)
        im -= values[k] * np.sin(angle)
    return 2. * re / length, 2. * im / length


def harmonic_phasor(values, dt, frequency_hz, start, length):
    re, im = _project(np.ascontiguousarray(values, dtype=np.float64), start,
                      length, 2 * np.pi * frequency_hz * dt)
    return complex(re, im)


def _fundamental(trace, fundamental_hz):
    if fundamental_hz is None:
        fundamental_hz = trace.fundamental_hz
    if fundamental_hz is None:
        raise ValueError('fundamental_hz is required when the trace does not '
                         'carry it.')
    return fundamental_hz


class AccuracyReport:
    """Per-harmonic magnitude and phase errors of a trace.

    Attributes
    ----------
    harmonics : array of int
    magnitude_error : array of float
        ``|X_h| / |R_h| - 1`` for trace X and reference R.
    phase_error_deg : array of float
        Phase lag of the trace with respect to the reference, in degrees,
        wrapped to (-180, 180].
    rms_error : float
        RMS of the sample-wise difference over the analysis window.
    channel : str
    """
    def __init__(self, harmonics, magnitude_error, phase_error_deg,
                 rms_error, channel):
        self.harmonics = harmonics
        self.magnitude_error = magnitude_error
        self.phase_error_deg = phase_error_deg
        self.rms_error = rms_error
        self.channel = channel

    def __repr__(self):
        return (f"AccuracyReport(channel={self.channel!r}, "
                f"harmonics={self.harmonics.tolist()}, "
                f"phase_error_deg={self.phase_error_deg.tolist()}, "
                f"rms_error={self.rms_error!r})")

    def phase_error(self, harmonic):
        idx = int(np.flatnonzero(self.harmonics == harmonic)[0])
        return float(self.phase_error_deg[idx])

    def to_csv(self, path):
        rows = [(h, m, p) for h, m, p in zip(self.harmonics.tolist(),
                                             self.magnitude_error.tolist(),
                                             self.phase_error_deg.tolist())]
        return write_csv(path, ['harmonic', 'magnitude_error',
                                'phase_error_deg'], rows,
                         comments=[f'channel={self.channel}',
                                   f'rms_error={self.rms_error!r}'])


def accuracy_metrics(trace, reference, harmonics, channel='voltage',
                     fundamental_hz=None):
    """Compare a trace with a reference over the steady-state window.

    Parameters
    ----------
    trace, reference : Trace
        Same dt and same number of samples.
    harmonics : iterable of int
        Harmonic orders to analyze.
    channel : str, optional(default='voltage')
    fundamental_hz : float or None, optional(default=None)
        Defaults to the fundamental carried by ``trace``.

    Returns
    -------
    report : AccuracyReport
    """
    fundamental_hz = _fundamental(trace, fundamental_hz)
    if trace.dt_s != reference.dt_s:
        raise ValueError(f'dt mismatch: {trace.dt_s!r} != '
                         f'{reference.dt_s!r}.')
    if trace.n_samples != reference.n_samples:
        raise ValueError(f'Trace has {trace.n_samples} samples but the '
                         f'reference has {reference.n_samples}.')
    harmonics = np.array(sorted(set(int(h) for h in harmonics)),
                         dtype=np.int64)
    if harmonics.shape[0] == 0:
        raise ValueError('harmonics must not be empty.')
    start, length = steady_state_window(trace.n_samples, trace.dt_s,
                                        fundamental_hz)
    x = trace[channel]
    ref = reference[channel]
    magnitude_error = np.empty(harmonics.shape[0])
    phase_error = np.empty(harmonics.shape[0])
    for idx, h in enumerate(harmonics):
        f = h * fundamental_hz
        x_h = harmonic_phasor(x, trace.dt_s, f, start, length)
        r_h = harmonic_phasor(ref, trace.dt_s, f, start, length)
        magnitude_error[idx] = (abs(x_h) / abs(r_h) - 1. if abs(r_h) > 0
                                else np.nan)
        lag = np.angle(r_h) - np.angle(x_h)
        wrapped = -((-lag + np.pi) % (2 * np.pi) - np.pi)
        phase_error[idx] = np.degrees(wrapped)
    window = slice(start, start + length)
    rms_error = float(np.sqrt(np.mean((x[window] - ref[window]) ** 2)))
    return AccuracyReport(harmonics, magnitude_error, phase_error, rms_error,
                          channel)


def power_exchange(trace, harmonics, fundamental_hz=None):
    """Per-harmonic power at the coupling point.

    Active and reactive power are computed from the voltage and current
    phasors (peak values) over the steady-state window.

    Returns
    -------
    records : array of POWER_RECORD_DTYPE
    """
    fundamental_hz = _fundamental(trace, fundamental_hz)
    harmonics = sorted(set(int(h) for h in harmonics))
    start, length = steady_state_window(trace.n_samples, trace.dt_s,
                                        fundamental_hz)
    records = np.zeros(len(harmonics), dtype=POWER_RECORD_DTYPE)
    for idx, h in enumerate(harmonics):
        f = h * fundamental_hz
        v = harmonic_phasor(trace['voltage'], trace.dt_s, f, start, length)
        i = harmonic_phasor(trace['current'], trace.dt_s, f, start, length)
        s = 0.5 * v * np.conj(i)
        apparent = abs(s)
        records[idx] = (h, s.real, s.imag,
                        s.real / apparent if apparent > 0 else np.nan)
    return records
