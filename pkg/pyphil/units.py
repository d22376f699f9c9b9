"""
This module contains the co-simulation units built from PHIL loops.

split_loop() cuts a PhilLoop at the amplifier boundary into a SimulatorUnit
(source, interface algorithm, extrapolator) and a HardwareUnit (amplifier,
disturbance, HUT). The amplifier and sensor delays become event timestamps,
so a lockstep run of the pair reproduces the monolithic loop when both
delays are at least one exchange step. A zero delay on either side costs
exactly one extra step in lockstep mode.
"""
import numpy as np

from .bench import DIVERGENCE_FACTOR, LoopRealization, Trace, check_delays
from .cosim import SampledUnit
from .lti import bilinear_coefficients, DiscreteStepper


def _stepper(loop, section, dt_s):
    block = loop.section_block(section)
    b, a = bilinear_coefficients(block, dt_s)
    return DiscreteStepper(b, a, 0, dt_s, label=section)


def _n_samples(dt_s, duration_s):
    if not duration_s > 0:
        raise ValueError(f'duration_s={duration_s} must be strictly '
                         f'positive.')
    return int(round(duration_s / dt_s))


class SourceUnit(SampledUnit):
    """Emits the source voltage of a SimulatedSide on 'value'."""
    output_ports = {'value': 'value'}
    channels = ('value',)

    def __init__(self, simulated_side, dt_s, name='source'):
        super().__init__(name, dt_s)
        simulated_side._validate_parameters()
        self.amplitudes, self.omegas, self.phases = \
            simulated_side.harmonic_arrays()

    def sample(self, k, ticks):
        t = k * self.dt_s
        value = float(np.sum(self.amplitudes *
                             np.sin(self.omegas * t + self.phases)))
        self.record(value=value)
        self.emit(ticks, 'value', value)


class BlockUnit(SampledUnit):
    """Static gain from 'in' to 'out' with an optional output delay."""
    input_ports = {'in': 'value'}
    output_ports = {'out': 'value'}
    channels = ('input', 'output')

    def __init__(self, dt_s, gain=1., delay_s=0., name='block'):
        super().__init__(name, dt_s, lookahead_s=delay_s)
        self.gain = gain

    def sample(self, k, ticks):
        x = self.inputs['in']
        y = self.gain * x
        self.record(input=x, output=y)
        self.emit(ticks + self.lookahead_ticks, 'out', y)


class ConstantUnit(SampledUnit):
    output_ports = {'value': 'value'}

    def __init__(self, dt_s, value=0., name='constant'):
        super().__init__(name, dt_s)
        self.value = value

    def sample(self, k, ticks):
        self.emit(ticks, 'value', self.value)

    def trace(self):
        return None


class LoopUnit(SampledUnit):
    """A whole PhilLoop as one unit.

    The 'disturbance' input is added to the disturbance of the loop at the
    amplifier output; 'voltage' and 'current' are emitted every sample.
    """
    input_ports = {'disturbance': 'value'}
    output_ports = {'voltage': 'value', 'current': 'value'}

    def __init__(self, loop, dt_s, duration_s, name='loop'):
        super().__init__(name, dt_s)
        self.realization = LoopRealization(loop, dt_s,
                                           _n_samples(dt_s, duration_s))
        self.fundamental_hz = loop.source.fundamental_hz
        self.diverged = False

    def sample(self, k, ticks):
        if k >= self.realization.n_samples:
            raise ValueError(f'Unit {self.name!r} was built for '
                             f'{self.realization.n_samples} samples.')
        self.realization.dist[k] += self.inputs['disturbance']
        _, status = self.realization.advance(1)
        self.diverged = self.diverged or status == 1
        out = self.realization.out
        self.emit(ticks, 'voltage', float(out[0, k]))
        self.emit(ticks, 'current', float(out[1, k]))

    def trace(self):
        return Trace(self.dt_s, self.realization.channels(),
                     fundamental_hz=self.fundamental_hz,
                     diverged=self.diverged)


class SimulatorUnit(SampledUnit):
    """Simulated side of a split loop.

    Reads the HUT current on 'current', computes the coupling voltage and
    emits it on 'command' after the amplifier delay. Records the 'command'
    and 'feedback' channels.
    """
    input_ports = {'current': 'value'}
    output_ports = {'command': 'value'}
    channels = ('command', 'feedback')

    def __init__(self, loop, dt_s, name='simulator'):
        loop._validate_parameters()
        check_delays(loop, dt_s)
        super().__init__(name, dt_s, lookahead_s=loop.amp.delay_s)
        shifts = ({} if loop.phase_advance is None
                  else loop.phase_advance.phase_shifts())
        self.amplitudes, self.omegas, self.phases = \
            loop.source.harmonic_arrays(shifts)
        self.fundamental_hz = loop.source.fundamental_hz
        self.feedback = _stepper(loop, 'simulator', dt_s)
        self.extrapolation_gain = (0. if loop.extrapolator is None
                                   else loop.extrapolator.gain(dt_s))
        self._previous = 0.

    def sample(self, k, ticks):
        t = k * self.dt_s
        e = float(np.sum(self.amplitudes *
                         np.sin(self.omegas * t + self.phases)))
        r = self.feedback.step(self.inputs['current'])
        u = r + self.extrapolation_gain * (r - self._previous)
        self._previous = r
        command = e - u
        if not np.isfinite(command):
            raise FloatingPointError(f'Unit {self.name!r}: non-finite '
                                     f'command at sample {k}.')
        self.record(command=command, feedback=u)
        self.emit(ticks + self.lookahead_ticks, 'command', command)

    def trace(self):
        trace = super().trace()
        trace.fundamental_hz = self.fundamental_hz
        return trace


class HardwareUnit(SampledUnit):
    """Power interface and HUT of a split loop.

    Applies the command read on 'command' through the amplifier to the HUT
    and emits the HUT current on 'current' after the sensor delay. Records
    the 'voltage' and 'current' channels.

    Like LoopRealization, the unit stops when the HUT voltage or the
    received command exceeds DIVERGENCE_FACTOR times the open-circuit
    amplitude: the sample is recorded, a 'diverged' log entry is written
    and nothing is computed or emitted afterwards.
    """
    input_ports = {'command': 'value'}
    output_ports = {'current': 'value'}
    channels = ('voltage', 'current')

    def __init__(self, loop, dt_s, duration_s, name='hardware'):
        loop._validate_parameters()
        check_delays(loop, dt_s)
        super().__init__(name, dt_s, lookahead_s=loop.sensor_delay_s)
        n_samples = _n_samples(dt_s, duration_s)
        self.fundamental_hz = loop.source.fundamental_hz
        self.amplifier = _stepper(loop, 'amplifier', dt_s)
        self.voltage = _stepper(loop, 'voltage', dt_s)
        self.current = _stepper(loop, 'current', dt_s)
        saturation = loop.amp.saturation_v
        self.saturation = np.inf if saturation is None else saturation
        peak = loop.source.open_circuit_amplitude
        if loop.disturbance is None:
            self.disturbance = np.zeros(n_samples)
        else:
            self.disturbance = loop.disturbance.sample(n_samples, dt_s)
            peak += loop.disturbance.peak
        self.threshold = DIVERGENCE_FACTOR * peak
        self.diverged = False

    def sample(self, k, ticks):
        if self.diverged:
            return
        command = self.inputs['command']
        a_out = self.amplifier.step(command)
        d = self.disturbance[k] if k < self.disturbance.shape[0] else 0.
        w = min(max(a_out, -self.saturation), self.saturation) + d
        v = self.voltage.step(w)
        i = self.current.step(w)
        self.record(voltage=v, current=i)
        if abs(v) > self.threshold or abs(command) > self.threshold:
            self.diverged = True
            self.log(ticks, 'diverged', f'sample={k}')
            return
        self.emit(ticks + self.lookahead_ticks, 'current', i)

    def trace(self):
        trace = super().trace()
        trace.fundamental_hz = self.fundamental_hz
        trace.diverged = self.diverged
        return trace


def split_loop(loop, dt_s, duration_s, names=('simulator', 'hardware')):
    """Cut ``loop`` at the amplifier boundary.

    Returns
    -------
    simulator : SimulatorUnit
    hardware : HardwareUnit
    """
    return (SimulatorUnit(loop, dt_s, name=names[0]),
            HardwareUnit(loop, dt_s, duration_s, name=names[1]))


def split_wiring(simulator, hardware, netem=None, netem_path='command'):
    """Wiring of a split loop, optionally through a network unit.

    Parameters
    ----------
    simulator : SimulatorUnit
    hardware : HardwareUnit
    netem : NetemUnit or None, optional(default=None)
    netem_path : {'command', 'feedback'}, optional(default='command')
        Which direction crosses the network.

    Returns
    -------
    wiring : dict
    """
    if netem_path not in ('command', 'feedback'):
        raise ValueError(f"netem_path={netem_path!r} must be 'command' or "
                         f"'feedback'.")
    command = (simulator.name, 'command')
    current = (hardware.name, 'current')
    if netem is None:
        return {(hardware.name, 'command'): command,
                (simulator.name, 'current'): current}
    if netem_path == 'command':
        return {(netem.name, 'tx'): command,
                (hardware.name, 'command'): (netem.name, 'rx'),
                (simulator.name, 'current'): current}
    return {(hardware.name, 'command'): command,
            (netem.name, 'tx'): current,
            (simulator.name, 'current'): (netem.name, 'rx')}

