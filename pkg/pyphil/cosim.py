"""
This module contains the co-simulation kernel.

A SimUnit owns its state and only moves forward when the master grants it
a time. Units exchange timestamped events through their input and output
ports; 'value' input ports latch the latest payload, 'message' input ports
receive every event. Three masters are provided:

- run_lockstep: every unit advances with a common exchange step.
- run_hub: same cadence, but the messages of a unit are routed with a
  declared lag and no time alignment.
- run_conservative: each unit is granted the time until which no event of
  its upstream peers can reach it (committed time plus lookahead).

Time is kept in integer nanosecond ticks.
"""
import heapq
from abc import ABC, abstractmethod
from collections import namedtuple, deque
from time import time

import numpy as np
from sklearn.base import BaseEstimator

from .bench import Trace
from .utils import (to_ticks, to_seconds, format_ticks, atomic_write_text,
                    write_csv, ParamsEqualityMixin)


MASTER_MODES = ('lockstep', 'hub', 'conservative')
PORT_KINDS = ('value', 'message')

Event = namedtuple('Event', ['time', 'source', 'seq', 'port', 'payload'])


class CausalityError(RuntimeError):
    """An event would reach a unit in its past."""


class DeadlockError(RuntimeError):
    """No unit can be granted any progress."""


class UnitRefusedError(RuntimeError):
    """A unit cannot be advanced with the requested step."""


class EventQueue:
    """Timestamp-ordered events, ties broken by (source, sequence number)."""

    def __init__(self):
        self._heap = []

    def __len__(self):
        return len(self._heap)

    def push(self, event):
        heapq.heappush(self._heap, event)

    def pop(self):
        if not self._heap:
            raise IndexError('pop from an empty EventQueue')
        return heapq.heappop(self._heap)

    def peek(self):
        if not self._heap:
            raise IndexError('peek into an empty EventQueue')
        return self._heap[0]


class SimUnit(ABC):
    """Base class of the co-simulation units.

    Parameters
    ----------
    name : str
        Unique identity of the unit.
    lookahead_s : float, optional(default=0.)
        Minimum delay between the time a unit has committed to and the
        timestamp of any event it emits.
    """
    input_ports = {}
    output_ports = {}

    def __init__(self, name, lookahead_s=0.):
        if not lookahead_s >= 0:
            raise ValueError(f'lookahead_s={lookahead_s} must not be '
                             f'negative.')
        self.name = name
        self.lookahead_s = lookahead_s
        self.lookahead_ticks = to_ticks(lookahead_s,
                                        name=f'{name}.lookahead_s')
        self.committed_ticks = 0
        self.inbox = EventQueue()
        self.outbox = []
        self.log_entries = []
        self._n_emitted = 0

    def __repr__(self):
        return (f"{type(self).__name__}(name={self.name!r}, "
                f"committed={format_ticks(self.committed_ticks)})")

    @property
    def committed_time_s(self):
        return to_seconds(self.committed_ticks)

    def emit(self, ticks, port, payload):
        if port not in self.output_ports:
            raise ValueError(f'Unit {self.name!r} has no output port '
                             f'{port!r}.')
        if ticks < self.committed_ticks + self.lookahead_ticks:
            raise CausalityError(
                f'Unit {self.name!r} emitted an event at '
                f'{format_ticks(ticks)} s, before its committed time '
                f'{format_ticks(self.committed_ticks)} s plus lookahead.')
        self.outbox.append(Event(ticks, self.name, self._n_emitted, port,
                                 payload))
        self._n_emitted += 1

    def log(self, ticks, action, detail=''):
        self.log_entries.append((ticks, action, detail))

    def _check_grant(self, grant_ticks):
        if grant_ticks < self.committed_ticks:
            raise CausalityError(
                f'Unit {self.name!r} committed to '
                f'{format_ticks(self.committed_ticks)} s cannot be granted '
                f'{format_ticks(grant_ticks)} s.')

    def accepts_step(self, step_ticks):
        """Whether the unit can be advanced in steps of ``step_ticks``."""
        return step_ticks > 0

    @abstractmethod
    def advance(self, grant_ticks):
        """Process everything strictly before ``grant_ticks`` and commit."""

    def trace(self):
        return None


class SampledUnit(SimUnit):
    """A unit computing one sample every ``dt_s``.

    Sample k happens at ``k * dt`` after applying every inbox event
    timestamped at or before it. Subclasses implement ``sample(k, ticks)``
    and list the recorded channels in ``channels``.
    """
    channels = ()

    def __init__(self, name, dt_s, lookahead_s=0.):
        super().__init__(name, lookahead_s=lookahead_s)
        self.dt_s = dt_s
        self.dt_ticks = to_ticks(dt_s, name=f'{name}.dt_s')
        if self.dt_ticks <= 0:
            raise ValueError(f'dt_s={dt_s} must be strictly positive.')
        self.k = 0
        self.inputs = {port: 0. for port, kind in self.input_ports.items()
                       if kind == 'value'}
        self._samples = {channel: [] for channel in self.channels}

    def accepts_step(self, step_ticks):
        return step_ticks > 0 and step_ticks % self.dt_ticks == 0

    def advance(self, grant_ticks):
        self._check_grant(grant_ticks)
        while self.k * self.dt_ticks < grant_ticks:
            ticks = self.k * self.dt_ticks
            while len(self.inbox) and self.inbox.peek().time <= ticks:
                event = self.inbox.pop()
                if self.input_ports[event.port] == 'value':
                    self.inputs[event.port] = event.payload
                else:
                    self.on_message(event)
            self.sample(self.k, ticks)
            self.k += 1
        self.committed_ticks = grant_ticks

    def on_message(self, event):
        self.inputs[event.port] = event.payload

    @abstractmethod
    def sample(self, k, ticks):
        """Compute sample ``k`` at time ``ticks``."""

    def record(self, **values):
        for channel, value in values.items():
            self._samples[channel].append(value)

    def trace(self):
        channels = {channel: np.array(values, dtype=np.float64)
                    for channel, values in self._samples.items()}
        return Trace(self.dt_s, channels)


class MasterConfig(ParamsEqualityMixin, BaseEstimator):
    """Co-simulation master settings.

    Parameters
    ----------
    mode : {'lockstep', 'hub', 'conservative'}, optional(default='lockstep')
    end_time_s : float, optional(default=1.)
    dt_s : float or None, optional(default=None)
        Exchange step, required by 'lockstep' and 'hub'.
    wiring : dict or None, optional(default=None)
        ``(target unit, input port) -> (source unit, output port)``.
    lags : dict or None, optional(default=None)
        ``unit -> number of exchange steps`` its messages are held by the
        hub. Units not listed have no lag.
    """
    def __init__(self, mode='lockstep', end_time_s=1., dt_s=None,
                 wiring=None, lags=None):
        self.mode = mode
        self.end_time_s = end_time_s
        self.dt_s = dt_s
        self.wiring = wiring
        self.lags = lags

    def _validate_parameters(self):
        if self.mode not in MASTER_MODES:
            raise ValueError(f'mode={self.mode!r} is not supported. Accepted '
                             f'modes are {", ".join(MASTER_MODES)}.')
        if not self.end_time_s > 0:
            raise ValueError(f'end_time_s={self.end_time_s} must be strictly '
                             f'positive.')
        if self.mode in ('lockstep', 'hub') and not (
                self.dt_s is not None and self.dt_s > 0):
            raise ValueError(f'dt_s={self.dt_s} must be strictly positive '
                             f'for the {self.mode} master.')
        for name, lag in (self.lags or {}).items():
            if int(lag) != lag or lag < 0:
                raise ValueError(f'lag of unit {name!r}={lag} must be a '
                                 f'nonnegative integer number of steps.')


class MasterLog:
    """Audit log: one tab separated line per master action."""

    def __init__(self):
        self.lines = []

    def __len__(self):
        return len(self.lines)

    def append(self, ticks, unit, action, detail=''):
        self.lines.append(f'{format_ticks(ticks)}\t{unit}\t{action}\t'
                          f'{detail}')

    def extend_from(self, unit):
        for ticks, action, detail in unit.log_entries:
            self.append(ticks, unit.name, action, detail)
        unit.log_entries = []

    def text(self):
        return ''.join(line + '\n' for line in self.lines)

    def write(self, path):
        return atomic_write_text(path, self.text())


class CosimResult:
    """Outcome of a master run.

    Attributes
    ----------
    traces : dict
        ``unit name -> trace`` for every unit recording one.
    log : MasterLog
    grant_counts : dict
        ``unit name -> number of grants``.
    skew : dict or None
        Hub runs only: ``unit name -> (n_messages, max_skew_s,
        mean_skew_s)``.
    """
    def __init__(self, traces, log, grant_counts, skew=None):
        self.traces = traces
        self.log = log
        self.grant_counts = grant_counts
        self.skew = skew

    @property
    def diverged(self):
        """True if any unit stopped on its divergence check."""
        return any(getattr(trace, 'diverged', False)
                   for trace in self.traces.values())

    def skew_to_csv(self, path):
        rows = [(name,) + tuple(values)
                for name, values in sorted((self.skew or {}).items())]
        return write_csv(path, ['unit', 'n_messages', 'max_skew_s',
                                'mean_skew_s'], rows)


def validate_wiring(units, wiring):
    """Check a wiring map against the units and return its routes.

    Every input port must be wired to exactly one existing output port.

    Returns
    -------
    routes : dict
        ``(source unit, output port) -> sorted list of (target unit, input
        port)``.
    """
    wiring = wiring or {}
    by_name = {}
    for unit in units:
        if unit.name in by_name:
            raise ValueError(f'Duplicate unit name {unit.name!r}.')
        by_name[unit.name] = unit
    for unit in units:
        for port, kind in unit.input_ports.items():
            if kind not in PORT_KINDS:
                raise ValueError(f'Port {unit.name}.{port} has unknown kind '
                                 f'{kind!r}.')
    routes = {}
    for (target, in_port), (source, out_port) in wiring.items():
        for name in (target, source):
            if name not in by_name:
                raise ValueError(f'Wiring references unknown unit '
                                 f'{name!r}.')
        if in_port not in by_name[target].input_ports:
            raise ValueError(f'Wiring references unknown input port '
                             f'{target}.{in_port}.')
        if out_port not in by_name[source].output_ports:
            raise ValueError(f'Wiring references unknown output port '
                             f'{source}.{out_port}.')
        routes.setdefault((source, out_port), []).append((target, in_port))
    for unit in units:
        for port in unit.input_ports:
            if (unit.name, port) not in wiring:
                raise ValueError(f'Input port {unit.name}.{port} is not '
                                 f'wired.')
    return {key: sorted(targets) for key, targets in routes.items()}


def _route(event, routes, by_name, check_causality):
    """Push ``event`` into every inbox wired to its output port."""
    n_delivered = 0
    for target, in_port in routes.get((event.source, event.port), ()):
        unit = by_name[target]
        if check_causality and event.time < unit.committed_ticks:
            raise CausalityError(
                f'Event from {event.source!r} at {format_ticks(event.time)} '
                f's reached {target!r} committed to '
                f'{format_ticks(unit.committed_ticks)} s.')
        unit.inbox.push(Event(event.time, event.source, event.seq, in_port,
                              event.payload))
        n_delivered += 1
    return n_delivered


def _run_stepped(units, config, lags, action):
    routes = validate_wiring(units, config.wiring)
    by_name = {unit.name: unit for unit in units}
    names = sorted(by_name)
    for name in lags:
        if name not in by_name:
            raise ValueError(f'Lag declared for unknown unit {name!r}.')
    dt_ticks = to_ticks(config.dt_s, name='dt_s')
    end_ticks = to_ticks(config.end_time_s, name='end_time_s')
    for name in names:
        if not by_name[name].accepts_step(dt_ticks):
            raise UnitRefusedError(
                f'Unit {name!r} refuses the exchange step '
                f'dt={config.dt_s!r} s.')
    log = MasterLog()
    grant_counts = {name: 0 for name in names}
    held = {name: deque() for name in names}
    skew = {name: [] for name in names}
    k = 0
    while k * dt_ticks < end_ticks:
        now = k * dt_ticks
        for name in names:
            unit = by_name[name]
            lag = int(lags.get(name, 0))
            for event in unit.outbox:
                held[name].append((k + lag, event._replace(
                    time=event.time + lag * dt_ticks)))
                skew[name].append(lag * dt_ticks)
            unit.outbox = []
        inbound = {name: 0 for name in names}
        for name in names:
            while held[name] and held[name][0][0] <= k:
                _, event = held[name].popleft()
                for target, _ in routes.get((event.source, event.port), ()):
                    inbound[target] += 1
                _route(event, routes, by_name, check_causality=False)
        grant = min((k + 1) * dt_ticks, end_ticks)
        for name in names:
            log.append(now, name, action, f'events={inbound[name]}')
        for name in names:
            unit = by_name[name]
            unit.advance(grant)
            grant_counts[name] += 1
            log.append(now, name, 'grant', f'until={format_ticks(grant)}')
            log.extend_from(unit)
        k += 1
    traces = _collect_traces(by_name)
    skew_report = {name: (len(values),
                          to_seconds(max(values)) if values else 0.,
                          to_seconds(float(np.mean(values))) if values
                          else 0.)
                   for name, values in skew.items()}
    return CosimResult(traces, log, grant_counts, skew_report)


def run_lockstep(units, config, verbose=0):
    """Fixed-step master.

    At each step k the master delivers every pending event, then advances
    every unit to (k + 1) dt. An event emitted during step k is seen by its
    target from step k + 1 on, so a zero-delay exchange costs one step.

    Parameters
    ----------
    units : list of SimUnit
    config : MasterConfig
    verbose : int, optional(default=0)

    Returns
    -------
    result : CosimResult
    """
    config._validate_parameters()
    if not units:
        return CosimResult({}, MasterLog(), {})
    tic = time()
    result = _run_stepped(units, config, lags={}, action='exchange')
    result.skew = None
    if verbose:
        print(f"Lockstep run of {len(units)} units in {time() - tic:.3f} s",
              flush=True)
    return result


def run_hub(units, config, verbose=0):
    """Message hub master with declared per-unit lags.

    The messages a unit emits during step k are routed at step k + lag and
    re-stamped lag steps later; the skew report holds the resulting
    timestamp mismatch per source unit. With every lag at 0 the run is
    identical to run_lockstep.
    """
    config._validate_parameters()
    if not units:
        return CosimResult({}, MasterLog(), {}, skew={})
    tic = time()
    result = _run_stepped(units, config, lags=dict(config.lags or {}),
                          action='route')
    if verbose:
        max_skew = max(values[1] for values in result.skew.values())
        print(f"Hub run of {len(units)} units in {time() - tic:.3f} s, "
              f"max skew {max_skew!r} s", flush=True)
    return result


def _collect_traces(by_name):
    traces = {}
    for name in sorted(by_name):
        trace = by_name[name].trace()
        if trace is not None:
            traces[name] = trace
    return traces


def _upstream(units, wiring):
    upstream = {unit.name: set() for unit in units}
    for (target, _), (source, _) in (wiring or {}).items():
        if source != target:
            upstream[target].add(source)
    return {name: sorted(peers) for name, peers in upstream.items()}


def _zero_lookahead_cycle(by_name, upstream, stuck):
    """Find a cycle of zero-lookahead links among the stuck units."""
    def successors(name):
        return [target for target in sorted(stuck)
                if name in upstream[target] and
                by_name[name].lookahead_ticks == 0]

    state = {}

    def visit(name, path):
        state[name] = 'open'
        path.append(name)
        for nxt in successors(name):
            if state.get(nxt) == 'open':
                return path[path.index(nxt):] + [nxt]
            if nxt not in state:
                cycle = visit(nxt, path)
                if cycle:
                    return cycle
        path.pop()
        state[name] = 'done'
        return None

    for name in sorted(stuck):
        if name not in state:
            cycle = visit(name, [])
            if cycle:
                return cycle
    return None


def run_conservative(units, config, poll_order=None, verbose=0):
    """Conservative master: grants that no upstream event can invalidate.

    In every round each unit is granted ``min(end, min over its upstream
    peers of committed + lookahead)``, all grants being computed from the
    committed times at the start of the round. Events are delivered after
    all units have advanced, so the results do not depend on the order the
    units are polled in.

    Parameters
    ----------
    units : list of SimUnit
    config : MasterConfig
    poll_order : list of str or None, optional(default=None)
        Order in which the units are advanced within a round. Defaults to
        the sorted names.
    verbose : int, optional(default=0)

    Returns
    -------
    result : CosimResult
    """
    config._validate_parameters()
    if not units:
        return CosimResult({}, MasterLog(), {})
    routes = validate_wiring(units, config.wiring)
    by_name = {unit.name: unit for unit in units}
    names = sorted(by_name)
    if poll_order is None:
        poll_order = names
    elif sorted(poll_order) != names:
        raise ValueError(f'poll_order={list(poll_order)} must be a '
                         f'permutation of the unit names {names}.')
    upstream = _upstream(units, config.wiring)
    end_ticks = to_ticks(config.end_time_s, name='end_time_s')
    log = MasterLog()
    grant_counts = {name: 0 for name in names}
    tic = time()
    n_rounds = 0
    while any(by_name[name].committed_ticks < end_ticks for name in names):
        committed = {name: by_name[name].committed_ticks for name in names}
        grants = {}
        for name in poll_order:
            peers = upstream[name]
            if peers:
                horizon = min(committed[p] + by_name[p].lookahead_ticks
                              for p in peers)
                grants[name] = min(end_ticks, horizon)
            else:
                grants[name] = end_ticks
        moving = [name for name in poll_order
                  if grants[name] > committed[name]]
        if not moving:
            stuck = [name for name in names if committed[name] < end_ticks]
            cycle = _zero_lookahead_cycle(by_name, upstream, stuck)
            if cycle:
                raise DeadlockError(f'Deadlock on the zero-lookahead cycle '
                                    f'{" -> ".join(cycle)}.')
            raise DeadlockError(f'Deadlock: units {stuck} cannot progress.')
        for name in moving:
            by_name[name].advance(grants[name])
            grant_counts[name] += 1
        for name in sorted(moving):
            log.append(committed[name], name, 'grant',
                       f'until={format_ticks(grants[name])}')
            log.extend_from(by_name[name])
        for name in names:
            unit = by_name[name]
            for event in unit.outbox:
                _route(event, routes, by_name, check_causality=True)
            unit.outbox = []
        n_rounds += 1
    if verbose:
        print(f"Conservative run of {len(units)} units: {n_rounds} rounds "
              f"in {time() - tic:.3f} s", flush=True)
    traces = _collect_traces(by_name)
    return CosimResult(traces, log, grant_counts)


def run_master(units, config, poll_order=None, verbose=0):
    """Dispatch to the master selected by ``config.mode``."""
    config._validate_parameters()
    if config.mode == 'lockstep':
        return run_lockstep(units, config, verbose=verbose)
    if config.mode == 'hub':
        return run_hub(units, config, verbose=verbose)
    return run_conservative(units, config, poll_order=poll_order,
                            verbose=verbose)
