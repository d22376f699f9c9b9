"""
This module contains the scenario files of the command line front end.

A scenario is an INI document. Every key is the name of a model parameter;
numeric values may carry a unit token of the dimension of the parameter
(``delay_s = 1 ms``, ``bandwidth_hz = 5 kHz``). Unknown sections, unknown
keys and units of the wrong dimension are errors. All errors are collected
and reported together with their line numbers.
"""
import configparser
import re

import numpy as np
from sklearn.base import BaseEstimator, clone

from .bench import (PhilLoop, SimulatedSide, AmplifierModel, HutModel,
                    ImpedanceModel, Disturbance)
from .compensation import (Extrapolator, design_phase_advance,
                           apply_phase_advance, apply_extrapolator)
from .cosim import MasterConfig
from .netem import NetworkSpec
from .stability import UncertaintyMargin
from .utils import delay_samples, check_seed, ParamsEqualityMixin


UNITS = {
    'time': {'s': 1., 'ms': 1e-3, 'us': 1e-6, 'ns': 1e-9},
    'frequency': {'Hz': 1., 'kHz': 1e3, 'MHz': 1e6},
    'resistance': {'ohm': 1., 'mohm': 1e-3, 'kohm': 1e3},
    'inductance': {'H': 1., 'mH': 1e-3, 'uH': 1e-6},
    'capacitance': {'F': 1., 'mF': 1e-3, 'uF': 1e-6, 'nF': 1e-9},
    'voltage': {'V': 1., 'mV': 1e-3, 'kV': 1e3},
    'dimensionless': {},
}

# section -> key -> value type
SCHEMA = {
    'scenario': {'name': 'text', 'seed': 'seed', 'output_dir': 'text'},
    'source': {'fundamental_hz': 'frequency', 'harmonics': 'harmonics',
               'impedance_kind': 'text', 'resistance_ohm': 'resistance',
               'inductance_h': 'inductance', 'capacitance_f': 'capacitance'},
    'loop': {'interface': 'text', 'cutoff_hz': 'frequency',
             'z_shift_ohm': 'resistance', 'sensor_delay_s': 'time',
             'dt_s': 'time', 'duration_s': 'time'},
    'amplifier': {'gain': 'dimensionless', 'bandwidth_hz': 'frequency',
                  'delay_s': 'time', 'saturation_v': 'voltage'},
    'hut': {'kind': 'text', 'resistance_ohm': 'resistance',
            'inductance_h': 'inductance', 'capacitance_f': 'capacitance'},
    'disturbance': {'kind': 'text', 'amplitude_v': 'voltage',
                    'frequency_hz': 'frequency', 'start_s': 'time'},
    'stability': {'epsilon': 'dimensionless',
                  'ratios': 'grid:dimensionless', 'delays_s': 'grid:time'},
    'compensation': {'phase_advance': 'boolean',
                     'extrapolator_order': 'integer'},
    'cosim': {'master': 'text', 'end_time_s': 'time', 'dt_s': 'time',
              'lags': 'lags', 'netem_path': 'text', 'wiring': 'wiring'},
    'netem': {'base_latency_s': 'time', 'jitter_s': 'time',
              'loss_probability': 'dimensionless', 'seed': 'seed'},
}

# Ports of the units a scenario builds in cosim mode.
COSIM_PORTS = {
    'simulator': ({'current'}, {'command'}),
    'hardware': ({'command'}, {'current'}),
    'netem': ({'tx'}, {'rx'}),
}

DEFAULT_RATIOS = tuple(np.linspace(0.1, 2.0, 21).tolist())
DEFAULT_DELAYS_S = tuple(np.linspace(1e-4, 5e-3, 21).tolist())

_QUANTITY = re.compile(r'^([-+]?(?:inf|(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?))'
                       r'\s*([A-Za-z]*)$')
_SECTION_LINE = re.compile(r'^\[([^\]]*)\]')
_KEY_LINE = re.compile(r'^([^=:\s#;][^=:]*?)\s*[=:]')


class ScenarioError(ValueError):
    """Invalid scenario. ``errors`` holds (line number, message) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__('\n'.join(
            f'line {line}: {message}' if line else message
            for line, message in self.errors))


class Scenario(ParamsEqualityMixin, BaseEstimator):
    """A validated scenario.

    Parameters
    ----------
    name : str, optional(default='scenario')
    seed : int, optional(default=0)
        Master seed: white-noise disturbance and network links without an
        explicit seed.
    output_dir : str, optional(default='.')
    loop : PhilLoop or None, optional(default=None)
        The uncompensated loop.
    epsilon : float, optional(default=0.)
    dt_s : float, optional(default=1e-5)
    duration_s : float, optional(default=0.2)
    ratios : tuple of float, optional(default=DEFAULT_RATIOS)
        Sweep grid of R_s / R_hut.
    delays_s : tuple of float, optional(default=DEFAULT_DELAYS_S)
        Sweep grid of total loop delays.
    phase_advance : bool, optional(default=False)
    extrapolator_order : int or None, optional(default=None)
    master : str, optional(default='lockstep')
    end_time_s : float or None, optional(default=None)
        Defaults to duration_s.
    cosim_dt_s : float or None, optional(default=None)
        Exchange step, defaults to dt_s.
    lags : dict or None, optional(default=None)
    netem : NetworkSpec or None, optional(default=None)
        A seed of None means the scenario seed.
    netem_path : {'command', 'feedback'}, optional(default='command')
    wiring : dict or None, optional(default=None)
        Explicit cosim wiring, defaults to the split loop wiring.
    """
    def __init__(self, name='scenario', seed=0, output_dir='.', loop=None,
                 epsilon=0., dt_s=1e-5, duration_s=0.2,
                 ratios=DEFAULT_RATIOS, delays_s=DEFAULT_DELAYS_S,
                 phase_advance=False, extrapolator_order=None,
                 master='lockstep', end_time_s=None, cosim_dt_s=None,
                 lags=None, netem=None, netem_path='command', wiring=None):
        self.name = name
        self.seed = seed
        self.output_dir = output_dir
        self.loop = loop
        self.epsilon = epsilon
        self.dt_s = dt_s
        self.duration_s = duration_s
        self.ratios = ratios
        self.delays_s = delays_s
        self.phase_advance = phase_advance
        self.extrapolator_order = extrapolator_order
        self.master = master
        self.end_time_s = end_time_s
        self.cosim_dt_s = cosim_dt_s
        self.lags = lags
        self.netem = netem
        self.netem_path = netem_path
        self.wiring = wiring

    @property
    def base_loop(self):
        return PhilLoop() if self.loop is None else self.loop

    def margin(self):
        return UncertaintyMargin(self.epsilon)

    def seeded_loop(self):
        """The uncompensated loop with the white noise seeded."""
        loop = clone(self.base_loop)
        if loop.disturbance is not None:
            loop.disturbance.set_params(random_state=self.seed)
        return loop

    def compensated_loop(self):
        """The loop with the selected compensation applied."""
        loop = self.seeded_loop()
        if self.phase_advance:
            plan = design_phase_advance(loop.source.fundamental_hz,
                                        loop.source.orders,
                                        loop.total_delay_s)
            loop = apply_phase_advance(loop, plan)
        if self.extrapolator_order is not None:
            loop = apply_extrapolator(
                loop, Extrapolator(self.extrapolator_order,
                                   loop.total_delay_s))
        return loop

    def network_spec(self):
        if self.netem is None:
            return None
        if self.netem.seed is None:
            return clone(self.netem).set_params(seed=self.seed)
        return self.netem

    def master_config(self, wiring):
        return MasterConfig(
            mode=self.master,
            end_time_s=(self.duration_s if self.end_time_s is None
                        else self.end_time_s),
            dt_s=self.dt_s if self.cosim_dt_s is None else self.cosim_dt_s,
            wiring=wiring if self.wiring is None else self.wiring,
            lags=self.lags)


def _line_index(text):
    """Map section names and (section, key) pairs to their line numbers."""
    index = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line[0].isspace():
            continue
        match = _SECTION_LINE.match(line)
        if match:
            section = match.group(1).strip()
            index.setdefault(section, lineno)
            continue
        match = _KEY_LINE.match(line)
        if match and section is not None:
            index.setdefault((section, match.group(1).strip()), lineno)
    return index


def parse_quantity(text, dimension):
    """Parse ``'<number> [unit]'`` into SI units.

    Raises
    ------
    ValueError
        If the unit is unknown or of another dimension.
    """
    match = _QUANTITY.match(text.strip())
    if not match:
        raise ValueError(f'{text!r} is not a number')
    value = float(match.group(1))
    unit = match.group(2)
    if not unit:
        return value
    if unit in UNITS[dimension]:
        return value * UNITS[dimension][unit]
    for other, table in UNITS.items():
        if unit in table:
            raise ValueError(f'expected a {dimension} value, got unit '
                             f'{unit!r} ({other})')
    raise ValueError(f'unknown unit {unit!r}, expected a {dimension} value')


def _parse_grid(text, dimension):
    if text.count(':') == 2 and ',' not in text:
        start, stop, num = text.split(':')
        num = int(num)
        if num < 1:
            raise ValueError(f'grid {text!r} needs at least one point')
        return tuple(np.linspace(parse_quantity(start, dimension),
                                 parse_quantity(stop, dimension),
                                 num).tolist())
    values = tuple(parse_quantity(item, dimension)
                   for item in text.split(',') if item.strip())
    if not values:
        raise ValueError('grid must not be empty')
    return values


def _parse_harmonics(text):
    harmonics = []
    for item in text.split(','):
        if not item.strip():
            continue
        parts = item.split(':')
        if len(parts) != 3:
            raise ValueError(f'harmonic {item.strip()!r} must be written '
                             f'order:amplitude:phase_rad')
        harmonics.append((int(parts[0]), parse_quantity(parts[1], 'voltage'),
                          parse_quantity(parts[2], 'dimensionless')))
    return tuple(harmonics)


def _parse_lags(text):
    lags = {}
    for item in text.split(','):
        if not item.strip():
            continue
        unit, _, lag = item.partition(':')
        lags[unit.strip()] = int(lag)
    return lags


def _parse_wiring(text):
    wiring = {}
    for item in text.split(','):
        if not item.strip():
            continue
        target, arrow, source = item.partition('<-')
        if not arrow:
            raise ValueError(f'connection {item.strip()!r} must be written '
                             f'unit.port <- unit.port')
        endpoints = []
        for endpoint in (target, source):
            unit, dot, port = endpoint.strip().partition('.')
            if not dot:
                raise ValueError(f'endpoint {endpoint.strip()!r} must be '
                                 f'written unit.port')
            endpoints.append((unit, port))
        if endpoints[0] in wiring:
            raise ValueError(f'input {".".join(endpoints[0])} is wired '
                             f'twice')
        wiring[endpoints[0]] = endpoints[1]
    return wiring


def _parse_value(text, kind):
    text = text.strip()
    if kind == 'text':
        return text
    if kind == 'boolean':
        lowered = text.lower()
        if lowered not in configparser.RawConfigParser.BOOLEAN_STATES:
            raise ValueError(f'{text!r} is not a boolean')
        return configparser.RawConfigParser.BOOLEAN_STATES[lowered]
    if kind == 'integer':
        if text.lower() == 'none':
            return None
        return int(text)
    if kind == 'seed':
        return check_seed(int(text))
    if kind == 'harmonics':
        return _parse_harmonics(text)
    if kind == 'lags':
        return _parse_lags(text)
    if kind == 'wiring':
        return _parse_wiring(text)
    if kind.startswith('grid:'):
        return _parse_grid(text, kind[len('grid:'):])
    if text.lower() == 'none':
        return None
    return parse_quantity(text, kind)


def _read(text):
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, comment_prefixes=('#', ';'),
        inline_comment_prefixes=('#', ';'), default_section='__defaults__')
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ScenarioError([(e.lineno, f'key {e.line.strip()!r} outside '
                                        f'of any section')])
    except configparser.ParsingError as e:
        raise ScenarioError([(lineno, f'cannot parse {line!r}')
                             for lineno, line in e.errors])
    except configparser.Error as e:
        raise ScenarioError([(getattr(e, 'lineno', None), e.message)])
    return parser


def parse_scenario(text):
    """Parse and validate a scenario document.

    Parameters
    ----------
    text : str

    Returns
    -------
    scenario : Scenario

    Raises
    ------
    ScenarioError
        Listing every problem found, with line numbers.
    """
    parser = _read(text)
    lines = _line_index(text)
    errors = []
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append((lines.get(section),
                           f'unknown section [{section}]'))
            continue
        values[section] = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                errors.append((line, f'unknown key {key!r} in '
                                     f'[{section}]'))
                continue
            try:
                values[section][key] = _parse_value(raw,
                                                    SCHEMA[section][key])
            except ValueError as e:
                errors.append((line, f'{section}.{key}: {e}'))
    if errors:
        raise ScenarioError(errors)

    def build(section, factory, **params):
        try:
            obj = factory(**params)
            obj._validate_parameters()
            return obj
        except (ValueError, TypeError) as e:
            errors.append((lines.get(section), f'[{section}] {e}'))
            return None

    source = dict(values.get('source', {}))
    impedance = build('source', ImpedanceModel,
                      kind=source.pop('impedance_kind', 'resistive'),
                      **{key: source.pop(key) for key in
                         ('resistance_ohm', 'inductance_h', 'capacitance_f')
                         if key in source})
    simulated_side = build('source', SimulatedSide,
                           source_impedance=impedance, **source)
    amplifier = build('amplifier', AmplifierModel,
                      **values.get('amplifier', {}))
    hut = build('hut', HutModel, **values.get('hut', {}))
    disturbance = None
    if 'disturbance' in values:
        disturbance = build('disturbance', Disturbance,
                            **values['disturbance'])

    loop_values = dict(values.get('loop', {}))
    run_values = {key: loop_values.pop(key) for key in ('dt_s', 'duration_s')
                  if key in loop_values}
    loop = None
    if None not in (simulated_side, amplifier, hut):
        loop = build('loop', PhilLoop, simulated_side=simulated_side,
                     amplifier=amplifier, hut=hut, disturbance=disturbance,
                     **loop_values)

    scenario_values = dict(values.get('scenario', {}))
    stability = values.get('stability', {})
    compensation = values.get('compensation', {})
    cosim = dict(values.get('cosim', {}))
    netem = None
    if 'netem' in values:
        netem_values = dict(values['netem'])
        netem = NetworkSpec(**netem_values)
        if 'seed' not in netem_values:
            netem.seed = None
    scenario = Scenario(
        loop=loop,
        epsilon=stability.get('epsilon', 0.),
        ratios=stability.get('ratios', DEFAULT_RATIOS),
        delays_s=stability.get('delays_s', DEFAULT_DELAYS_S),
        phase_advance=compensation.get('phase_advance', False),
        extrapolator_order=compensation.get('extrapolator_order'),
        master=cosim.get('master', 'lockstep'),
        end_time_s=cosim.get('end_time_s'),
        cosim_dt_s=cosim.get('dt_s'),
        lags=cosim.get('lags'),
        netem=netem,
        netem_path=cosim.get('netem_path', 'command'),
        wiring=cosim.get('wiring'),
        **run_values, **scenario_values)
    errors.extend(_check_scenario(scenario, lines))
    if errors:
        raise ScenarioError(sorted(errors, key=lambda e: e[0] or 0))
    return scenario


def _check_scenario(scenario, lines):
    """Cross-section invariants of a scenario built from valid sections."""
    errors = []

    def check(key, condition, message):
        if not condition:
            errors.append((lines.get(key), message))

    check(('stability', 'epsilon'),
          np.isfinite(scenario.epsilon) and scenario.epsilon >= 0,
          f'stability.epsilon={scenario.epsilon} violates the constraint '
          f'epsilon >= 0')
    check(('loop', 'dt_s'), scenario.dt_s > 0,
          f'loop.dt_s={scenario.dt_s} must be strictly positive')
    check(('loop', 'duration_s'), scenario.duration_s > 0,
          f'loop.duration_s={scenario.duration_s} must be strictly positive')
    check(('stability', 'ratios'), all(r > 0 for r in scenario.ratios),
          'stability.ratios must be strictly positive')
    check(('stability', 'delays_s'), all(d >= 0 for d in scenario.delays_s),
          'stability.delays_s must not be negative')
    order = scenario.extrapolator_order
    check(('compensation', 'extrapolator_order'), order in (None, 0, 1),
          f'compensation.extrapolator_order={order} is not supported, order '
          f'must be 0 or 1')
    check(('cosim', 'netem_path'),
          scenario.netem_path in ('command', 'feedback'),
          f"cosim.netem_path={scenario.netem_path!r} must be 'command' or "
          f"'feedback'")
    for name, lag in (scenario.lags or {}).items():
        check(('cosim', 'lags'), lag >= 0 and name in COSIM_PORTS,
              f'cosim.lags: {name}:{lag} must name a cosim unit with a '
              f'nonnegative lag')
    units = {'simulator', 'hardware'}
    if scenario.netem is not None:
        units.add('netem')
    for (target, in_port), (source, out_port) in (
            scenario.wiring or {}).items():
        for unit, port, idx in ((target, in_port, 0),
                                (source, out_port, 1)):
            check(('cosim', 'wiring'),
                  unit in units and port in COSIM_PORTS[unit][idx],
                  f'cosim.wiring references unknown port {unit}.{port}')
    if scenario.netem is not None:
        try:
            scenario.network_spec()._validate_parameters()
            if not scenario.netem.lookahead_s > 0:
                raise ValueError('base_latency_s - jitter_s must be strictly '
                                 'positive')
        except ValueError as e:
            errors.append((lines.get('netem'), f'[netem] {e}'))
    try:
        scenario.master_config({})._validate_parameters()
    except ValueError as e:
        errors.append((lines.get('cosim'), f'[cosim] {e}'))

    if scenario.loop is not None and scenario.dt_s > 0:
        loop = scenario.loop
        for key, delay in ((('amplifier', 'delay_s'), loop.amp.delay_s),
                           (('loop', 'sensor_delay_s'),
                            loop.sensor_delay_s)):
            try:
                delay_samples(delay, scenario.dt_s,
                              name=f'{key[0]}.{key[1]}')
            except ValueError as e:
                errors.append((lines.get(key) or lines.get(('loop', 'dt_s')),
                               str(e)))
    return errors


def load_scenario(path):
    with open(path) as f:
        return parse_scenario(f.read())


def _format(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_scenario(scenario):
    """Write a scenario back to text, floats with full precision.

    ``parse_scenario(serialize_scenario(s)) == s`` for every parsed
    scenario.
    """
    loop = scenario.base_loop
    source = loop.source
    impedance = source.impedance_model
    sections = [
        ('scenario', {'name': scenario.name, 'seed': scenario.seed,
                      'output_dir': scenario.output_dir}),
        ('source', {
            'fundamental_hz': source.fundamental_hz,
            'harmonics': ', '.join(f'{int(h)}:{float(a)!r}:{float(p)!r}'
                                   for h, a, p in source.harmonics),
            'impedance_kind': impedance.kind,
            'resistance_ohm': impedance.resistance_ohm,
            'inductance_h': impedance.inductance_h,
            'capacitance_f': impedance.capacitance_f}),
        ('loop', {'interface': loop.interface, 'cutoff_hz': loop.cutoff_hz,
                  'z_shift_ohm': loop.z_shift_ohm,
                  'sensor_delay_s': loop.sensor_delay_s,
                  'dt_s': scenario.dt_s, 'duration_s': scenario.duration_s}),
        ('amplifier', loop.amp.get_params()),
        ('hut', loop.load.get_params()),
    ]
    if loop.disturbance is not None:
        params = loop.disturbance.get_params()
        params.pop('random_state')
        sections.append(('disturbance', params))
    sections += [
        ('stability', {
            'epsilon': scenario.epsilon,
            'ratios': ', '.join(repr(float(r)) for r in scenario.ratios),
            'delays_s': ', '.join(repr(float(d))
                                  for d in scenario.delays_s)}),
        ('compensation', {
            'phase_advance': bool(scenario.phase_advance),
            'extrapolator_order': scenario.extrapolator_order}),
        ('cosim', {
            'master': scenario.master, 'end_time_s': scenario.end_time_s,
            'dt_s': scenario.cosim_dt_s,
            'lags': (', '.join(f'{name}:{lag}' for name, lag
                               in sorted(scenario.lags.items()))
                     if scenario.lags else None),
            'netem_path': scenario.netem_path,
            'wiring': (', '.join(f'{t}.{tp} <- {s}.{sp}' for (t, tp), (s, sp)
                                 in sorted(scenario.wiring.items()))
                       if scenario.wiring else None)}),
    ]
    if scenario.netem is not None:
        sections.append(('netem', scenario.netem.get_params()))
    out = []
    for section, params in sections:
        out.append(f'[{section}]\n')
        for key, value in params.items():
            if value is not None:
                out.append(f'{key} = {_format(value)}\n')
        out.append('\n')
    return ''.join(out)
