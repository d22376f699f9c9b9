import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from pyphil.bench import (ImpedanceModel, HutModel, AmplifierModel,
                          SimulatedSide, Disturbance, PhilLoop, Trace)
from pyphil.bench import (build_loop, run_time_domain, reference_direct,
                          accuracy_metrics, power_exchange, check_delays,
                          steady_state_window, LoopRealization)
from pyphil.compensation import design_feedback_filter
from pyphil.lti import TransferBlock, evaluate, series
from pyphil.stability import UncertaintyMargin, classify
from pyphil.utils import read_csv, write_csv


HARMONICS = ((1, 1., 0.), (5, 0.2, 0.), (7, 0.1, 0.))


def _make_loop(rs=1e-6, rh=1., amp_delay=1e-3, sensor_delay=0.,
               harmonics=HARMONICS, **kwargs):
    return PhilLoop(
        simulated_side=SimulatedSide(
            harmonics=harmonics,
            source_impedance=ImpedanceModel(resistance_ohm=rs)),
        amplifier=AmplifierModel(delay_s=amp_delay),
        hut=HutModel(resistance_ohm=rh),
        sensor_delay_s=sensor_delay, **kwargs)


@pytest.mark.parametrize('harmonic, expected_deg', [
    (1, 18.),
    (5, 90.),
    (7, 126.),
])
def test_itm_phase_error_is_delay(harmonic, expected_deg):
    # With a negligible source impedance the coupling voltage is the source
    # delayed by the amplifier.
    loop = _make_loop()
    trace = run_time_domain(loop, 1e-5, 0.2)
    reference = reference_direct(loop, 1e-5, 0.2)
    assert not trace.diverged
    report = accuracy_metrics(trace, reference, [1, 5, 7])
    assert report.phase_error(harmonic) == pytest.approx(expected_deg,
                                                         abs=0.05)
    assert np.all(np.abs(report.magnitude_error) < 1e-3)


def test_itm_matches_delay_equation():
    # v[k] = e[k - n] - (Rs / Rh) v[k - n] in steady state.
    dt = 1e-5
    delay = 1e-4
    loop = _make_loop(rs=0.5, amp_delay=delay, harmonics=((1, 1., 0.),))
    trace = run_time_domain(loop, dt, 0.2)
    reference = reference_direct(loop, dt, 0.2)
    report = accuracy_metrics(trace, reference, [1])

    theta = 2 * np.pi * 50 * delay
    ratio = 1.5 * np.exp(-1j * theta) / (1 + 0.5 * np.exp(-1j * theta))
    assert report.magnitude_error[0] == pytest.approx(abs(ratio) - 1,
                                                      abs=1e-6)
    assert report.phase_error(1) == pytest.approx(
        -np.degrees(np.angle(ratio)), abs=1e-3)


def test_reference_direct_resistive_divider():
    loop = _make_loop(rs=1., rh=1.)
    reference = reference_direct(loop, 1e-5, 0.02)
    e = loop.source.source_signal(reference.n_samples, 1e-5)
    assert_allclose(reference['voltage'], 0.5 * e, rtol=1e-12, atol=1e-15)
    assert_allclose(reference['current'], 0.5 * e, rtol=1e-12, atol=1e-15)
    assert_allclose(reference['feedback'], 0.5 * e, rtol=1e-12, atol=1e-15)
    assert not reference.diverged


def test_unstable_loop_diverges():
    loop = _make_loop(rs=2., amp_delay=1e-3)
    trace = run_time_domain(loop, 1e-5, 0.2)
    assert trace.diverged
    assert trace.n_samples < 20000
    peak = max(np.max(np.abs(trace['voltage'])),
               np.max(np.abs(trace['command'])))
    assert peak > 10 * loop.source.open_circuit_amplitude


def test_shifting_impedance_cancels_feedback():
    loop = _make_loop(rs=0.5, harmonics=((1, 1., 0.),),
                      interface='shifting-impedance', z_shift_ohm=0.5)
    assert loop.open_loop_block().dc_gain == 0.
    trace = run_time_domain(loop, 1e-5, 0.2)
    reference = reference_direct(loop, 1e-5, 0.2)
    assert_allclose(trace['feedback'], 0., atol=1e-15)
    report = accuracy_metrics(trace, reference, [1])
    assert abs(report.magnitude_error[0]) < 1e-6
    assert report.phase_error(1) == pytest.approx(18., abs=1e-3)


def test_infinite_cutoff_filter_is_itm():
    itm = run_time_domain(_make_loop(rs=0.5), 1e-5, 0.05)
    filtered = run_time_domain(
        _make_loop(rs=0.5, interface='feedback-filter', cutoff_hz=np.inf),
        1e-5, 0.05)
    for channel in ('voltage', 'current', 'command', 'feedback'):
        assert_allclose(filtered[channel], itm[channel])


def test_moving_delay_to_sensor_shifts_voltage():
    # Same loop gain, the coupling voltage no longer carries the delay.
    dt = 1e-5
    on_amplifier = _make_loop(rs=0.5, amp_delay=1e-3)
    on_sensor = _make_loop(rs=0.5, amp_delay=0., sensor_delay=1e-3)
    a = accuracy_metrics(run_time_domain(on_amplifier, dt, 0.2),
                         reference_direct(on_amplifier, dt, 0.2), [1, 5, 7])
    b = accuracy_metrics(run_time_domain(on_sensor, dt, 0.2),
                         reference_direct(on_sensor, dt, 0.2), [1, 5, 7])
    assert_allclose(a.magnitude_error, b.magnitude_error, atol=1e-9)
    assert_allclose(a.phase_error_deg - b.phase_error_deg, [18., 90., 126.],
                    atol=1e-3)


def test_build_loop_from_dict():
    description = {
        'source': {'fundamental_hz': 50., 'harmonics': ((1, 230., 0.),),
                   'impedance': {'kind': 'series-rl', 'resistance_ohm': 0.5,
                                 'inductance_h': 1e-3}},
        'amplifier': {'delay_s': 1e-4, 'bandwidth_hz': 5e3},
        'hut': {'resistance_ohm': 10.},
    }
    loop, open_loop = build_loop(description, dt=1e-5)
    assert isinstance(loop, PhilLoop)
    assert loop.interface == 'itm'
    assert open_loop.delay_s == pytest.approx(1e-4)
    assert open_loop.dc_gain == pytest.approx(0.05)

    omega = 2 * np.pi * np.array([50., 500., 5000.])
    zs = loop.source.impedance_model.impedance(omega)
    zh = loop.load.impedance(omega)
    amp = evaluate(loop.amp.block(), omega)
    assert_allclose(evaluate(open_loop, omega), zs / zh * amp, rtol=1e-10)

    same_loop, _ = build_loop(loop)
    assert same_loop is loop


def test_build_loop_checks_delays():
    with pytest.raises(ValueError, match='delay/dt not integer'):
        build_loop({'amplifier': {'delay_s': 1e-3}}, dt=3e-4)
    assert check_delays(_make_loop(amp_delay=1e-3, sensor_delay=2e-4),
                        1e-4) == (10, 2)


def test_improper_open_loop():
    loop = PhilLoop(simulated_side=SimulatedSide(
        source_impedance=ImpedanceModel('series-rl', 0.5, inductance_h=1e-3)),
        amplifier=AmplifierModel(delay_s=1e-4))
    with pytest.raises(ValueError, match='not proper'):
        loop.open_loop_block()
    # a first-order amplifier makes it proper
    loop.set_params(amplifier=AmplifierModel(delay_s=1e-4, bandwidth_hz=5e3))
    loop.open_loop_block()


@pytest.mark.parametrize('params, g_s, g_h', [
    ({'simulated_side': SimulatedSide(
        source_impedance=ImpedanceModel(resistance_ohm=0.5)),
      'hut': HutModel(resistance_ohm=2.)},
     ([0.5], [1.]), ([1.], [2.])),
    ({'simulated_side': SimulatedSide(source_impedance=ImpedanceModel(
        'series-rl', 0.5, inductance_h=1e-3)),
      'amplifier': AmplifierModel(delay_s=1e-4, bandwidth_hz=5e3),
      'hut': HutModel(resistance_ohm=10.)},
     ([0.5, 1e-3], [1.]), ([1.], [10.])),
    ({'simulated_side': SimulatedSide(
        source_impedance=ImpedanceModel(resistance_ohm=0.5)),
      'hut': HutModel('parallel-rc', 2., capacitance_f=1e-4),
      'interface': 'feedback-filter', 'cutoff_hz': 200.},
     ([0.5], [1.]), ([1., 2e-4], [2.])),
    ({'simulated_side': SimulatedSide(
        source_impedance=ImpedanceModel(resistance_ohm=0.5)),
      'hut': HutModel(resistance_ohm=1.),
      'interface': 'shifting-impedance', 'z_shift_ohm': 0.3},
     ([0.2], [1.]), ([1.], [1.3])),
])
def test_open_loop_is_series_chain(params, g_s, g_h):
    params = dict(params)
    amplifier = params.pop('amplifier', AmplifierModel(delay_s=1e-3))
    loop = PhilLoop(amplifier=amplifier, sensor_delay_s=2e-4, **params)
    if loop.interface == 'feedback-filter':
        interface_filter = design_feedback_filter(loop.cutoff_hz)
    else:
        interface_filter = TransferBlock.gain(1.)
    assert loop.filter_block() == interface_filter
    expected = series([
        TransferBlock(*g_s, allow_improper=True),
        interface_filter,
        amplifier.block(),
        TransferBlock(*g_h, allow_improper=True),
        TransferBlock.gain(1., delay_s=2e-4),
    ])
    block = loop.open_loop_block()
    assert_allclose(block.numerator, expected.numerator, rtol=1e-12)
    assert_allclose(block.denominator, expected.denominator, rtol=1e-12)
    assert block.delay_s == pytest.approx(amplifier.delay_s + 2e-4)
    assert block.delay_s == pytest.approx(loop.total_delay_s)

    omega = 2 * np.pi * np.array([50., 350., 2500.])
    product = np.prod([evaluate(factor, omega)
                       for factor in loop.chain_blocks()], axis=0)
    assert_allclose(evaluate(block, omega), product, rtol=1e-10)


@pytest.mark.parametrize('params, match', [
    ({'interface': 'bogus'}, 'Unknown interface algorithm'),
    ({'interface': 'feedback-filter'}, 'cutoff_hz=None must be strictly'),
    ({'interface': 'shifting-impedance', 'z_shift_ohm': 0.},
     'z_shift_ohm=0.0 must be strictly'),
    ({'sensor_delay_s': -1.}, 'must not be negative'),
    ({'hut': HutModel(resistance_ohm=0.)}, 'resistance_ohm=0.0 must be'),
    ({'hut': HutModel('series-rl')}, 'inductance_h=None must be'),
    ({'amplifier': AmplifierModel(gain=0.)}, 'gain=0.0 must be finite'),
    ({'simulated_side': SimulatedSide(harmonics=())},
     'harmonics must not be empty'),
    ({'simulated_side': SimulatedSide(harmonics=((1, 1., 0.), (1, 2., 0.)))},
     'must be unique'),
    ({'disturbance': Disturbance('sine', 0.1)}, 'frequency_hz=None'),
])
def test_invalid_loops(params, match):
    loop = PhilLoop(**params)
    with pytest.raises(ValueError, match=match):
        loop._validate_parameters()


def test_run_parameter_errors():
    loop = _make_loop()
    with pytest.raises(ValueError, match='too large'):
        run_time_domain(loop, 1e-3, 0.2)
    with pytest.raises(ValueError, match='delay/dt not integer'):
        run_time_domain(_make_loop(harmonics=((1, 1., 0.),)), 3e-4, 0.2)
    with pytest.raises(ValueError, match='strictly positive'):
        run_time_domain(_make_loop(amp_delay=0.), 1e-5, 0.2)
    with pytest.raises(ValueError, match='duration'):
        run_time_domain(loop, 1e-5, 0.)


def test_realization_in_chunks_matches_single_run():
    loop = _make_loop(rs=0.5, sensor_delay=2e-4)
    trace = run_time_domain(loop, 1e-5, 0.05)
    realization = LoopRealization(loop, 1e-5, trace.n_samples)
    while realization.k < trace.n_samples:
        realization.advance(37)
    for name, values in realization.channels().items():
        assert_allclose(values, trace[name], rtol=1e-12, atol=1e-15)


def test_doubling_source_doubles_every_channel():
    def trace(scale):
        loop = PhilLoop(
            simulated_side=SimulatedSide(
                harmonics=tuple((h, scale * a, phase)
                                for h, a, phase in ((1, 1., 0.),
                                                    (5, 0.2, 0.3),
                                                    (7, 0.1, -1.))),
                source_impedance=ImpedanceModel('series-rl', 0.2,
                                                inductance_h=2e-5)),
            amplifier=AmplifierModel(delay_s=2e-4, bandwidth_hz=5e3),
            hut=HutModel('series-rl', 1., inductance_h=1e-4),
            interface='feedback-filter', cutoff_hz=2e3,
            sensor_delay_s=1e-4)
        return run_time_domain(loop, 1e-5, 0.1)

    base = trace(1.)
    doubled = trace(2.)
    assert not base.diverged and not doubled.diverged
    assert doubled.n_samples == base.n_samples
    for channel in ('voltage', 'current', 'command', 'feedback'):
        assert np.any(base[channel] != 0.)
        assert_allclose(doubled[channel], 2 * base[channel], rtol=1e-12,
                        atol=1e-14)


@pytest.mark.parametrize('epsilon', [0., 0.25, 1.])
def test_bounded_below_margin_threshold(epsilon):
    # Open-loop magnitude below 0.9 / (1 + epsilon) never diverges.
    rng = np.random.RandomState(0)
    dt = 2e-5
    bound = 0.9 / (1 + epsilon)
    for _ in range(5):
        rh = rng.uniform(0.5, 5.)
        rs = rng.uniform(0.1, 0.99) * bound * rh
        amplifier = AmplifierModel(delay_s=dt * rng.randint(1, 250),
                                   bandwidth_hz=rng.choice([np.inf, 2e3, 1e4]))
        loop = _make_loop(rs=rs, rh=rh, sensor_delay=dt * rng.randint(0, 50))
        loop.set_params(amplifier=amplifier)
        block = loop.open_loop_block()
        omega = np.logspace(0, 6, 2000)
        assert np.max(np.abs(evaluate(block, omega))) < bound
        verdict = classify(loop, UncertaintyMargin(epsilon))
        assert verdict.classification == 'stable'
        trace = run_time_domain(loop, dt, 2.)
        assert not trace.diverged
        assert trace.n_samples == 100000


def test_saturation_clamps_voltage():
    loop = _make_loop(rs=0.5, harmonics=((1, 10., 0.),))
    loop.set_params(amplifier=AmplifierModel(delay_s=1e-3, saturation_v=2.))
    trace = run_time_domain(loop, 1e-5, 0.05)
    assert np.max(np.abs(trace['voltage'])) <= 2. + 1e-12


@pytest.mark.parametrize('kind', ['sine', 'step', 'white'])
def test_disturbance_samples(kind):
    disturbance = Disturbance(kind, amplitude_v=0.5, frequency_hz=100.,
                              start_s=1e-3, random_state=0)
    values = disturbance.sample(1000, 1e-5)
    assert values.shape == (1000,)
    assert_array_equal(values[:100], 0.)
    assert np.any(values[100:] != 0.)
    if kind == 'white':
        assert_array_equal(values, disturbance.sample(1000, 1e-5))
        assert disturbance.peak == 2.
    else:
        assert np.max(np.abs(values)) <= 0.5 + 1e-12
        assert disturbance.peak == 0.5


def test_white_disturbance_u64_seeds():
    def sample(seed):
        return Disturbance('white', 0.1, random_state=seed).sample(500, 1e-5)

    assert_array_equal(sample(2 ** 40), sample(2 ** 40))
    assert_array_equal(sample(np.uint64(2 ** 63)), sample(2 ** 63))
    assert not np.array_equal(sample(2 ** 40), sample(2 ** 64 - 1))
    assert not np.array_equal(sample(0), sample(1))
    rng = np.random.RandomState(3)
    assert_array_equal(
        Disturbance('white', 0.1, random_state=rng).sample(10, 1e-5),
        0.1 * np.random.RandomState(3).standard_normal(10))
    for seed in (-1, 2 ** 64):
        with pytest.raises(ValueError, match='unsigned 64-bit'):
            Disturbance('white', 0.1, random_state=seed).sample(10, 1e-5)


def test_power_exchange_resistive():
    loop = _make_loop(rs=1., rh=1., harmonics=((1, 1., 0.),))
    reference = reference_direct(loop, 1e-5, 0.2)
    records = power_exchange(reference, [1])
    assert records['harmonic'].tolist() == [1]
    assert records['active_power_w'][0] == pytest.approx(0.125, rel=1e-6)
    assert records['reactive_power_var'][0] == pytest.approx(0., abs=1e-9)
    assert records['power_factor'][0] == pytest.approx(1.)


def test_power_exchange_inductive_load():
    # Lagging current: positive reactive power.
    loop = PhilLoop(
        simulated_side=SimulatedSide(
            source_impedance=ImpedanceModel(resistance_ohm=1e-3)),
        amplifier=AmplifierModel(delay_s=1e-5),
        hut=HutModel('series-rl', 1., inductance_h=1. / (2 * np.pi * 50)))
    reference = reference_direct(loop, 1e-5, 0.2)
    records = power_exchange(reference, [1])
    assert records['reactive_power_var'][0] == pytest.approx(
        records['active_power_w'][0], rel=1e-2)
    assert records['power_factor'][0] == pytest.approx(np.sqrt(0.5),
                                                       rel=1e-2)


def test_steady_state_window():
    # 20000 samples, 2000 per period: the last 4000 samples
    assert steady_state_window(20000, 1e-5, 50.) == (16000, 4000)
    # 3999 available samples hold a single full period
    assert steady_state_window(19999, 1e-5, 50.) == (17999, 2000)
    with pytest.raises(ValueError, match='shorter than one'):
        steady_state_window(5000, 1e-5, 50.)


def test_accuracy_metrics_errors():
    a = Trace(1e-5, {'voltage': np.zeros(20000)}, fundamental_hz=50.)
    b = Trace(1e-5, {'voltage': np.zeros(10000)}, fundamental_hz=50.)
    c = Trace(2e-5, {'voltage': np.zeros(20000)}, fundamental_hz=50.)
    with pytest.raises(ValueError, match='samples'):
        accuracy_metrics(a, b, [1])
    with pytest.raises(ValueError, match='dt mismatch'):
        accuracy_metrics(a, c, [1])
    with pytest.raises(ValueError, match='harmonics must not be empty'):
        accuracy_metrics(a, a, [])
    with pytest.raises(ValueError, match='fundamental_hz is required'):
        accuracy_metrics(Trace(1e-5, {'voltage': np.zeros(10)}),
                         Trace(1e-5, {'voltage': np.zeros(10)}), [1])


def test_trace_validation():
    with pytest.raises(ValueError, match='same length'):
        Trace(1e-5, {'a': np.zeros(3), 'b': np.zeros(4)})
    with pytest.raises(ValueError, match='non-finite'):
        Trace(1e-5, {'a': [0., np.nan]})
    trace = Trace(1e-5, {'a': [0., np.inf]}, diverged=True)
    assert trace.n_samples == 2
    assert Trace(1e-5, {}).n_samples == 0


def test_trace_to_csv(tmpdir):
    trace = Trace(0.5, {'voltage': [1., 0.1], 'current': [2., -3.]},
                  diverged=False)
    path = trace.to_csv(str(tmpdir.join('trace.csv')))
    comments, header, rows = read_csv(path)
    assert comments == ['diverged=false', 'dt_s=0.5']
    assert header == ['time_s', 'voltage', 'current']
    assert rows == [['0', '1', '2'],
                    ['0.5', '0.10000000000000001', '-3']]

    loaded = Trace.from_csv(path)
    assert loaded.dt_s == 0.5
    assert loaded.fundamental_hz is None
    assert not loaded.diverged
    assert list(loaded.channels) == ['voltage', 'current']
    assert_array_equal(loaded['voltage'], [1., 0.1])
    other = write_csv(str(tmpdir.join('other.csv')), ['a'], [[1.]])
    with pytest.raises(ValueError, match='not a trace file'):
        Trace.from_csv(other)


def test_saved_runs_reproduce_accuracy(tmpdir):
    loop = _make_loop(rs=0.5)
    trace = run_time_domain(loop, 1e-5, 0.2)
    reference = reference_direct(loop, 1e-5, 0.2)
    loaded = Trace.from_csv(trace.to_csv(str(tmpdir.join('trace.csv'))))
    loaded_reference = Trace.from_csv(
        reference.to_csv(str(tmpdir.join('reference.csv'))))
    assert loaded.fundamental_hz == 50.
    expected = accuracy_metrics(trace, reference, [1, 5, 7])
    report = accuracy_metrics(loaded, loaded_reference, [1, 5, 7])
    assert_array_equal(report.magnitude_error, expected.magnitude_error)
    assert_array_equal(report.phase_error_deg, expected.phase_error_deg)


def test_impedance_models():
    omega = 2 * np.pi * 50
    assert ImpedanceModel().impedance(omega) == 1.
    rl = ImpedanceModel('series-rl', 2., inductance_h=1e-2)
    assert rl.impedance(omega) == pytest.approx(2. + 1j * omega * 1e-2)
    rc = ImpedanceModel('parallel-rc', 2., capacitance_f=1e-3)
    assert rc.impedance(omega) == pytest.approx(
        2. / (1 + 1j * omega * 2. * 1e-3))
    with pytest.raises(ValueError, match='kinds are'):
        ImpedanceModel('capacitive').impedance_polys()


def test_parameter_equality():
    assert _make_loop() == _make_loop()
    assert _make_loop() != _make_loop(rs=0.5)
    assert AmplifierModel(delay_s=1e-3) == AmplifierModel(delay_s=1e-3)
