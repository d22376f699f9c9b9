import numpy as np
from numpy.testing import assert_allclose
import pytest

from pyphil.bench import (ImpedanceModel, HutModel, AmplifierModel,
                          SimulatedSide, Disturbance, PhilLoop)
from pyphil.bench import run_time_domain, reference_direct, accuracy_metrics
from pyphil.compensation import (PhaseAdvancePlan, Extrapolator,
                                 design_phase_advance, apply_phase_advance,
                                 design_feedback_filter,
                                 apply_feedback_filter, apply_extrapolator,
                                 accurate_bandwidth)
from pyphil.lti import evaluate
from pyphil.stability import classify


HARMONICS = ((1, 1., 0.), (5, 0.2, 0.), (7, 0.1, 0.))


def _make_loop(rs=1e-6, amp_delay=1e-3, sensor_delay=0.,
               harmonics=HARMONICS, **kwargs):
    return PhilLoop(
        simulated_side=SimulatedSide(
            harmonics=harmonics,
            source_impedance=ImpedanceModel(resistance_ohm=rs)),
        amplifier=AmplifierModel(delay_s=amp_delay),
        hut=HutModel(resistance_ohm=1.),
        sensor_delay_s=sensor_delay, **kwargs)


def test_design_phase_advance():
    plan = design_phase_advance(50., [7, 1, 5, 5], 1e-3)
    assert plan.harmonics == (1, 5, 7)
    assert plan.advance_deg(1) == pytest.approx(18.)
    assert plan.advance_deg(5) == pytest.approx(90.)
    assert plan.advance_deg(7) == pytest.approx(126.)


def test_phase_advance_wraps():
    plan = design_phase_advance(50., [7], 3e-3)
    # 2 pi 7 50 3e-3 = 2 pi * 1.05
    assert plan.advance_deg(7) == pytest.approx(18.)
    assert design_phase_advance(50., [1], 0.).advance_deg(1) == 0.


def test_phase_advance_cancels_delay():
    dt = 1e-5
    loop = _make_loop()
    plan = design_phase_advance(50., loop.source.orders, loop.total_delay_s)
    compensated = apply_phase_advance(loop, plan)
    assert loop.phase_advance is None

    reference = reference_direct(loop, dt, 0.2)
    before = accuracy_metrics(run_time_domain(loop, dt, 0.2), reference,
                              [1, 5, 7])
    after = accuracy_metrics(run_time_domain(compensated, dt, 0.2),
                             reference, [1, 5, 7])
    assert_allclose(before.phase_error_deg, [18., 90., 126.], atol=0.05)
    assert np.all(np.abs(after.phase_error_deg) < 0.1)
    assert np.all(np.abs(after.magnitude_error) < 5e-3)
    assert after.rms_error < before.rms_error


def test_phase_advance_keeps_open_loop():
    loop = _make_loop(rs=0.5)
    plan = design_phase_advance(50., loop.source.orders, loop.total_delay_s)
    compensated = apply_phase_advance(loop, plan)
    assert compensated.open_loop_block() == loop.open_loop_block()
    assert (classify(compensated).classification ==
            classify(loop).classification)


@pytest.mark.parametrize('plan, match', [
    (PhaseAdvancePlan(50., ((1, 0.), (5, 0.))), 'do not cover'),
    (PhaseAdvancePlan(60., ((1, 0.), (5, 0.), (7, 0.))), 'does not match'),
    (PhaseAdvancePlan(50., ()), 'at least one'),
    (PhaseAdvancePlan(50., ((1, 7.), (5, 0.), (7, 0.))), 'must be in'),
])
def test_phase_advance_mismatch(plan, match):
    with pytest.raises(ValueError, match=match):
        apply_phase_advance(_make_loop(), plan)


def test_design_phase_advance_errors():
    with pytest.raises(ValueError, match='harmonics must not be empty'):
        design_phase_advance(50., [], 1e-3)
    with pytest.raises(ValueError, match='must not be negative'):
        design_phase_advance(50., [1], -1e-3)


def test_feedback_filter_block():
    block = design_feedback_filter(100.)
    response = evaluate(block, 2 * np.pi * 100.)
    assert abs(response) == pytest.approx(1 / np.sqrt(2))
    assert np.angle(response) == pytest.approx(-np.pi / 4)
    identity = design_feedback_filter(np.inf)
    assert evaluate(identity, 1e3) == 1.
    with pytest.raises(ValueError, match='strictly positive'):
        design_feedback_filter(0.)


def test_feedback_filter_flips_verdict():
    loop = _make_loop(rs=1.2, harmonics=((1, 1., 0.),))
    assert classify(loop).classification == 'unstable'
    filtered = apply_feedback_filter(loop, 100.)
    assert filtered.interface == 'feedback-filter'
    assert filtered.filter_block() == design_feedback_filter(100.)
    assert filtered.chain_blocks()[1] == design_feedback_filter(100.)
    assert loop.interface == 'itm'
    assert classify(filtered).classification == 'stable'
    trace = run_time_domain(filtered, 1e-5, 0.2)
    assert not trace.diverged


def _make_sensor_loop(**kwargs):
    return _make_loop(rs=0.05, amp_delay=0., sensor_delay=1e-3,
                      harmonics=((1, 1., 0.),), **kwargs)


def test_extrapolator_reduces_phase_error():
    dt = 2e-4
    loop = _make_sensor_loop()
    compensated = apply_extrapolator(loop, Extrapolator(1, 1e-3))
    reference = reference_direct(loop, dt, 0.2)
    before = accuracy_metrics(run_time_domain(loop, dt, 0.2), reference, [1])
    after = accuracy_metrics(run_time_domain(compensated, dt, 0.2),
                             reference, [1])
    # V = E / (1 + Rs/Rh exp(-j w T)) against E / (1 + Rs/Rh)
    theta = 2 * np.pi * 50 * 1e-3
    expected = np.degrees(np.angle(1 + 0.05 * np.exp(-1j * theta)))
    assert before.phase_error(1) == pytest.approx(expected, abs=1e-3)
    assert abs(after.phase_error(1)) < 0.1
    assert abs(after.phase_error(1)) < abs(before.phase_error(1))


def test_extrapolator_amplifies_noise():
    dt = 2e-4

    def feedback_noise(**kwargs):
        clean = run_time_domain(_make_sensor_loop(**kwargs), dt, 0.2)
        noise = Disturbance('white', amplitude_v=0.01, random_state=0)
        noisy = run_time_domain(
            _make_sensor_loop(disturbance=noise, **kwargs), dt, 0.2)
        return np.sqrt(np.mean((noisy['feedback'] - clean['feedback']) ** 2))

    plain = feedback_noise()
    predicted = feedback_noise(extrapolator=Extrapolator(1, 1e-3))
    assert predicted > 2 * plain


def test_extrapolator_predict():
    dt = 1e-3
    t = np.arange(10) * dt
    ramp = 3. * t + 1.
    prediction = Extrapolator(1, 2e-3).predict(ramp, dt, initial=1. - 3e-3)
    assert_allclose(prediction, 3. * (t + 2e-3) + 1.)
    assert_allclose(Extrapolator(0, 2e-3).predict(ramp, dt), ramp)
    assert Extrapolator(1, 2e-3).gain(dt) == pytest.approx(2.)
    assert Extrapolator(0, 2e-3).gain(dt) == 0.


def test_extrapolator_errors():
    with pytest.raises(ValueError, match='not supported'):
        Extrapolator(order=2, horizon_s=1e-3).gain(1e-3)
    with pytest.raises(ValueError, match='must equal the total loop delay'):
        apply_extrapolator(_make_sensor_loop(), Extrapolator(1, 2e-3))
    with pytest.raises(ValueError, match='must equal the total loop delay'):
        _make_sensor_loop(
            extrapolator=Extrapolator(1, 5e-4))._validate_parameters()


def test_accurate_bandwidth():
    assert accurate_bandwidth(1e-3) == pytest.approx(5. / 0.36)
    assert accurate_bandwidth(1e-3, tolerance_deg=18.) == pytest.approx(50.)
    assert accurate_bandwidth(0.) == np.inf
    with pytest.raises(ValueError, match='tolerance_deg'):
        accurate_bandwidth(1e-3, tolerance_deg=0.)
