import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from pyphil.bench import (ImpedanceModel, HutModel, AmplifierModel,
                          SimulatedSide, PhilLoop)
from pyphil.compensation import Extrapolator
from pyphil.stability import (UncertaintyMargin, classify, stability_map,
                              analysis_grid, open_loop_response, sweep_cell,
                              time_domain_map, oracle_agreement,
                              MARGINAL_BAND)
from pyphil.utils import read_csv


def _make_loop(ratio, delay_s=1e-3, rh=1., **kwargs):
    return PhilLoop(
        simulated_side=SimulatedSide(
            source_impedance=ImpedanceModel(resistance_ohm=ratio * rh)),
        amplifier=AmplifierModel(delay_s=delay_s),
        hut=HutModel(resistance_ohm=rh), **kwargs)


RATIOS = np.arange(1, 41) * 0.05


@pytest.mark.parametrize('epsilon', [0., 0.25, 0.5])
def test_flat_gain_loops(epsilon):
    # Open loop ratio * exp(-s T): the magnitude at every crossover is the
    # ratio itself.
    margin = UncertaintyMargin(epsilon)
    threshold = 1. / (1. + epsilon)
    for ratio in RATIOS:
        verdict = classify(_make_loop(ratio), margin)
        assert verdict.worst_magnitude_at_crossover == pytest.approx(ratio)
        assert verdict.epsilon_used == epsilon
        expected_stable = ratio < threshold - MARGINAL_BAND
        assert (verdict.classification == 'stable') == expected_stable
        if ratio > threshold + MARGINAL_BAND:
            assert verdict.classification == 'unstable'


def test_flat_gain_crossovers():
    verdict = classify(_make_loop(0.5, delay_s=1e-3))
    # -omega T = -pi (2 m + 1) up to the end of the grid at 20 pi / T
    expected = np.pi * (2 * np.arange(10) + 1) / 1e-3
    assert_allclose(verdict.phase_crossovers, expected, rtol=1e-5)
    assert verdict.classification == 'stable'
    assert verdict.gain_margin_db == pytest.approx(20 * np.log10(2.))
    assert verdict.rank == 0


def test_marginal_band():
    assert classify(_make_loop(1.)).classification == 'marginal'
    assert classify(_make_loop(0.99)).classification == 'marginal'
    assert classify(_make_loop(1.05)).classification == 'unstable'
    margin = UncertaintyMargin(0.25)
    assert classify(_make_loop(0.8), margin).classification == 'marginal'
    assert classify(_make_loop(0.8), margin).rank == 1


def test_no_delay_is_stable():
    verdict = classify(_make_loop(3., delay_s=0.))
    assert verdict.classification == 'stable'
    assert verdict.phase_crossovers.shape == (0,)
    assert verdict.worst_magnitude_at_crossover == pytest.approx(3.)


def test_feedback_filter_stabilizes():
    unstable = _make_loop(1.2)
    assert classify(unstable).classification == 'unstable'
    filtered = _make_loop(1.2, interface='feedback-filter', cutoff_hz=100.)
    verdict = classify(filtered)
    assert verdict.classification == 'stable'
    # first crossover of -atan(w / wc) - w T = -pi
    first = verdict.phase_crossovers[0]
    wc = 2 * np.pi * 100.
    assert np.arctan(first / wc) + first * 1e-3 == pytest.approx(np.pi,
                                                                 abs=1e-4)
    assert verdict.worst_magnitude_at_crossover == pytest.approx(
        1.2 / np.sqrt(1 + (first / wc) ** 2))


def test_extrapolator_is_ignored():
    plain = classify(_make_loop(0.7))
    with_extrapolator = classify(_make_loop(
        0.7, extrapolator=Extrapolator(order=1, horizon_s=1e-3)))
    assert (with_extrapolator.worst_magnitude_at_crossover ==
            plain.worst_magnitude_at_crossover)


@pytest.mark.parametrize('epsilon', [-0.1, np.inf, np.nan])
def test_invalid_margin(epsilon):
    with pytest.raises(ValueError, match='epsilon >= 0'):
        classify(_make_loop(0.5), UncertaintyMargin(epsilon))


def test_analysis_grid():
    grid = analysis_grid(1e-3)
    assert grid[0] == pytest.approx(2 * np.pi * 0.1)
    assert grid[-1] == pytest.approx(2 * np.pi * 1e4)
    assert grid.shape[0] >= 2500
    assert np.all(np.diff(grid) > 0)
    assert analysis_grid(0.)[-1] == pytest.approx(2 * np.pi * 1e6)


def test_open_loop_response():
    loop = _make_loop(0.5, delay_s=1e-3)
    points = open_loop_response(loop, [100., 1000.])
    assert_allclose(points['magnitude'], 0.5)
    assert_allclose(points['phase_rad'], [-0.1, -1.])


def test_sweep_cell():
    template = _make_loop(0.1, delay_s=1e-4, rh=2.,
                          extrapolator=Extrapolator(1, 1e-4))
    cell = sweep_cell(template, 0.5, 1e-3)
    assert cell.source.impedance_model.resistance_ohm == pytest.approx(1.)
    assert cell.amp.delay_s == 1e-3
    assert cell.sensor_delay_s == 0.
    assert cell.extrapolator is None
    # the template is left untouched
    assert template.amp.delay_s == 1e-4
    assert template.extrapolator is not None


def test_stability_map_flat_gain():
    ratios = [0.5, 0.9, 1.5]
    delays = [1e-4, 1e-3]
    result = stability_map(_make_loop(1.), ratios, delays)
    assert result.verdicts.shape == (3, 2)
    assert result.threshold == 1.
    expected = np.array([['stable'] * 2, ['stable'] * 2, ['unstable'] * 2],
                        dtype=object)
    assert_array_equal(result.classifications(), expected)
    assert_allclose(result.worst_magnitudes(),
                    np.repeat(np.array(ratios)[:, None], 2, axis=1))
    assert result.errors == {}


def test_stability_map_n_jobs_invariance():
    loop = PhilLoop(amplifier=AmplifierModel(bandwidth_hz=5e3))
    ratios = np.linspace(0.1, 2., 5)
    delays = np.linspace(1e-4, 5e-3, 4)
    serial = stability_map(loop, ratios, delays, n_jobs=1)
    parallel = stability_map(loop, ratios, delays, n_jobs=2)
    assert_array_equal(serial.classifications(), parallel.classifications())
    assert_array_equal(serial.worst_magnitudes(), parallel.worst_magnitudes())


def test_stability_map_records_failed_cells(tmpdir):
    result = stability_map(_make_loop(1.), [-0.5, 0.5], [1e-3])
    assert list(result.errors) == [(0, 0)]
    assert 'resistance_ohm' in result.errors[(0, 0)]
    assert result.classifications().tolist() == [['error'], ['stable']]

    comments, header, rows = read_csv(
        result.to_csv(str(tmpdir.join('map.csv'))))
    assert comments[0] == 'epsilon=0.0'
    assert comments[1].startswith('cell (0, 0) failed: ValueError')
    assert header == ['ratio', 'delay_s', 'classification',
                      'worst_magnitude', 'gain_margin_db']
    assert [row[2] for row in rows] == ['error', 'stable']
    assert rows[0][3] == 'nan'


def test_stability_map_invalid_inputs():
    with pytest.raises(ValueError, match='epsilon >= 0'):
        stability_map(_make_loop(1.), [0.5], [1e-3], UncertaintyMargin(-1.))
    with pytest.raises(ValueError, match='ratios must be'):
        stability_map(_make_loop(1.), [], [1e-3])
    with pytest.raises(ValueError, match='delays must be'):
        stability_map(_make_loop(1.), [0.5], [[1e-3]])


def test_oracle_agreement():
    # Reduced grid: the frequency-domain verdict predicts which time-domain
    # runs blow up.
    loop = PhilLoop(amplifier=AmplifierModel(bandwidth_hz=5e3))
    ratios = [0.3, 0.6, 1.5, 2.]
    delays = [2e-4, 1e-3]
    frequency_map = stability_map(loop, ratios, delays)
    diverged = time_domain_map(loop, ratios, delays, dt=1e-5, duration=0.5)
    assert_array_equal(diverged, [[0, 0], [0, 0], [1, 1], [1, 1]])
    agreement, n_scored = oracle_agreement(frequency_map, diverged)
    assert agreement == 1.
    assert n_scored == 8


def test_oracle_agreement_exclusion():
    frequency_map = stability_map(_make_loop(1.), [0.5, 0.97, 1.5], [1e-3])
    diverged = np.array([[0], [0], [-1]])
    agreement, n_scored = oracle_agreement(frequency_map, diverged)
    # the 0.97 cell is too close to the threshold, the last one failed
    assert n_scored == 1
    assert agreement == 1.
    agreement, n_scored = oracle_agreement(frequency_map,
                                           np.full((3, 1), -1))
    assert np.isnan(agreement)
    assert n_scored == 0


def test_time_domain_map_failed_cell():
    # 1.5e-4 s is not a multiple of 1e-4 s
    diverged = time_domain_map(_make_loop(1.), [0.5], [1.5e-4, 2e-4],
                               dt=1e-4, duration=0.1)
    assert diverged.tolist() == [[-1, 0]]


def test_epsilon_monotonicity():
    # A larger margin never turns an unstable verdict into a stable one.
    rng = np.random.RandomState(42)
    epsilons = [0., 0.1, 0.25, 0.5, 1.]
    for _ in range(200):
        loop = PhilLoop(
            simulated_side=SimulatedSide(source_impedance=ImpedanceModel(
                resistance_ohm=rng.uniform(0.05, 2.))),
            amplifier=AmplifierModel(bandwidth_hz=rng.uniform(5e2, 2e4),
                                     delay_s=rng.uniform(1e-4, 5e-3)),
            hut=HutModel(resistance_ohm=1.),
            interface=str(rng.choice(['itm', 'feedback-filter'])),
            cutoff_hz=rng.uniform(50., 5e3))
        ranks = [classify(loop, UncertaintyMargin(eps)).rank
                 for eps in epsilons]
        assert ranks == sorted(ranks)
