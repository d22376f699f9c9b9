from time import time

import numpy as np

from pyphil.bench import (ImpedanceModel, AmplifierModel, SimulatedSide,
                          PhilLoop, run_time_domain, reference_direct,
                          accuracy_metrics)
from pyphil.cosim import MasterConfig, run_master
from pyphil.units import split_loop, split_wiring


dt = 1e-6
duration = 1.

loop = PhilLoop(
    simulated_side=SimulatedSide(
        harmonics=((1, 1., 0.), (5, 0.2, 0.), (7, 0.1, 0.)),
        source_impedance=ImpedanceModel(resistance_ohm=0.5)),
    amplifier=AmplifierModel(bandwidth_hz=5e3, delay_s=1e-4),
    sensor_delay_s=1e-5)
n_samples = int(round(duration / dt))

print("Compiling time-domain kernel...")
tic = time()
run_time_domain(loop, dt, 1e-3)
toc = time()
print(f"done in {toc - tic:.3f}s")

print(f"Monolithic run, {n_samples:.0e} samples")
tic = time()
trace = run_time_domain(loop, dt, duration)
toc = time()
duration_s = toc - tic
print(f"done in {duration_s:.3f}s    {n_samples / duration_s:.3e} sample/s")

reference = reference_direct(loop, dt, duration)
report = accuracy_metrics(trace, reference, [1, 5, 7])
print(f"phase errors {np.round(report.phase_error_deg, 3)} deg")

# the stepped masters advance the same loop one Python call per step
cosim_duration = 0.02
n_steps = int(round(cosim_duration / dt))
for mode in ('lockstep', 'conservative'):
    simulator, hardware = split_loop(loop, dt, cosim_duration)
    config = MasterConfig(mode, cosim_duration, dt_s=dt,
                          wiring=split_wiring(simulator, hardware))
    print(f"{mode} master, {n_steps:.0e} steps")
    tic = time()
    run_master([simulator, hardware], config)
    toc = time()
    duration_s = toc - tic
    print(f"done in {duration_s:.3f}s    {n_steps / duration_s:.3e} step/s")
