from time import time

import numpy as np

from pyphil.bench import AmplifierModel, PhilLoop
from pyphil.stability import (UncertaintyMargin, stability_map,
                              time_domain_map, oracle_agreement)


n_ratios = 21
n_delays = 21
dt = 5e-6
duration = 0.2

loop = PhilLoop(amplifier=AmplifierModel(bandwidth_hz=5e3))
ratios = np.linspace(0.1, 2., n_ratios)
delays = np.linspace(1e-4, 5e-3, n_delays)

for n_jobs in (1, -1):
    print(f"Stability map {n_ratios}x{n_delays}, n_jobs={n_jobs}")
    tic = time()
    frequency_map = stability_map(loop, ratios, delays, UncertaintyMargin(0.),
                                  n_jobs=n_jobs)
    toc = time()
    duration_s = toc - tic
    print(f"done in {duration_s:.3f}s    "
          f"{n_ratios * n_delays / duration_s:.1f} cell/s")

classes, counts = np.unique(frequency_map.classifications(),
                            return_counts=True)
for name, count in zip(classes, counts):
    print(f"{name}: {count}")

print(f"Time-domain oracle, dt={dt:g} s, duration={duration:g} s")
tic = time()
diverged = time_domain_map(loop, ratios, delays, dt, duration, n_jobs=-1)
toc = time()
print(f"done in {toc - tic:.3f}s")
agreement, n_scored = oracle_agreement(frequency_map, diverged)
print(f"agreement {agreement:.3f} over {n_scored} scored cells")
assert agreement >= 0.95
