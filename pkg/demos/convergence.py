"""SSIM against iteration for DGP and pixelated reconstructions of a simulated nanoparticle.

Writes ``convergence.png`` and prints the iteration at which each run first
reaches SSIM 0.9. Takes a few minutes on one CPU core.
"""

import sys

import numpy as np

from dgptycho.engine import ReconConfig, Reconstructor, Stage, run_dgp
from dgptycho.export import plot_curves
from dgptycho.metrics import phase_ssim
from dgptycho.physics import ScanGeometry, make_ideal_probe
from dgptycho.simdata import make_nanoparticle_phantom, simulate_dataset

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200
sampling, window = 0.25, 16

phantom = make_nanoparticle_phantom((64, 64), sampling, radius=5.0)
probe = make_ideal_probe(200.0, 25.0, (window, window), sampling)
geometry = ScanGeometry.raster((16, 16), (64 - window) / 15 - 1e-3, (64, 64), sampling, (window, window), 200.0)
data = simulate_dataset(phantom, probe, geometry, dose=1e4, seed=1)
truth = phantom.volume.data[0]
roi = (slice(8, 56), slice(8, 56))

stage = Stage(iterations, lr_decay=0.99)
curves = {"DGP": [], "pixelated": []}
track = lambda name: (lambda st: curves[name].append(phase_ssim(st.object_array()[0], truth, roi)))
run_dgp(ReconConfig(mode="dgp", stages=[stage], pretrain_iterations=10, autoencoder_iterations=100, seed=1), data, callback=track("DGP"))
Reconstructor(ReconConfig(stages=[stage], seed=1), data).run(callback=track("pixelated"))

for name, c in curves.items():
    hit = np.flatnonzero(np.asarray(c) >= 0.9)
    print(f"{name:10s} final SSIM {c[-1]:.3f}, first >= 0.9 at iteration {hit[0] + 1 if len(hit) else 'never'}")
it = np.arange(1, iterations + 1)
plot_curves({k: (it, v) for k, v in curves.items()}, "convergence.png")
