"""Multislice electron ptychography with deep generative priors.

Submodules
----------
tensor      reverse-mode automatic differentiation over numpy arrays
physics     probe, propagator and multislice forward model
dgp         U-Net generators for object and probe
losses      fidelity, regularization and constraint projections
optim       Adam
engine      pixelated and generator-based reconstruction loops
simdata     phantoms and simulated 4D datasets
metrics     SSIM, power spectra, information limit, depth profiles
container   binary container format
io          dataset files
config      run configuration documents
export      PNG/raw rendering and plots
cli         command-line pipeline
"""

__version__ = "0.1.0"
