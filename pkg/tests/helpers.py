"""Shared test utilities: central finite differences and small problem builders."""

import numpy as np

from dgptycho.tensor import Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, arrays, i, h=FD_STEP):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``.

    Complex inputs get ``dL/dRe + i dL/dIm``, matching the autodiff convention.
    """
    x = arrays[i]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    parts = (1.0, 1j) if np.iscomplexobj(x) else (1.0,)
    for k in range(flat.size):
        for unit in parts:
            orig = flat[k]
            flat[k] = orig + h * unit
            fp = f(*arrays)
            flat[k] = orig - h * unit
            fm = f(*arrays)
            flat[k] = orig
            d = (fp - fm) / (2 * h)
            gflat[k] += d * unit if unit == 1j else d
    return g


def autodiff_grads(build, arrays):
    """Gradients of ``build(*tensors)`` for every input array."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*ts)
    loss.backward()
    return [t.grad for t in ts]


def gradcheck(build, arrays, rtol=FD_RTOL, h=FD_STEP):
    """Compare autodiff against central differences for all inputs; return max relative error."""
    arrays = [np.array(a, copy=True) for a in arrays]

    def f(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, g in enumerate(autodiff_grads(build, arrays)):
        gn = numeric_grad(f, arrays, i, h)
        err = np.linalg.norm(g - gn) / max(np.linalg.norm(gn), 1e-300)
        worst = max(worst, err)
        assert err < rtol, f"input {i}: relative gradient error {err:.3g}"
    return worst


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def toy_problem(seed=0, num_positions=8, window=32, num_slices=2, num_modes=2, margin=6):
    """Small float64 multislice problem with non-half-integer scan positions.

    Returns a dict with ``modes`` [M,R,R], ``transmission`` [Z,Y,X],
    ``positions`` [N,2] in pixels, ``propagator``, and ``other``, a perturbed
    transmission used to synthesise mismatched measurements.
    """
    from dgptycho.physics import make_ideal_probe, make_propagator

    rng = np.random.default_rng(seed)
    probe = make_ideal_probe(200.0, 25.0, (window, window), 0.2)
    modes = np.concatenate([probe.modes, 0.3 * probe.modes * np.exp(1j * rng.uniform(0, 1, (1, window, window)))])[:num_modes]
    size = window + 2 * margin
    phase = 0.3 * rng.standard_normal((num_slices, size, size))
    amp = 1 - 0.05 * rng.random((num_slices, size, size))
    trans = amp * np.exp(1j * phase)
    centre = (size - 1) / 2
    # fractional parts kept well away from 0.5 so rounding is stable
    frac = rng.uniform(-0.35, 0.35, (num_positions, 2))
    grid = rng.integers(-margin + 1, margin, (num_positions, 2))
    positions = np.round(centre) + grid + frac
    prop = make_propagator(1.5, 200.0, (window, window), 0.2).array
    other = trans * np.exp(0.2j * rng.standard_normal(trans.shape))
    return {"modes": modes, "transmission": trans, "positions": positions, "propagator": prop, "other": other}


def nanoparticle_dataset(size=32, detector=16, scan=8, dose=np.inf, seed=0, radius=2.5, sampling=0.25, energy=200.0, aperture=25.0, defocus=0.0, margin=0):
    """Small simulated nanoparticle dataset whose scan just fits inside the object."""
    from dgptycho.physics import ScanGeometry, make_ideal_probe
    from dgptycho.simdata import make_nanoparticle_phantom, simulate_dataset

    ph = make_nanoparticle_phantom((size, size), sampling, radius=radius, seed=seed)
    probe = make_ideal_probe(energy, aperture, (detector, detector), sampling, defocus=defocus)
    step = (size - detector - 2 * margin) / (scan - 1) - 1e-3
    geo = ScanGeometry.raster((scan, scan), step, (size, size), sampling, (detector, detector), energy)
    return simulate_dataset(ph, probe, geo, dose=dose, seed=seed)
