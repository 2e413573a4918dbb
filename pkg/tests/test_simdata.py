import numpy as np
import pytest

from dgptycho.errors import ConfigurationError, ContractError
from dgptycho.losses import surface_zero_loss
from dgptycho.metrics import power_spectrum
from dgptycho.physics import ScanGeometry, make_ideal_probe, predict_intensities
from dgptycho.simdata import (
    make_bilayer_phantom,
    make_lattice_phantom,
    make_nanoparticle_phantom,
    probe_diameter,
    scan_step,
    simulate_dataset,
)
from dgptycho.tensor import Tensor


def tiny_setup(dose=np.inf, seed=0, scan=(2, 2)):
    ph = make_nanoparticle_phantom((16, 16), 0.25, radius=1.5)
    probe = make_ideal_probe(200.0, 25.0, (8, 8), 0.25)
    geo = ScanGeometry.raster(scan, 0.5, (16, 16), 0.25, (8, 8))
    return ph, probe, geo


# -- phantoms ----------------------------------------------------------------------


def test_nanoparticle_radius_zero_is_substrate_only():
    ph = make_nanoparticle_phantom((32, 32), 0.25, radius=0.0)
    assert ph.atoms == []
    assert ph.volume.data.max() < 0.1 + 6 * 0.02


def test_nanoparticle_contrast_over_substrate():
    ph = make_nanoparticle_phantom((64, 64), 0.25, radius=5.0)
    img = ph.volume.data[0]
    sub = make_nanoparticle_phantom((64, 64), 0.25, radius=0.0).volume.data[0]
    assert img.max() >= 5 * sub.mean()
    iy, ix = np.unravel_index(np.argmax(img), img.shape)
    assert np.hypot(iy - 31.5, ix - 31.5) * 0.25 < 5.0


def test_nanoparticle_seeded():
    a = make_nanoparticle_phantom((32, 32), 0.25, radius=2.0, seed=5)
    b = make_nanoparticle_phantom((32, 32), 0.25, radius=2.0, seed=5)
    c = make_nanoparticle_phantom((32, 32), 0.25, radius=2.0, seed=6)
    assert np.array_equal(a.volume.data, b.volume.data)
    assert not np.array_equal(a.volume.data, c.volume.data)


def test_nanoparticle_must_fit():
    with pytest.raises(ContractError):
        make_nanoparticle_phantom((32, 32), 0.25, radius=5.0)


def test_bilayer_layers_seven_slices_apart():
    ph = make_bilayer_phantom((48, 48), 0.2, spacing=7.0, num_slices=16, slice_thickness=1.0)
    occupied = np.flatnonzero(np.abs(ph.volume.data).sum(axis=(1, 2)))
    assert len(occupied) == 2 and occupied[1] - occupied[0] == 7
    assert surface_zero_loss(Tensor(ph.volume.data), 1.0).data == 0


def test_bilayer_without_twist_aligned():
    ph = make_bilayer_phantom((48, 48), 0.2, spacing=7.0, twist=0.0)
    z0, z1 = np.flatnonzero(np.abs(ph.volume.data).sum(axis=(1, 2)))
    assert np.array_equal(ph.volume.data[z0], ph.volume.data[z1])


def test_bilayer_spacing_must_fit():
    with pytest.raises(ConfigurationError):
        make_bilayer_phantom(spacing=20.0, num_slices=16)


def test_lattice_peak_and_nyquist():
    n, s, d = 64, 0.25, 2.0
    ps = power_spectrum(make_lattice_phantom((n, n), s, d).volume.data[0])
    iy, ix = np.unravel_index(np.argmax(ps), ps.shape)
    k = np.hypot(iy - n // 2, ix - n // 2) / (n * s)
    assert abs(k - 1 / d) < 1e-12
    with pytest.raises(ContractError):
        make_lattice_phantom((n, n), s, 2 * s)


def test_two_lattices_two_rings():
    n, s = 96, 0.25
    ps = power_spectrum(make_lattice_phantom((n, n), s, [3.0, 1.5]).volume.data[0])
    strong = np.argwhere(ps > ps.max() / 10)
    radii = np.unique(np.round(np.hypot(strong[:, 0] - n // 2, strong[:, 1] - n // 2) / (n * s), 6))
    assert np.allclose(radii, [1 / 3.0, 1 / 1.5])


# -- simulation --------------------------------------------------------------------


def test_noiseless_dataset_matches_forward_model():
    ph, probe, geo = tiny_setup()
    ds = simulate_dataset(ph, probe, geo)
    ref = predict_intensities(probe, ph.volume, geo).astype(np.float32)
    assert np.array_equal(ds.intensities, ref)
    assert ds.ground_truth is ph.volume


def test_poisson_mean_matches_noiseless_pattern():
    ph, probe, geo = tiny_setup(scan=(2, 1))
    dose = 2e3
    clean = simulate_dataset(ph, probe, geo).intensities[0].astype(np.float64)
    step = scan_step(geo)
    expected = clean * dose * step[0] * step[1] / probe.total_intensity()
    n = 10_000
    acc = np.zeros_like(expected)
    for seed in range(n):
        acc += simulate_dataset(ph, probe, geo, dose=dose, seed=seed).intensities[0]
    mean = acc / n
    sigma = np.sqrt(expected / n)
    bright = expected > 1.0
    assert np.all(np.abs(mean - expected)[bright] < 3 * sigma[bright] + 1e-9)


def test_counts_follow_dose_and_step_area():
    ph = make_nanoparticle_phantom((32, 32), 0.25, radius=2.5)
    probe = make_ideal_probe(200.0, 25.0, (16, 16), 0.25)
    geo = ScanGeometry.raster((8, 8), 2.0, (32, 32), 0.25, (16, 16))
    dose = 1e4
    ds = simulate_dataset(ph, probe, geo, dose=dose, seed=1)
    sy, sx = scan_step(geo)
    total = ds.intensities.reshape(len(ds.intensities), -1).sum(axis=1)
    assert abs(total.mean() / (dose * sy * sx) - 1) < 0.02
    assert np.all(ds.intensities == np.round(ds.intensities))


def test_scan_must_overlap():
    ph, probe, _ = tiny_setup()
    diam = probe_diameter(probe)
    step_px = diam / 0.25 * 1.2
    geo = ScanGeometry.raster((2, 1), step_px, (64, 16), 0.25, (8, 8))
    with pytest.raises(ContractError):
        simulate_dataset(ph, probe, geo)


def test_dose_must_be_positive():
    ph, probe, geo = tiny_setup()
    with pytest.raises(ContractError):
        simulate_dataset(ph, probe, geo, dose=0.0)
