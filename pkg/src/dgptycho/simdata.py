"""
Synthetic phantoms and 4D-STEM dataset simulation.

Atoms are drawn as 2-D Gaussian projected potentials with a per-species
amplitude and width. This is a test-bed model, not a quantitative scattering
simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError
from .physics import ObjectVolume, ProbeState, ScanGeometry, predict_intensities

# amplitude (object units at the atom centre) and Gaussian sigma in Angstrom
SPECIES = {
    "Au": (0.45, 0.35),
    "W": (400.0, 0.35),
    "Se2": (300.0, 0.35),
}


@dataclass
class Phantom:
    volume: ObjectVolume
    atoms: list[tuple[str, float, float, float]] = field(default_factory=list)
    label: str = ""


@dataclass
class Dataset4D:
    """Diffraction intensities with scan geometry and optional ground truth.

    ``intensities`` are ``[N, Ky, Kx]`` float32 with the zero frequency at
    ``(Ky // 2, Kx // 2)``. ``dose`` is electrons per square Angstrom
    (``inf`` for noiseless data).
    """

    intensities: np.ndarray
    geometry: ScanGeometry
    energy: float
    aperture: float
    defocus: float = 0.0
    c3: float = 0.0
    dose: float = np.inf
    seed: int = 0
    ground_truth: ObjectVolume | None = None
    true_probe: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    # container sections this package does not interpret, kept for rewriting
    extra_sections: dict = field(default_factory=dict)

    @property
    def num_positions(self) -> int:
        return self.intensities.shape[0]

    @property
    def detector_shape(self) -> tuple[int, int]:
        return self.intensities.shape[-2:]


def _splat(shape, sampling, positions_a, amplitude, sigma_a, out=None):
    """Sum isotropic Gaussians (positions in Angstrom) onto a grid."""
    img = np.zeros(shape) if out is None else out
    sy, sx = sampling
    yy = np.arange(shape[0]) * sy
    xx = np.arange(shape[1]) * sx
    cut = 4 * sigma_a
    for (y, x), a in zip(positions_a, np.broadcast_to(amplitude, (len(positions_a),))):
        iy = slice(max(0, int((y - cut) / sy)), min(shape[0], int((y + cut) / sy) + 2))
        ix = slice(max(0, int((x - cut) / sx)), min(shape[1], int((x + cut) / sx) + 2))
        gy = np.exp(-((yy[iy] - y) ** 2) / (2 * sigma_a**2))
        gx = np.exp(-((xx[ix] - x) ** 2) / (2 * sigma_a**2))
        img[iy, ix] += a * gy[:, None] * gx[None, :]
    return img


def make_nanoparticle_phantom(
    size=(64, 64),
    sampling: float = 0.25,
    radius: float = 5.0,
    roughness: float = 0.02,
    seed: int = 0,
    lattice_constant: float = 4.08,
    peak_phase: float = 1.5,
    substrate_phase: float = 0.1,
) -> Phantom:
    """Projected phase of an FCC gold cluster on an amorphous support.

    Atoms on an FCC lattice (viewed along [001]) are kept inside a sphere of
    ``radius`` Angstrom centred in the field of view; their Gaussian
    potentials are summed along the beam, so thicker columns at the centre
    give a dome-shaped low-frequency envelope. The atom amplitudes are scaled
    so the cluster's peak phase is ``peak_phase``. The support is a constant
    ``substrate_phase`` plus smoothed non-negative texture of standard
    deviation ``roughness``.
    """
    size = tuple(int(s) for s in size)
    sy = sx = float(sampling)
    fov = np.array(size) * sampling
    if radius >= fov.min() / 2:
        raise ContractError("particle radius must be below half the field of view")
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.normal(size=size), 1.5, mode="wrap")
    tex = roughness * tex / (tex.std() + 1e-30)
    substrate = np.clip(substrate_phase + tex, 0, None)

    atoms: list[tuple[str, float, float, float]] = []
    phase = substrate.copy()
    if radius > 0:
        cy, cx = (np.array(size) - 1) / 2 * sampling
        half = lattice_constant / 2
        n = int(np.ceil(radius / half)) + 1
        idx = np.arange(-n, n + 1)
        i, j, k = np.meshgrid(idx, idx, idx, indexing="ij")
        keep = ((i + j + k) % 2 == 0) & ((i**2 + j**2 + k**2) * half**2 <= radius**2)
        pts = np.stack([i[keep], j[keep], k[keep]], axis=1) * half
        amp, sig = SPECIES["Au"]
        for y, x, z in pts:
            atoms.append(("Au", cy + y, cx + x, z))
        xy = np.array([[a[1], a[2]] for a in atoms])
        particle = _splat(size, (sy, sx), xy, amp, sig)
        particle *= peak_phase / particle.max()
        phase = phase + particle
    vol = ObjectVolume(phase[None], kind="phase", slice_thickness=2 * radius if radius > 0 else 1.0, sampling=(sy, sx))
    return Phantom(vol, atoms, f"Au nanoparticle r={radius} A")


def _honeycomb(extent, a, twist_deg, center):
    """A (metal) and B (chalcogen) sites of a hexagonal sheet covering ``extent``."""
    a1 = np.array([a, 0.0])
    a2 = np.array([a / 2, a * np.sqrt(3) / 2])
    basis = [np.zeros(2), (a1 + a2) / 3]
    n = int(np.ceil(max(extent) / a * 1.6)) + 2
    th = np.deg2rad(twist_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    sites = []
    for b, species in zip(basis, ("W", "Se2")):
        for i in range(-n, n + 1):
            for j in range(-n, n + 1):
                p = rot @ (i * a1 + j * a2 + b) + center
                if -1 <= p[0] <= extent[0] + 1 and -1 <= p[1] <= extent[1] + 1:
                    sites.append((species, p[0], p[1]))
    return sites


def make_bilayer_phantom(
    size=(64, 64),
    sampling: float = 0.2,
    spacing: float = 7.0,
    twist: float = 3.0,
    num_slices: int = 16,
    slice_thickness: float = 1.0,
    lattice_constant: float = 3.28,
) -> Phantom:
    """Two hexagonal sheets at distinct depths of a potential volume.

    The sheets are placed symmetrically about the middle of the volume,
    ``round(spacing / slice_thickness)`` slices apart; the second sheet is
    rotated by ``twist`` degrees about the field-of-view centre.
    """
    depth = num_slices * slice_thickness
    if spacing <= 0 or spacing >= depth - slice_thickness:
        raise ConfigurationError(f"layer spacing {spacing} A does not fit in a {depth} A volume")
    size = tuple(int(s) for s in size)
    dz = int(round(spacing / slice_thickness))
    z0 = int(round((num_slices - 1 - dz) / 2))
    z1 = z0 + dz
    extent = np.array(size) * sampling
    center = extent / 2
    data = np.zeros((num_slices,) + size)
    atoms = []
    for z, tw in ((z0, 0.0), (z1, twist)):
        for species, y, x in _honeycomb(extent, lattice_constant, tw, center):
            amp, sig = SPECIES[species]
            _splat(size, (sampling, sampling), [(y, x)], amp, sig, out=data[z])
            atoms.append((species, y, x, z * slice_thickness))
    vol = ObjectVolume(data, kind="potential", slice_thickness=slice_thickness, sampling=(sampling, sampling))
    return Phantom(vol, atoms, f"bilayer spacing={spacing} A twist={twist} deg")


def make_lattice_phantom(size=(128, 128), sampling: float = 0.25, spacing=2.0, amplitude: float = 0.1) -> Phantom:
    """Square sinusoidal lattice(s) with the given period(s) in Angstrom."""
    spacings = np.atleast_1d(np.asarray(spacing, dtype=float))
    if np.any(spacings <= 2 * sampling):
        raise ContractError("lattice spacing must exceed twice the sampling (Nyquist)")
    size = tuple(int(s) for s in size)
    yy = np.arange(size[0])[:, None] * sampling
    xx = np.arange(size[1])[None, :] * sampling
    img = np.zeros(size)
    for d in spacings:
        img += np.cos(2 * np.pi * yy / d) + np.cos(2 * np.pi * xx / d)
    img = amplitude * (img + 2 * len(spacings))
    vol = ObjectVolume(img[None], kind="phase", sampling=(sampling, sampling))
    return Phantom(vol, [], "lattice " + ",".join(f"{d:g}" for d in spacings))


def probe_diameter(probe: ProbeState, fraction: float = 0.9) -> float:
    """Diameter (Angstrom) of the disc around the window centre holding ``fraction`` of the intensity."""
    inten = np.sum(np.abs(probe.modes) ** 2, axis=0)
    ry, rx = inten.shape
    yy = (np.arange(ry) - ry // 2)[:, None] * probe.sampling[0]
    xx = (np.arange(rx) - rx // 2)[None, :] * probe.sampling[1]
    r = np.sqrt(yy**2 + xx**2).ravel()
    order = np.argsort(r)
    csum = np.cumsum(inten.ravel()[order]) / inten.sum()
    return float(2 * r[order][np.searchsorted(csum, fraction)])


def scan_step(geometry: ScanGeometry) -> tuple[float, float]:
    """Raster step (Angstrom) along y and x."""
    if geometry.scan_shape is None:
        raise ContractError("scan step needs a raster geometry")
    ny, nx = geometry.scan_shape
    pos = geometry.positions.reshape(ny, nx, 2)
    sy = float(np.mean(np.diff(pos[:, 0, 0]))) if ny > 1 else 0.0
    sx = float(np.mean(np.diff(pos[0, :, 1]))) if nx > 1 else 0.0
    return sy, sx


def simulate_dataset(
    phantom: Phantom,
    probe: ProbeState,
    geometry: ScanGeometry,
    dose: float = np.inf,
    seed: int = 0,
) -> Dataset4D:
    """Forward-model every scan position and apply Poisson counting noise.

    The probe is used as given for ``dose = inf`` (noiseless). For finite
    dose, patterns are rescaled to an expected total of
    ``dose * step_y * step_x`` electrons per pattern and each pattern is
    sampled from its own ``(seed, index)`` Poisson stream.
    """
    if not dose > 0:
        raise ContractError("dose must be positive")
    step = scan_step(geometry)
    diam = probe_diameter(probe)
    if max(step) >= diam:
        raise ContractError(f"scan step {max(step):.3g} A does not overlap a {diam:.3g} A probe")
    clean = predict_intensities(probe, phantom.volume, geometry)
    if np.isinf(dose):
        data = clean
    else:
        counts = dose * step[0] * step[1]
        expected = clean * (counts / probe.total_intensity())
        data = np.empty_like(expected)
        for n in range(len(expected)):
            data[n] = np.random.default_rng([seed, n]).poisson(np.clip(expected[n], 0, None))
    return Dataset4D(
        intensities=data.astype(np.float32),
        geometry=geometry,
        energy=probe.energy,
        aperture=probe.aperture,
        defocus=probe.defocus,
        c3=probe.c3,
        dose=float(dose),
        seed=seed,
        ground_truth=phantom.volume,
        true_probe=probe.modes.copy(),
        metadata={"phantom": phantom.label, "object_shape": list(phantom.volume.data.shape[-2:])},
    )
