"""
Mixed-state multislice forward model.

Geometry conventions
--------------------
* Real-space probe windows are ``[Ry, Rx]`` with the probe centred on pixel
  ``(Ry // 2, Rx // 2)``.
* Scan positions are probe-centre coordinates in object pixels (``[N, 2]`` as
  ``(y, x)``); :class:`ScanGeometry` stores them in Angstrom.
* Each position crops an ``Ry x Rx`` object patch around the rounded
  position; the sub-pixel remainder is applied to the probe by a Fourier
  shift.
* The exit wave is taken directly after the last slice (no trailing
  propagation).
* Detector and probe grids coincide. Diffraction intensities are
  ``sum_m |fft2(psi_m)|^2 / (Ry * Rx)`` so each pattern integrates to the
  incident probe intensity for a phase-only object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import constants as const

from . import tensor as T
from .errors import ConfigurationError, DegenerateError, ShapeError
from .tensor import Tensor

OBJECT_KINDS = ("complex", "phase", "potential")


def electron_wavelength(energy_kev: float) -> float:
    """Relativistic electron wavelength in Angstrom."""
    e_v = energy_kev * 1e3
    m0, e, h, c = const.m_e, const.e, const.h, const.c
    lam = h / np.sqrt(2 * m0 * e * e_v * (1 + e * e_v / (2 * m0 * c**2)))
    return float(lam * 1e10)


def interaction_constant(energy_kev: float) -> float:
    """Interaction constant sigma_e in rad / (V Angstrom).

    ``sigma = 2 pi m e lambda / h^2`` with the relativistic mass ``m``.
    """
    e_v = energy_kev * 1e3
    m = const.m_e + const.e * e_v / const.c**2
    lam = electron_wavelength(energy_kev) * 1e-10
    sigma = 2 * np.pi * m * const.e * lam / const.h**2  # rad / (V m)
    return float(sigma * 1e-10)


def spatial_frequencies(shape: tuple[int, int], sampling) -> tuple[np.ndarray, np.ndarray]:
    """Frequency grids ``(ky, kx)`` in 1/Angstrom, FFT (corner-origin) order."""
    dy, dx = np.broadcast_to(np.asarray(sampling, dtype=float), (2,))
    ky = np.fft.fftfreq(shape[0], d=dy)[:, None]
    kx = np.fft.fftfreq(shape[1], d=dx)[None, :]
    return ky, kx


@dataclass
class ProbeState:
    """Stack of mutually incoherent probe modes with optical metadata.

    Attributes
    ----------
    modes : ndarray
        Complex ``[M, Ry, Rx]`` real-space modes.
    energy : float
        Beam energy in keV.
    sampling : tuple of float
        Real-space pixel size ``(dy, dx)`` in Angstrom.
    aperture : float
        Convergence semi-angle in mrad.
    defocus : float
        C1 in Angstrom.
    c3 : float
        Spherical aberration in mm.
    """

    modes: np.ndarray
    energy: float
    sampling: tuple[float, float]
    aperture: float
    defocus: float = 0.0
    c3: float = 0.0

    def __post_init__(self):
        self.modes = np.asarray(self.modes)
        if self.modes.ndim == 2:
            self.modes = self.modes[None]
        if self.modes.ndim != 3 or self.modes.shape[0] < 1:
            raise ShapeError("probe modes must have shape [M, Ry, Rx] with M >= 1")
        if not self.total_intensity() > 0:
            raise DegenerateError("probe has no intensity")
        self.sampling = tuple(float(s) for s in np.broadcast_to(self.sampling, (2,)))

    @property
    def num_modes(self) -> int:
        return self.modes.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.modes.shape[-2:]

    @property
    def wavelength(self) -> float:
        return electron_wavelength(self.energy)

    def total_intensity(self) -> float:
        return float(np.sum(np.abs(self.modes) ** 2))


def aberration_phase(k2: np.ndarray, wavelength: float, defocus: float, c3_mm: float) -> np.ndarray:
    c3 = c3_mm * 1e7
    return np.pi * wavelength * k2 * defocus + 0.5 * np.pi * c3 * wavelength**3 * k2**2


def make_ideal_probe(
    energy: float,
    aperture: float,
    shape: tuple[int, int],
    sampling,
    defocus: float = 0.0,
    c3: float = 0.0,
    dtype=np.complex128,
) -> ProbeState:
    """Aperture-limited, aberrated single-mode probe with unit total intensity.

    Parameters
    ----------
    energy : float
        keV.
    aperture : float
        Convergence semi-angle in mrad; must lie inside the reciprocal-space
        Nyquist limit of the window.
    shape : tuple of int
        Real-space window ``(Ry, Rx)``.
    sampling : float or tuple
        Angstrom per pixel.
    defocus, c3 : float
        C1 (Angstrom) and C3 (mm).
    """
    if aperture <= 0:
        raise ConfigurationError("aperture must be positive")
    lam = electron_wavelength(energy)
    dy, dx = np.broadcast_to(np.asarray(sampling, dtype=float), (2,))
    kcut = aperture * 1e-3 / lam
    if kcut > 0.5 / max(dy, dx):
        raise ConfigurationError(
            f"aperture {aperture} mrad exceeds the Nyquist limit of a {max(dy, dx)} A grid"
        )
    ky, kx = spatial_frequencies(shape, (dy, dx))
    k2 = ky**2 + kx**2
    amp = (np.sqrt(k2) <= kcut).astype(float)
    chi = aberration_phase(k2, lam, defocus, c3)
    psi = np.fft.fftshift(np.fft.ifft2(amp * np.exp(-1j * chi)))
    psi /= np.sqrt(np.sum(np.abs(psi) ** 2))
    return ProbeState(psi[None].astype(dtype), energy, (dy, dx), aperture, defocus, c3)


@dataclass
class Propagator:
    """Fresnel free-space transfer function ``exp(-i pi lambda |k|^2 dz)``."""

    array: np.ndarray
    dz: float
    wavelength: float

    def apply(self, wave: np.ndarray) -> np.ndarray:
        return np.fft.ifft2(np.fft.fft2(wave) * self.array)


def make_propagator(
    dz: float,
    energy: float,
    shape: tuple[int, int],
    sampling,
    band_limit: bool = False,
    dtype=np.complex128,
) -> Propagator:
    lam = electron_wavelength(energy)
    ky, kx = spatial_frequencies(shape, sampling)
    k2 = ky**2 + kx**2
    arr = np.exp(-1j * np.pi * lam * k2 * dz)
    if band_limit:
        dy, dx = np.broadcast_to(np.asarray(sampling, dtype=float), (2,))
        kmax = 0.5 / max(dy, dx)
        arr = arr * (np.sqrt(k2) <= (2.0 / 3.0) * kmax)
    return Propagator(arr.astype(dtype), float(dz), lam)


@dataclass
class ObjectVolume:
    """Sample volume ``[Z, Y, X]``.

    ``kind`` selects the transmission mapping: ``complex`` data is the
    transmission itself, ``phase`` data is the phase shift in radians and
    ``potential`` data is a projected potential per slice (V Angstrom) scaled
    by the interaction constant.
    """

    data: np.ndarray
    kind: str = "phase"
    slice_thickness: float = 1.0
    sampling: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ConfigurationError(f"unknown object kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        self.sampling = tuple(float(s) for s in np.broadcast_to(self.sampling, (2,)))

    @property
    def num_slices(self) -> int:
        return self.data.shape[0]

    def transmission(self, energy: float) -> np.ndarray:
        return to_transmission(Tensor(self.data), self.kind, energy).data

    def projected_phase(self, energy: float) -> np.ndarray:
        """Summed phase along the beam, the quantity compared in metrics."""
        if self.kind == "phase":
            return self.data.sum(axis=0)
        if self.kind == "potential":
            return interaction_constant(energy) * self.data.sum(axis=0)
        return np.angle(np.prod(self.data, axis=0))


def to_transmission(data: Tensor, kind: str, energy: float) -> Tensor:
    if kind == "complex":
        return data
    if kind == "phase":
        return T.expi(data)
    if kind == "potential":
        return T.expi(data * interaction_constant(energy))
    raise ConfigurationError(f"unknown object kind {kind!r}")


@dataclass
class ScanGeometry:
    """Probe positions (Angstrom, ``(y, x)`` pairs) and detector geometry."""

    positions: np.ndarray
    sampling: tuple[float, float]
    detector_shape: tuple[int, int]
    energy: float = 200.0
    scan_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.sampling = tuple(float(s) for s in np.broadcast_to(self.sampling, (2,)))
        self.detector_shape = tuple(int(s) for s in self.detector_shape)

    @property
    def num_positions(self) -> int:
        return len(self.positions)

    @property
    def positions_px(self) -> np.ndarray:
        return self.positions / np.asarray(self.sampling)

    @property
    def reciprocal_sampling(self) -> tuple[float, float]:
        """Detector pixel size in mrad."""
        lam = electron_wavelength(self.energy)
        return tuple(1e3 * lam / (n * s) for n, s in zip(self.detector_shape, self.sampling))

    @classmethod
    def raster(cls, scan_shape, step_px, object_shape, sampling, detector_shape, energy=200.0):
        """Raster grid of ``scan_shape`` positions centred in the object field of view."""
        ny, nx = scan_shape
        sy, sx = np.broadcast_to(np.asarray(step_px, dtype=float), (2,))
        cy = (object_shape[0] - 1) / 2 - (ny - 1) * sy / 2
        cx = (object_shape[1] - 1) / 2 - (nx - 1) * sx / 2
        yy, xx = np.meshgrid(cy + sy * np.arange(ny), cx + sx * np.arange(nx), indexing="ij")
        pos_px = np.stack([yy.ravel(), xx.ravel()], axis=1)
        geo = cls(pos_px * np.asarray(sampling, dtype=float), sampling, detector_shape, energy, (ny, nx))
        check_patches_inside(pos_px, detector_shape, object_shape)
        return geo


def patch_origins(positions_px: np.ndarray, window: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-left patch corners and the sub-pixel remainders."""
    rounded = np.round(positions_px)
    frac = positions_px - rounded
    rows = rounded[:, 0].astype(int) - window[0] // 2
    cols = rounded[:, 1].astype(int) - window[1] // 2
    return rows, cols, frac


def check_patches_inside(positions_px, window, object_shape):
    rows, cols, _ = patch_origins(np.asarray(positions_px).reshape(-1, 2), window)
    if rows.min() < 0 or cols.min() < 0 or rows.max() + window[0] > object_shape[0] or cols.max() + window[1] > object_shape[1]:
        raise ShapeError("probe window leaves the object field of view")


def fourier_shift(modes: Tensor, offset_px: Tensor) -> Tensor:
    """Translate probe modes by sub-pixel offsets via the Fourier shift theorem.

    Parameters
    ----------
    modes : Tensor
        ``[M, Ry, Rx]`` complex.
    offset_px : Tensor
        ``[B, 2]`` offsets in pixels.

    Returns
    -------
    Tensor
        ``[B, M, Ry, Rx]``.
    """
    ry, rx = modes.shape[-2:]
    ky = np.fft.fftfreq(ry)[:, None]
    kx = np.fft.fftfreq(rx)[None, :]
    b = offset_px.shape[0]
    dy = offset_px[:, 0].reshape(b, 1, 1)
    dx = offset_px[:, 1].reshape(b, 1, 1)
    rdt = modes.data.real.dtype
    ramp = T.expi(dy * (-2 * np.pi * ky).astype(rdt) + dx * (-2 * np.pi * kx).astype(rdt))
    spec = T.fft2(modes)
    return T.ifft2(spec.reshape(1, *modes.shape) * ramp.reshape(b, 1, ry, rx))


def shift_probe(probe: ProbeState, offset) -> np.ndarray:
    """Shift all modes of ``probe`` by ``offset = (dy, dx)`` Angstrom."""
    off = np.asarray(offset, dtype=float).reshape(1, 2) / np.asarray(probe.sampling)
    return fourier_shift(Tensor(probe.modes), Tensor(off)).data[0]


def multislice_exit_wave(incident: Tensor, slices: list[Tensor], propagator: np.ndarray | None) -> Tensor:
    """Alternate transmission and free-space propagation.

    Parameters
    ----------
    incident : Tensor
        ``[..., M, Ry, Rx]`` incident wave modes.
    slices : list of Tensor
        Per-slice transmission patches, each broadcastable as ``[..., 1, Ry, Rx]``.
    propagator : ndarray or None
        Fourier-space transfer function between consecutive slices. Not
        applied after the final slice.
    """
    if len(slices) > 1 and propagator is None:
        raise ShapeError("multiple slices need a propagator")
    if propagator is not None and propagator.shape != incident.shape[-2:]:
        raise ShapeError("propagator grid does not match the probe window")
    psi = incident
    for z, t in enumerate(slices):
        psi = psi * t
        if z < len(slices) - 1:
            psi = T.ifft2(T.fft2(psi) * propagator)
    return psi


def far_field_intensity(exit_wave: Tensor) -> Tensor:
    """Incoherent mode sum of normalized far-field intensities, corner-origin."""
    ry, rx = exit_wave.shape[-2:]
    return T.abs2(T.fft2(exit_wave)).sum(axis=-3) * (1.0 / (ry * rx))


def forward_intensities(
    modes: Tensor,
    transmission: Tensor,
    positions_px: Tensor,
    batch: np.ndarray,
    propagator: np.ndarray | None,
) -> Tensor:
    """Differentiable prediction for a batch of scan positions.

    ``modes`` ``[M, Ry, Rx]``, ``transmission`` ``[Z, Y, X]`` complex,
    ``positions_px`` ``[N, 2]``. Returns corner-origin ``[B, Ry, Rx]``.
    """
    window = modes.shape[-2:]
    batch = np.asarray(batch, dtype=int)
    pos = positions_px[batch]
    rows, cols, _ = patch_origins(pos.data, window)
    frac = pos - np.round(pos.data)
    psi = fourier_shift(modes, frac)
    b = len(batch)
    slices = []
    for z in range(transmission.shape[0]):
        patches = T.extract_patches(transmission[z], rows, cols, window)
        slices.append(patches.reshape(b, 1, *window))
    exit_wave = multislice_exit_wave(psi, slices, propagator)
    return far_field_intensity(exit_wave)


def predict_intensities(
    probe: ProbeState,
    obj: ObjectVolume,
    geometry: ScanGeometry,
    batch=None,
    band_limit: bool = False,
) -> np.ndarray:
    """Diffraction intensities ``[B, Ky, Kx]`` with the zero frequency centred."""
    if not np.allclose(probe.sampling, obj.sampling) or not np.allclose(probe.sampling, geometry.sampling):
        raise ShapeError("probe, object and scan sampling differ")
    if tuple(geometry.detector_shape) != tuple(probe.shape):
        raise ShapeError("detector grid must equal the probe window")
    if batch is None:
        batch = np.arange(geometry.num_positions)
    prop = None
    if obj.num_slices > 1:
        prop = make_propagator(obj.slice_thickness, probe.energy, probe.shape, probe.sampling, band_limit, probe.modes.dtype).array
    with T.no_grad():
        trans = to_transmission(Tensor(obj.data), obj.kind, probe.energy)
        out = forward_intensities(Tensor(probe.modes), trans, Tensor(geometry.positions_px), batch, prop)
    return np.fft.fftshift(out.data, axes=(-2, -1))
