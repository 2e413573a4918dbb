"""
Image-quality metrics: SSIM, power spectra, radial profiles, information
limit and depth profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import find_peaks

from .errors import ContractError, ShapeError
from .physics import ObjectVolume

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
# smallest log-power scatter treated as noise when judging peaks
MIN_LOG_STD = 0.05


def gaussian_window(size: int = 7, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, w.shape)
    return np.tensordot(win, w, axes=((2, 3), (0, 1)))


def ssim(a, b, window: int = 7, data_range: float | None = None) -> float:
    """Mean structural similarity over all fully-contained Gaussian windows.

    Parameters
    ----------
    a, b : ndarray
        Real 2-D images of equal shape.
    window : int
        Window size; the Gaussian has sigma 1.5 pixels.
    data_range : float, optional
        Dynamic range used for the stabilising constants. Defaults to the
        larger of the two image ranges, which keeps the metric symmetric.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ShapeError("ssim needs 2-D images at least one window in size")
    if data_range is None:
        data_range = max(np.ptp(a), np.ptp(b))
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    w = gaussian_window(window)
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a**2
    sbb = _filter_valid(b * b, w) - mu_b**2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def remove_plane(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Subtract the least-squares plane ``c0 + c1*y + c2*x`` fitted to ``image - reference``."""
    image = np.asarray(image, dtype=np.float64)
    ny, nx = image.shape
    yy, xx = np.meshgrid(np.arange(ny) - ny / 2, np.arange(nx) - nx / 2, indexing="ij")
    A = np.stack([np.ones(ny * nx), yy.ravel(), xx.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(A, (image - reference).ravel(), rcond=None)
    return image - (A @ coef).reshape(image.shape)


def phase_ssim(recon: np.ndarray, truth: np.ndarray, roi=None, window: int = 7) -> float:
    """SSIM of a reconstructed phase after removing the offset/ramp gauge.

    ``roi`` is a ``(slice_y, slice_x)`` pair; ``data_range`` comes from the
    ground truth.
    """
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if roi is not None:
        recon, truth = recon[roi], truth[roi]
    aligned = remove_plane(recon, truth)
    return ssim(aligned, truth, window=window, data_range=float(np.ptp(truth)))


def power_spectrum(image: np.ndarray) -> np.ndarray:
    """Centred ``|FFT(image - mean)|^2 / N``; sums to ``N * variance``."""
    image = np.asarray(image)
    if image.ndim != 2 or np.iscomplexobj(image):
        raise ContractError("power_spectrum expects a real 2-D image")
    image = image.astype(np.float64)
    f = np.fft.fft2(image - image.mean())
    return np.fft.fftshift(np.abs(f) ** 2) / image.size


def frequency_radius(shape, sampling) -> np.ndarray:
    """Radial spatial frequency (1/Angstrom) of each pixel of a centred spectrum."""
    dy, dx = np.broadcast_to(np.asarray(sampling, dtype=float), (2,))
    ky = np.fft.fftshift(np.fft.fftfreq(shape[0], dy))[:, None]
    kx = np.fft.fftshift(np.fft.fftfreq(shape[1], dx))[None, :]
    return np.sqrt(ky**2 + kx**2)


@dataclass
class RadialProfile:
    centers: np.ndarray
    power: np.ndarray
    background: np.ndarray
    subtracted: np.ndarray
    log_residual: np.ndarray
    bin_width: float
    counts: np.ndarray


def radial_profile(spectrum: np.ndarray, sampling=1.0, degree: int = 3, fit_start: int = 2) -> RadialProfile:
    """Azimuthal mean of a centred power spectrum with a fitted smooth background.

    Bins are one reciprocal pixel wide (``1 / (N * sampling)``) and centred on
    integer multiples of that width up to Nyquist. The background is a
    polynomial in frequency fitted to ``log(power)`` with iterative rejection
    of points lying more than three robust standard deviations from the fit.
    Rejecting both sides keeps the fit unbiased on pure noise while still
    discarding peaks.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    dy, dx = np.broadcast_to(np.asarray(sampling, dtype=float), (2,))
    width = 1.0 / max(spectrum.shape[0] * dy, spectrum.shape[1] * dx)
    k = frequency_radius(spectrum.shape, (dy, dx))
    idx = np.rint(k / width).astype(int)
    nbins = int(min(0.5 / dy, 0.5 / dx) / width) + 1
    mask = idx < nbins
    counts = np.bincount(idx[mask], minlength=nbins)
    sums = np.bincount(idx[mask], weights=spectrum[mask], minlength=nbins)
    power = sums / np.maximum(counts, 1)
    centers = np.arange(nbins) * width

    floor = 1e-12 * max(power.max(), 1e-300)
    logp = np.log(power + floor)
    x = centers / centers[-1]
    use = np.zeros(nbins, bool)
    use[fit_start:] = True
    for _ in range(5):
        coef = np.polyfit(x[use], logp[use], min(degree, max(use.sum() - 1, 0)))
        resid = logp - np.polyval(coef, x)
        s = 1.4826 * np.median(np.abs(resid[use] - np.median(resid[use])))
        keep = use & (np.abs(resid) <= 3 * max(s, MIN_LOG_STD))
        if keep.sum() <= degree + 1 or np.array_equal(keep, use):
            break
        use = keep
    logbg = np.polyval(coef, x)
    background = np.exp(logbg)
    return RadialProfile(centers, power, background, power - background, logp - logbg, width, counts)


@dataclass
class InfoLimit:
    resolution: float | None
    frequency: float | None
    peaks: np.ndarray
    profile: RadialProfile

    @property
    def resolved(self) -> bool:
        return self.resolution is not None


def info_limit(spectrum: np.ndarray, sampling=1.0, nsigma: float = 3.0, half_window: int = 6, first_bin: int = 2) -> InfoLimit:
    """Finest spatial period whose radial power rises significantly above background.

    A bin counts as a peak when its background-subtracted log power is a
    local maximum and exceeds ``nsigma`` times the local noise scatter, both
    above the fitted background and above the median of its neighbours. The
    scatter is the robust standard deviation of the residuals within
    ``half_window`` bins on either side (the bin and its direct neighbours
    excluded), never less than the speckle scatter of a bin average,
    ``sqrt(2 / n_pixels)``, nor ``MIN_LOG_STD``. The outermost peak defines the
    limit, returned as ``1 / frequency`` in Angstrom; with no peak the result
    is unresolved.
    """
    prof = radial_profile(spectrum, sampling)
    r = prof.log_residual
    n = len(r)
    peaks = []
    for i in range(first_bin, n):
        lo, hi = max(first_bin, i - half_window), min(n, i + half_window + 1)
        neigh = np.r_[r[lo : max(lo, i - 1)], r[min(hi, i + 2) : hi]]
        if len(neigh) < 3:
            continue
        s = max(
            1.4826 * np.median(np.abs(neigh - np.median(neigh))),
            np.sqrt(2.0 / max(prof.counts[i], 1)),
            MIN_LOG_STD,
        )
        is_max = r[i] >= r[i - 1] and (i == n - 1 or r[i] >= r[i + 1])
        if is_max and min(r[i], r[i] - np.median(neigh)) > nsigma * s:
            peaks.append(i)
    peaks = np.asarray(peaks, dtype=int)
    if len(peaks) == 0:
        return InfoLimit(None, None, peaks, prof)
    f = prof.centers[peaks[-1]]
    return InfoLimit(float(1.0 / f), float(f), peaks, prof)


@dataclass
class DepthProfile:
    density: np.ndarray
    clusters: list[np.ndarray]
    centroids: np.ndarray
    surface_fraction: float

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)


def depth_profile(volume, region=None, prominence: float = 0.2) -> DepthProfile:
    """Per-slice integrated density inside ``region`` and its layer centroids.

    Parameters
    ----------
    volume : ObjectVolume or ndarray
        ``[Z, Y, X]``. Complex transmissions use ``|phase|`` as density,
        real data its absolute value.
    region : tuple of slice, optional
        ``(slice_y, slice_x)`` lateral region.
    prominence : float
        A layer is an interior local maximum of the profile whose prominence
        is at least this fraction of the profile's range. Slices are assigned to
        layers by splitting at the minimum between neighbouring peaks; each
        layer's centroid is the mean slice index weighted by density above
        the profile minimum. A flat profile is one layer spanning all slices.
    """
    data = volume.data if isinstance(volume, ObjectVolume) else np.asarray(volume)
    if data.ndim == 2:
        data = data[None]
    if region is not None:
        ys, xs = region
        if ys.stop is not None and ys.stop > data.shape[1] or xs.stop is not None and xs.stop > data.shape[2]:
            raise ContractError("region extends outside the volume")
        data = data[:, ys, xs]
    dens = np.angle(data) if np.iscomplexobj(data) else data
    prof = np.abs(dens).sum(axis=(1, 2)).astype(np.float64)
    total = prof.sum()
    surface = float((prof[0] + prof[-1]) / total) if total > 0 and len(prof) > 1 else 0.0
    base, span = prof.min(), np.ptp(prof)
    clusters, centroids = [], []
    if span > 1e-12 * max(abs(prof.max()), 1e-300):
        # endpoints have no prominence reference on one side and are never peaks;
        # without an interior peak the whole profile is one layer
        peaks, _ = find_peaks(prof, prominence=prominence * span)
        cuts = [0] + [int(a + np.argmin(prof[a : b + 1])) + 1 for a, b in zip(peaks[:-1], peaks[1:])] + [len(prof)]
        for a, b in zip(cuts[:-1], cuts[1:]):
            idx = np.arange(a, b)
            w = prof[idx] - base
            clusters.append(idx)
            centroids.append(float(np.sum(idx * w) / np.sum(w)))
    elif total > 0:
        # flat profile (single slice or identical slices): one layer spanning all
        idx = np.arange(len(prof))
        clusters.append(idx)
        centroids.append(float(idx.mean()))
    return DepthProfile(prof, clusters, np.asarray(centroids), surface)
