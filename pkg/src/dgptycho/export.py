"""8-bit PNG rendering with recorded contrast limits, and diagnostic plots."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError


def contrast_limits(image: np.ndarray, contrast=None, percentile=None) -> tuple[float, float]:
    """Display limits from explicit ``(min, max)`` or ``(low, high)`` percentiles.

    With neither given the full data range is used.
    """
    if contrast is not None and percentile is not None:
        raise ContractError("give either contrast limits or percentiles, not both")
    if contrast is not None:
        lo, hi = (float(contrast["min"]), float(contrast["max"])) if isinstance(contrast, dict) else map(float, contrast)
    elif percentile is not None:
        lo, hi = (float(v) for v in np.percentile(image, percentile))
    else:
        lo, hi = float(image.min()), float(image.max())
    return lo, hi


def to_uint8(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear map of ``[lo, hi]`` onto ``[0, 255]`` with clipping; a flat range maps to mid-gray."""
    if hi <= lo:
        return np.full(image.shape, 128, dtype=np.uint8)
    scaled = (image - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)


def export_png(image, contrast=None, percentile=None) -> tuple[bytes, dict]:
    """Render a real 2-D image as 8-bit grayscale PNG.

    Returns the PNG bytes and the sidecar record holding the contrast limits
    and clipping counts.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError("export_png expects a 2-D image")
    if not np.all(np.isfinite(image)):
        raise ContractError("export_png needs a finite image")
    lo, hi = contrast_limits(image, contrast, percentile)
    img8 = to_uint8(image, lo, hi)
    buf = io.BytesIO()
    Image.fromarray(img8, mode="L").save(buf, format="PNG")
    info = {
        "min": lo,
        "max": hi,
        "percentile": None if percentile is None else [float(p) for p in percentile],
        "clipped_low": int(np.sum(image < lo)),
        "clipped_high": int(np.sum(image > hi)),
        "shape": list(image.shape),
    }
    return buf.getvalue(), info


def write_png(image, path, contrast=None, percentile=None) -> dict:
    """Write ``path`` and ``path`` + ``.json`` (the contrast sidecar)."""
    data, info = export_png(image, contrast, percentile)
    path = Path(path)
    path.write_bytes(data)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(info, indent=2))
    return info


def write_raw(image, path) -> dict:
    """Little-endian float32 dump with a JSON sidecar giving the shape."""
    arr = np.ascontiguousarray(np.asarray(image, dtype="<f4"))
    path = Path(path)
    path.write_bytes(arr.tobytes())
    info = {"dtype": "<f4", "shape": list(arr.shape), "min": float(arr.min()), "max": float(arr.max())}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(info, indent=2))
    return info


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_power_spectrum(spectrum, sampling, path, limit=None):
    plt = _pyplot()
    n = spectrum.shape
    kmax = 0.5 / sampling
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.log10(spectrum + spectrum.max() * 1e-8), cmap="magma", extent=[-kmax, kmax, kmax, -kmax])
    if limit is not None and limit.resolved:
        ax.add_patch(plt.Circle((0, 0), limit.frequency, fill=False, color="c", lw=0.8))
    ax.set_xlabel("k (1/A)")
    ax.set_title(f"power spectrum {n[0]}x{n[1]}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_radial_profile(profile, path, limit=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(profile.centers, profile.power, ".-", label="radial mean")
    ax.semilogy(profile.centers, profile.background, "--", label="background fit")
    if limit is not None and limit.resolved:
        ax.axvline(limit.frequency, color="k", lw=0.8, label=f"limit {limit.resolution:.2f} A")
    ax.set_xlabel("spatial frequency (1/A)")
    ax.set_ylabel("power")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_curves(curves: dict, path, xlabel="iteration", ylabel="SSIM"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, y) in curves.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
