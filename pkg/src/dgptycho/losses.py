"""Fidelity losses, soft regularizers and hard-constraint projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DegenerateError, ShapeError
from .tensor import Tensor

FIDELITY_KINDS = ("amplitude-mse", "poisson-nll")
POISSON_EPS = 1e-9


@dataclass
class LossWeights:
    lambda_xy: float = 0.0
    lambda_z: float = 0.0
    lambda_surf: float = 0.0
    fidelity: str = "amplitude-mse"

    def __post_init__(self):
        for name in ("lambda_xy", "lambda_z", "lambda_surf"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{name} must be finite and non-negative, got {v}")
            setattr(self, name, v)
        if self.fidelity not in FIDELITY_KINDS:
            raise ContractError(f"unknown fidelity loss {self.fidelity!r}")


def fidelity_loss(pred: Tensor, measured, kind: str = "amplitude-mse") -> Tensor:
    """Mean data mismatch between predicted and measured intensities.

    ``amplitude-mse`` is ``mean((sqrt(pred) - sqrt(measured))^2)`` with
    ``pred`` clamped at zero; ``poisson-nll`` is
    ``mean(pred - measured * ln(pred + 1e-9))``.
    """
    measured = np.asarray(measured)
    if measured.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} vs measurement {measured.shape}")
    if np.any(measured < 0):
        raise DataError("measured intensities must be non-negative")
    if kind == "amplitude-mse":
        amp = T.sqrt(T.clamp_min(pred, 0.0))
        return T.abs2(amp - np.sqrt(measured).astype(pred.dtype)).mean()
    if kind == "poisson-nll":
        return (pred - T.log(pred + POISSON_EPS) * measured.astype(pred.dtype)).mean()
    raise ContractError(f"unknown fidelity loss {kind!r}")


def _tv_real(v: Tensor, lambda_xy: float, lambda_z: float) -> Tensor:
    z, y, x = v.shape
    total = Tensor(np.zeros((), dtype=v.dtype))
    if lambda_xy:
        if x > 1:
            total = total + T.l1(v[:, :, 1:] - v[:, :, :-1]) * lambda_xy
        if y > 1:
            total = total + T.l1(v[:, 1:, :] - v[:, :-1, :]) * lambda_xy
    if lambda_z and z > 1:
        total = total + T.l1(v[1:] - v[:-1]) * lambda_z
    return total * (1.0 / (x * y * z))


def tv_loss(volume: Tensor, lambda_xy: float, lambda_z: float) -> Tensor:
    """Anisotropic total variation of a ``[Z, Y, X]`` volume.

    Forward differences without wrap-around; the in-plane and beam-direction
    terms are weighted separately and the sum is divided by ``X*Y*Z``.
    Complex volumes contribute the TV of their phase plus that of their
    amplitude.
    """
    if volume.ndim == 2:
        volume = volume.reshape(1, *volume.shape)
    if volume.is_complex:
        return _tv_real(T.angle(volume), lambda_xy, lambda_z) + _tv_real(T.tabs(volume), lambda_xy, lambda_z)
    return _tv_real(volume, lambda_xy, lambda_z)


def surface_zero_loss(volume: Tensor, lambda_surf: float) -> Tensor:
    """Mean absolute density on the first and last slices, times ``lambda_surf``.

    For complex transmissions the deviation from vacuum (``|V - 1|``) is
    penalised instead.
    """
    if volume.ndim != 3 or volume.shape[0] < 2:
        raise ContractError("surface-zero loss needs at least two slices")
    _, y, x = volume.shape
    top, bottom = volume[0], volume[-1]
    if volume.is_complex:
        top, bottom = top - 1.0, bottom - 1.0
    return (T.l1(top) + T.l1(bottom)) * (lambda_surf / (2 * x * y))


def orthogonalize_modes(modes: np.ndarray) -> np.ndarray:
    """Project probe modes onto an orthogonal set spanning the same subspace.

    The ``M x (Ry*Rx)`` mode matrix is decomposed as ``U S Vh`` and replaced by
    ``S Vh``: rows are orthogonal, ordered by decreasing power, and the total
    intensity ``sum(S^2)`` is unchanged.
    """
    modes = np.asarray(modes)
    m = modes.shape[0]
    mat = modes.reshape(m, -1)
    if not np.any(mat):
        raise DegenerateError("cannot orthogonalize an all-zero probe")
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    out = s[:, None] * vh
    return out.reshape(modes.shape).astype(modes.dtype, copy=False)


def tie_slices(volume: np.ndarray) -> np.ndarray:
    """Replace every slice by the mean over slices (uniform along the beam)."""
    volume = np.asarray(volume)
    # already uniform: returned as is, since the mean of equal floats can be off by a rounding step
    if np.array_equal(volume, np.broadcast_to(volume[:1], volume.shape)):
        return volume.copy()
    return np.broadcast_to(volume.mean(axis=0, keepdims=True), volume.shape).copy()
