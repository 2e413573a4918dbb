"""
U-Net deep generative priors.

The network maps a ``[C, H, W]`` input to an output of the same shape. Layer
layout for ``depth`` levels and ``F`` starting filters (``F_l = F * 2**l``)::

    encoder l = 0 .. depth-2:
        conv3x3(C_in -> F_l), act, conv3x3(F_l -> F_l), act   -> skip_l
        conv3x3 stride 2 (F_l -> F_l)                          (downsample)
    bottleneck:
        conv3x3(F_{depth-2} -> F_{depth-1}), act, conv3x3(F_{depth-1} -> F_{depth-1}), act
    decoder l = depth-2 .. 0:
        upsample2x, conv3x3(F_{l+1} -> F_l), act
        concat(skip_l, .) -> conv3x3(2 F_l -> F_l), act, conv3x3(F_l -> F_l), act
    head:
        conv1x1(F_0 -> C), final activation

Complex networks use complex weights and apply ReLU to real and imaginary
parts separately.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DivergenceError, ShapeError
from .container import dumps, loads
from .optim import Adam
from .tensor import Tensor

HEAD_SCALE = 1e-2

ACTIVATIONS = {"identity": T.identity, "softplus": T.softplus, "relu": T.relu}


@dataclass
class UNetSpec:
    depth: int = 3
    filters: int = 16
    channels: int = 1
    complex: bool = False
    final_activation: str = "identity"

    def __post_init__(self):
        if self.depth < 1 or self.filters < 1 or self.channels < 1:
            raise ConfigurationError("depth, filters and channels must be positive")
        if self.final_activation not in ("identity", "softplus"):
            raise ConfigurationError(f"unknown final activation {self.final_activation!r}")
        if self.complex and self.final_activation == "softplus":
            raise ConfigurationError("softplus output is only allowed for real networks")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


def layer_list(spec: UNetSpec) -> list[tuple[str, int, int, int, int]]:
    """``(name, c_in, c_out, kernel, stride)`` for every convolution, in call order."""
    f = [spec.filters * 2**l for l in range(spec.depth)]
    layers = []
    cin = spec.channels
    for l in range(spec.depth - 1):
        layers += [
            (f"enc{l}.conv1", cin, f[l], 3, 1),
            (f"enc{l}.conv2", f[l], f[l], 3, 1),
            (f"enc{l}.down", f[l], f[l], 3, 2),
        ]
        cin = f[l]
    d = spec.depth - 1
    layers += [("bottleneck.conv1", cin, f[d], 3, 1), ("bottleneck.conv2", f[d], f[d], 3, 1)]
    for l in reversed(range(spec.depth - 1)):
        layers += [
            (f"dec{l}.up", f[l + 1], f[l], 3, 1),
            (f"dec{l}.conv1", 2 * f[l], f[l], 3, 1),
            (f"dec{l}.conv2", f[l], f[l], 3, 1),
        ]
    layers.append(("head", f[0], spec.channels, 1, 1))
    return layers


def parameter_count(spec: UNetSpec) -> int:
    """Closed-form number of trainable array elements (weights plus biases)."""
    F, C, D = spec.filters, spec.channels, spec.depth

    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    total = 0
    for l in range(D - 1):
        fl = F * 2**l
        cin = C if l == 0 else F * 2 ** (l - 1)
        total += conv(cin, fl) + 2 * conv(fl, fl)
        total += conv(2 * fl, fl) + conv(fl, fl) + conv(2 * fl, fl)
    fb = F * 2 ** (D - 1)
    total += conv(C if D == 1 else fb // 2, fb) + conv(fb, fb)
    total += conv(F, C, 1)
    return total


@dataclass
class DGPState:
    """Network weights, fixed anchor input and input-noise level."""

    spec: UNetSpec
    params: dict[str, Tensor]
    anchor: np.ndarray | None = None
    noise_sigma: float = 0.025
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list[float] = field(default_factory=list)
    # the network works on values divided by this; generate() multiplies back
    output_scale: float = 1.0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> DGPState:
        return copy.deepcopy(self)


def build_unet(spec: UNetSpec, seed: int = 0, dtype=np.float32, noise_sigma: float = 0.025) -> DGPState:
    """Initialise a U-Net with He fan-in scaling.

    Complex networks draw independent real and imaginary parts, each with
    variance ``1 / fan_in`` so that ``|w|^2`` has the He variance ``2 / fan_in``.
    Biases start at zero. The 1x1 output head is scaled down by
    ``HEAD_SCALE`` so the untrained network emits values close to
    ``activation(0)``: no output channel starts deep in the flat tail of a
    softplus, where it could never recover, while every layer still receives
    gradient from the first step.
    """
    rng = np.random.default_rng(seed)
    rdt = np.finfo(np.dtype(dtype)).dtype
    cdt = np.result_type(rdt, np.complex64)
    params: dict[str, Tensor] = {}
    for name, cin, cout, k, _ in layer_list(spec):
        fan_in = cin * k * k
        shape = (cout, cin, k, k)
        if spec.complex:
            std = np.sqrt(1.0 / fan_in)
            w = (rng.normal(0, std, shape) + 1j * rng.normal(0, std, shape)).astype(cdt)
            b = np.zeros(cout, dtype=cdt)
        else:
            w = rng.normal(0, np.sqrt(2.0 / fan_in), shape).astype(rdt)
            b = np.zeros(cout, dtype=rdt)
        if name == "head":
            w = (w * HEAD_SCALE).astype(w.dtype)
        params[name + ".weight"] = Tensor(w, requires_grad=True)
        params[name + ".bias"] = Tensor(b, requires_grad=True)
    return DGPState(spec, params, None, noise_sigma, np.random.default_rng([seed, 1]))


def _conv(h: Tensor, params, name, stride=1) -> Tensor:
    w = params[name + ".weight"]
    b = params[name + ".bias"]
    k = w.shape[-1]
    out = T.conv2d(h, w, stride=stride, padding=k // 2)
    return out + b.reshape(-1, 1, 1)


def unet_forward(spec: UNetSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    c, h, w = x.shape
    if c != spec.channels:
        raise ShapeError(f"network expects {spec.channels} channels, got {c}")
    if h % spec.divisor or w % spec.divisor:
        raise ShapeError(f"spatial extents {h}x{w} must be divisible by {spec.divisor}")
    act = T.relu
    skips = []
    for l in range(spec.depth - 1):
        x = act(_conv(x, params, f"enc{l}.conv1"))
        x = act(_conv(x, params, f"enc{l}.conv2"))
        skips.append(x)
        x = _conv(x, params, f"enc{l}.down", stride=2)
    x = act(_conv(x, params, "bottleneck.conv1"))
    x = act(_conv(x, params, "bottleneck.conv2"))
    for l in reversed(range(spec.depth - 1)):
        x = act(_conv(T.upsample2x(x), params, f"dec{l}.up"))
        x = T.concat([skips[l], x], axis=0)
        x = act(_conv(x, params, f"dec{l}.conv1"))
        x = act(_conv(x, params, f"dec{l}.conv2"))
    x = _conv(x, params, "head")
    return ACTIVATIONS[spec.final_activation](x)


def perturbed_input(dgp: DGPState, training: bool = True) -> np.ndarray:
    """Anchor plus fresh Gaussian noise (never accumulated into the anchor)."""
    if dgp.anchor is None:
        raise ContractError("DGP anchor input is not set")
    a = dgp.anchor
    if not training or dgp.noise_sigma == 0:
        return a
    s = dgp.noise_sigma
    if np.iscomplexobj(a):
        eps = dgp.rng.normal(0, s, a.shape) + 1j * dgp.rng.normal(0, s, a.shape)
    else:
        eps = dgp.rng.normal(0, s, a.shape)
    return (a + eps).astype(a.dtype)


def generate(dgp: DGPState, training: bool = True) -> Tensor:
    """Network output for the (optionally perturbed) anchor input, in target units."""
    out = unet_forward(dgp.spec, dgp.params, Tensor(perturbed_input(dgp, training)))
    return out if dgp.output_scale == 1.0 else out * dgp.output_scale


def set_anchor(dgp: DGPState, anchor: np.ndarray, scale: float = 1.0):
    """Fix the network input to ``anchor / scale``; outputs are multiplied by ``scale``."""
    if not (np.isfinite(scale) and scale > 0):
        raise ContractError("anchor scale must be positive and finite")
    anchor = np.asarray(anchor) / scale
    if anchor.ndim == 2:
        anchor = anchor[None]
    dt = next(iter(dgp.params.values())).dtype
    if not dgp.spec.complex and np.iscomplexobj(anchor):
        raise ContractError("real network cannot take a complex anchor")
    dgp.anchor = anchor.astype(dt)
    dgp.output_scale = float(scale)


def pretrain_autoencoder(
    dgp: DGPState,
    target: np.ndarray,
    iterations: int = 100,
    lr: float = 1e-3,
    training: bool = True,
    scale: float = 1.0,
) -> DGPState:
    """Fit the network to reproduce ``target`` from ``target`` (plus input noise).

    The anchor is set to ``target / scale`` and the network is fitted in
    those units, so ``generate`` reproduces ``target``. The loss is the mean
    squared modulus of the output error; the state is updated in place and
    returned.
    """
    target = np.asarray(target)
    if not np.all(np.isfinite(target)):
        raise ContractError("pretraining target must be finite")
    set_anchor(dgp, target, scale)
    tgt = dgp.anchor
    if dgp.spec.final_activation == "softplus" and "head.bias" in dgp.params:
        # start each output channel at its mean; from softplus(0) ~ 0.69 the
        # first updates all push downward together and saturate the head
        mean = np.maximum(tgt.reshape(tgt.shape[0], -1).mean(axis=1), 1e-3)
        b = dgp.params["head.bias"]
        b.data = np.log(np.expm1(mean)).astype(b.data.dtype).reshape(b.data.shape)
    opt = Adam(dgp.parameters(), lr=lr)
    for it in range(iterations):
        opt.zero_grad()
        out = unet_forward(dgp.spec, dgp.params, Tensor(perturbed_input(dgp, training)))
        loss = T.abs2(out - tgt).mean()
        lv = float(loss.item())
        if not np.isfinite(lv):
            raise DivergenceError(f"autoencoder pretraining diverged at iteration {it} (loss={lv})")
        loss.backward()
        opt.step()
        dgp.history.append(lv)
    return dgp


def relative_error(dgp: DGPState, target: np.ndarray) -> float:
    with T.no_grad():
        out = generate(dgp, training=False).data
    target = np.asarray(target).reshape(out.shape)
    return float(np.linalg.norm(out - target) / np.linalg.norm(target))


def pack_dgp(dgp: DGPState, prefix: str = "", sections: dict | None = None) -> tuple[dict, dict]:
    """Metadata and named arrays describing ``dgp`` (weights, anchor, noise stream)."""
    sections = {} if sections is None else sections
    for name, p in dgp.params.items():
        sections[f"{prefix}param/{name}"] = p.data
    if dgp.anchor is not None:
        sections[f"{prefix}anchor"] = dgp.anchor
    meta = {
        "spec": asdict(dgp.spec),
        "noise_sigma": dgp.noise_sigma,
        "rng": dgp.rng.bit_generator.state,
        "history": list(dgp.history),
        "names": list(dgp.params),
        "output_scale": dgp.output_scale,
    }
    return meta, sections


def unpack_dgp(meta: dict, sections: dict, prefix: str = "") -> DGPState:
    params = {n: Tensor(sections[f"{prefix}param/{n}"], requires_grad=True) for n in meta["names"]}
    bg = getattr(np.random, meta["rng"]["bit_generator"])()
    bg.state = meta["rng"]
    return DGPState(
        UNetSpec(**meta["spec"]),
        params,
        sections.get(f"{prefix}anchor"),
        float(meta["noise_sigma"]),
        np.random.Generator(bg),
        list(meta["history"]),
        float(meta.get("output_scale", 1.0)),
    )


def save_dgp(dgp: DGPState, path, provenance: dict | None = None):
    meta, sections = pack_dgp(dgp)
    meta["kind"] = "dgp-checkpoint"
    if provenance:
        meta["provenance"] = provenance
    Path(path).write_bytes(dumps(meta, sections))


def load_dgp(path) -> DGPState:
    c = loads(Path(path).read_bytes())
    if c.metadata.get("kind") != "dgp-checkpoint":
        raise ContractError(f"{path} is not a generator checkpoint")
    return unpack_dgp(c.metadata, c.sections)
