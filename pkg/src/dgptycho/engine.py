"""
Reconstruction engine.

Two parameterisations share one loop:

* ``pixelated``: object and probe are arrays optimised directly;
* ``dgp``: object and probe are the outputs of U-Net generators whose
  weights are optimised, the generators having first been fitted as
  autoencoders to a short pixelated reconstruction.

Each iteration draws one batch of training positions, evaluates the
multislice forward model, forms fidelity plus regulariser losses and takes
one Adam step for each enabled parameter group (object, probe, positions).
Measured intensities are rescaled internally so that the probe carries a
mean intensity of one per pixel; :meth:`ReconState.probe_array` undoes this.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import dumps, loads
from .dgp import DGPState, UNetSpec, build_unet, generate, pack_dgp, pretrain_autoencoder, set_anchor, unpack_dgp
from .errors import ConfigurationError, ContractError, DivergenceError, ShapeError
from .losses import LossWeights, fidelity_loss, orthogonalize_modes, surface_zero_loss, tie_slices, tv_loss
from .optim import Adam
from .physics import (
    OBJECT_KINDS,
    ObjectVolume,
    ProbeState,
    check_patches_inside,
    forward_intensities,
    interaction_constant,
    make_ideal_probe,
    make_propagator,
    to_transmission,
)
from .simdata import Dataset4D, probe_diameter
from .tensor import Tensor

GROUPS = ("object", "probe", "positions")
DEFAULT_LR = {
    "pixelated": {"object": 1e-2, "probe": 1e-2, "positions": 1e-1},
    "dgp": {"object": 1e-3, "probe": 1e-4, "positions": 1e-1},
}
MAX_ROLLBACKS = 3
# relative intensity of each extra probe mode at initialisation
EXTRA_MODE_WEIGHT = 0.1


@dataclass
class Stage:
    """One block of iterations with fixed constraints, loss weights and rates.

    ``loss`` of None inherits the configuration's loss weights. ``lr`` maps
    group names to learning rates overriding the mode defaults; ``lr_decay``
    multiplies every rate by this factor after each iteration of the stage.
    Pixelated object rates are in radians of phase for every object kind
    (potential pixels are converted with the interaction constant).
    """

    iterations: int
    tie_slices: bool = False
    orthogonalize: bool = True
    loss: LossWeights | None = None
    lr: dict = field(default_factory=dict)
    lr_decay: float = 1.0
    optimize_object: bool = True
    optimize_probe: bool = True
    optimize_positions: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if int(self.iterations) <= 0:
            raise ConfigurationError("stage iterations must be positive")
        self.iterations = int(self.iterations)
        unknown = set(self.lr) - set(GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups in lr: {sorted(unknown)}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")


@dataclass
class ReconConfig:
    mode: str = "pixelated"
    object_kind: str = "phase"
    num_slices: int = 1
    slice_thickness: float = 1.0
    num_modes: int = 1
    stages: list[Stage] = field(default_factory=lambda: [Stage(100)])
    loss: LossWeights = field(default_factory=LossWeights)
    batch_size: int | None = None
    validation_fraction: float = 0.0
    seed: int = 0
    snapshot_every: int = 10
    precision: str = "single"
    band_limit: bool = False
    # generator networks
    object_depth: int = 3
    object_filters: int = 16
    probe_depth: int = 3
    probe_filters: int = 16
    noise_sigma: float = 0.025
    # automatic pre-training for dgp mode
    pretrain_iterations: int = 50
    autoencoder_iterations: int = 200
    autoencoder_lr: float = 1e-3
    # maximum position drift in pixels; None uses the probe radius
    position_guard: float | None = None

    def __post_init__(self):
        self.stages = [Stage(**s) if isinstance(s, dict) else s for s in self.stages]
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.mode not in ("pixelated", "dgp"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.object_kind not in OBJECT_KINDS:
            raise ConfigurationError(f"unknown object kind {self.object_kind!r}")
        if not 0 <= self.validation_fraction <= 0.5:
            raise ConfigurationError("validation fraction must lie in [0, 0.5]")
        if self.num_slices < 1 or self.num_modes < 1:
            raise ConfigurationError("num_slices and num_modes must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.precision not in ("single", "double"):
            raise ConfigurationError("precision must be 'single' or 'double'")
        if self.snapshot_every < 1:
            raise ConfigurationError("snapshot_every must be positive")

    def stage_loss(self, stage: Stage) -> LossWeights:
        return stage.loss if stage.loss is not None else self.loss

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    @property
    def real_dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    @property
    def complex_dtype(self):
        return np.complex64 if self.precision == "single" else np.complex128

    def object_spec(self) -> UNetSpec:
        return UNetSpec(
            depth=self.object_depth,
            filters=self.object_filters,
            channels=self.num_slices,
            complex=self.object_kind == "complex",
            final_activation="softplus" if self.object_kind == "potential" else "identity",
        )

    def probe_spec(self) -> UNetSpec:
        return UNetSpec(depth=self.probe_depth, filters=self.probe_filters, channels=self.num_modes, complex=True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ReconConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown recon config keys: {sorted(unknown)}")
        d = dict(d)
        lnames = {f.name for f in fields(LossWeights)}
        if isinstance(d.get("loss"), dict) and set(d["loss"]) - lnames:
            raise ConfigurationError(f"unknown loss keys: {sorted(set(d['loss']) - lnames)}")
        if "stages" in d:
            stages = []
            for s in d["stages"]:
                if isinstance(s, dict):
                    snames = {f.name for f in fields(Stage)}
                    bad = set(s) - snames
                    if bad:
                        raise ConfigurationError(f"unknown stage keys: {sorted(bad)}")
                    s = dict(s)
                    if isinstance(s.get("loss"), dict):
                        bad = set(s["loss"]) - lnames
                        if bad:
                            raise ConfigurationError(f"unknown loss keys: {sorted(bad)}")
                    s = Stage(**s)
                stages.append(s)
            d["stages"] = stages
        return cls(**d)


def split_validation(num_positions: int, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random split of position indices into sorted train and validation sets.

    The validation set holds ``round(fraction * N)`` positions.
    """
    if not 0 <= fraction <= 0.5:
        raise ContractError("validation fraction must lie in [0, 0.5]")
    n_val = int(round(fraction * num_positions))
    perm = np.random.default_rng([seed, 7]).permutation(num_positions)
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


@dataclass
class ReconState:
    """Everything needed to continue a reconstruction bit-for-bit."""

    config: ReconConfig
    energy: float
    sampling: tuple[float, float]
    intensity_scale: float
    positions: Tensor
    initial_positions: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    optimizers: dict[str, Adam]
    object_param: Tensor | None = None
    probe_param: Tensor | None = None
    object_dgp: DGPState | None = None
    probe_dgp: DGPState | None = None
    iteration: int = 0
    elapsed: float = 0.0
    history: list[dict] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    cursor: int = 0
    lr_scale: float = 1.0
    rollbacks: int = 0
    best: dict | None = None
    pretrain_iterations: int = 0

    @property
    def mode(self) -> str:
        return self.config.mode

    def object_array(self) -> np.ndarray:
        """Current object ``[Z, Y, X]`` in the units of its kind (noiseless for DGPs)."""
        if self.object_dgp is not None:
            with T.no_grad():
                return generate(self.object_dgp, training=False).data.copy()
        return self.object_param.data.copy()

    def probe_array(self, normalized: bool = False) -> np.ndarray:
        """Current probe modes ``[M, Ry, Rx]``, in data units unless ``normalized``."""
        if self.probe_dgp is not None:
            with T.no_grad():
                p = generate(self.probe_dgp, training=False).data.copy()
        else:
            p = self.probe_param.data.copy()
        return p if normalized else p / np.sqrt(self.intensity_scale)

    def object_volume(self, best: bool = False) -> ObjectVolume:
        data = self.best["object"] if best and self.best is not None else self.object_array()
        return ObjectVolume(data, self.config.object_kind, self.config.slice_thickness, self.sampling)

    def projected_phase(self, best: bool = False) -> np.ndarray:
        return self.object_volume(best).projected_phase(self.energy)

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([h["train_loss"] for h in self.history])

    @property
    def val_losses(self) -> np.ndarray:
        return np.array([np.nan if h["val_loss"] is None else h["val_loss"] for h in self.history])

    def clone(self) -> ReconState:
        return copy.deepcopy(self)


def _initial_probe(config: ReconConfig, dataset: Dataset4D) -> np.ndarray:
    geo = dataset.geometry
    shape = tuple(dataset.detector_shape)
    base = make_ideal_probe(
        dataset.energy, dataset.aperture, shape, geo.sampling, dataset.defocus, dataset.c3, dtype=np.complex128
    ).modes[0]
    modes = [base]
    ry, rx = shape
    yy = (np.arange(ry) - ry // 2)[:, None] / ry
    xx = (np.arange(rx) - rx // 2)[None, :] / rx
    powers = [(a, b) for n in range(1, 8) for a in range(n + 1) for b in [n - a]]
    for m in range(1, config.num_modes):
        a, b = powers[(m - 1) % len(powers)]
        extra = base * yy**a * xx**b
        extra *= np.sqrt(EXTRA_MODE_WEIGHT) / np.linalg.norm(extra)
        modes.append(extra)
    modes = np.stack(modes)
    if config.num_modes > 1:
        modes = orthogonalize_modes(modes)
    modes *= np.sqrt(ry * rx / np.sum(np.abs(modes) ** 2))
    return modes.astype(config.complex_dtype)


def _initial_object(config: ReconConfig, object_shape) -> np.ndarray:
    shape = (config.num_slices,) + tuple(object_shape)
    if config.object_kind == "complex":
        return np.ones(shape, dtype=config.complex_dtype)
    return np.zeros(shape, dtype=config.real_dtype)


def _object_shape(dataset: Dataset4D, object_shape=None) -> tuple[int, int]:
    if object_shape is not None:
        return tuple(int(s) for s in object_shape)
    if dataset.ground_truth is not None:
        return tuple(dataset.ground_truth.data.shape[-2:])
    if "object_shape" in dataset.metadata:
        return tuple(int(s) for s in dataset.metadata["object_shape"])
    raise ShapeError("object shape unknown: pass object_shape or store it in the dataset metadata")


def init_state(
    config: ReconConfig,
    dataset: Dataset4D,
    object_dgp: DGPState | None = None,
    probe_dgp: DGPState | None = None,
    object_shape=None,
) -> ReconState:
    """Fresh state: ideal-probe initial guess, flat object, zero iteration count."""
    shape = _object_shape(dataset, object_shape)
    geo = dataset.geometry
    pos = geo.positions_px
    check_patches_inside(pos, dataset.detector_shape, shape)
    sums = dataset.intensities.reshape(dataset.num_positions, -1).sum(axis=1, dtype=np.float64)
    if not np.all(np.isfinite(sums)) or sums.mean() <= 0:
        raise ContractError("dataset intensities must be finite with positive total")
    ry, rx = dataset.detector_shape
    scale = float(ry * rx / sums.mean())
    train, val = split_validation(dataset.num_positions, config.validation_fraction, config.seed)
    rdt = config.real_dtype
    positions = Tensor(pos.astype(rdt))
    state = ReconState(
        config=config,
        energy=float(dataset.energy),
        sampling=tuple(geo.sampling),
        intensity_scale=scale,
        positions=positions,
        initial_positions=pos.astype(rdt),
        train_idx=train,
        val_idx=val,
        optimizers={},
        rng=np.random.default_rng([config.seed, 2]),
    )
    if config.mode == "pixelated":
        state.object_param = Tensor(_initial_object(config, shape))
        state.probe_param = Tensor(_initial_probe(config, dataset))
        groups = {"object": [state.object_param], "probe": [state.probe_param]}
    else:
        if object_dgp is None or probe_dgp is None:
            raise ContractError("dgp mode needs object and probe generators (see pretrain_generators)")
        state.object_dgp, state.probe_dgp = object_dgp, probe_dgp
        groups = {"object": object_dgp.parameters(), "probe": probe_dgp.parameters()}
    groups["positions"] = [state.positions]
    lrs = DEFAULT_LR[config.mode]
    state.optimizers = {g: Adam(p, lr=lrs[g]) for g, p in groups.items()}
    return state


class Reconstructor:
    """Runs the stage plan of ``config`` on ``dataset``, starting from ``state``."""

    def __init__(self, config: ReconConfig, dataset: Dataset4D, state: ReconState | None = None, **init_kw):
        self.config = config
        self.dataset = dataset
        self.state = state if state is not None else init_state(config, dataset, **init_kw)
        self.state.config = config
        rdt = config.real_dtype
        corner = np.fft.ifftshift(np.asarray(dataset.intensities, dtype=np.float64), axes=(-2, -1))
        self.data = (corner * self.state.intensity_scale).astype(rdt)
        self.propagator = None
        if config.num_slices > 1:
            self.propagator = make_propagator(
                config.slice_thickness,
                dataset.energy,
                tuple(dataset.detector_shape),
                dataset.geometry.sampling,
                config.band_limit,
                config.complex_dtype,
            ).array
        self.guard = config.position_guard
        if self.guard is None:
            p = ProbeState(_initial_probe(config, dataset), dataset.energy, dataset.geometry.sampling, dataset.aperture)
            self.guard = probe_diameter(p) / 2 / min(dataset.geometry.sampling)
        # positions whose rounded window origin stays inside the object
        st = self.state
        oshape = (st.object_param if st.object_param is not None else st.object_dgp.anchor).shape[-2:]
        win = np.asarray(dataset.detector_shape)
        self.position_bounds = (win // 2 - 0.499, np.asarray(oshape) - win + win // 2 + 0.499)
        self._good = None

    # -- parameter views ---------------------------------------------------

    def stage_at(self, iteration: int) -> tuple[Stage, int]:
        start = 0
        for s in self.config.stages:
            if iteration < start + s.iterations:
                return s, iteration - start
            start += s.iterations
        raise ContractError("iteration beyond the stage plan")

    def object_tensor(self, stage: Stage, training: bool) -> Tensor:
        st = self.state
        if st.object_dgp is not None:
            if training and stage.optimize_object:
                out = generate(st.object_dgp, training=True)
            else:
                with T.no_grad():
                    out = generate(st.object_dgp, training=training)
            if stage.tie_slices and out.shape[0] > 1:
                out = T.mean(out, axis=0, keepdims=True) + np.zeros(out.shape, dtype=out.dtype)
            return out
        st.object_param.requires_grad = training and stage.optimize_object
        return st.object_param

    def probe_tensor(self, stage: Stage, training: bool) -> Tensor:
        st = self.state
        if st.probe_dgp is not None:
            if training and stage.optimize_probe:
                out = generate(st.probe_dgp, training=True)
            else:
                with T.no_grad():
                    out = generate(st.probe_dgp, training=training)
            if stage.orthogonalize and out.shape[0] > 1:
                # projection in the forward pass, identity in the backward pass
                out = out + (orthogonalize_modes(out.data) - out.data)
            return out
        st.probe_param.requires_grad = training and stage.optimize_probe
        return st.probe_param

    def loss_terms(self, stage: Stage, batch: np.ndarray, training: bool = True) -> tuple[Tensor, Tensor]:
        """``(total, fidelity)`` for ``batch`` with the current parameters."""
        st = self.state
        obj = self.object_tensor(stage, training)
        probe = self.probe_tensor(stage, training)
        st.positions.requires_grad = training and stage.optimize_positions
        trans = to_transmission(obj, self.config.object_kind, st.energy)
        pred = forward_intensities(probe, trans, st.positions, batch, self.propagator)
        w = self.config.stage_loss(stage)
        fid = fidelity_loss(pred, self.data[batch], w.fidelity)
        total = fid
        if w.lambda_xy or w.lambda_z:
            total = total + tv_loss(obj, w.lambda_xy, w.lambda_z)
        if w.lambda_surf and obj.shape[0] > 1:
            total = total + surface_zero_loss(obj, w.lambda_surf)
        return total, fid

    def validation_loss(self, stage: Stage) -> float | None:
        if len(self.state.val_idx) == 0:
            return None
        with T.no_grad():
            _, fid = self.loss_terms(stage, self.state.val_idx, training=False)
        return float(fid.item())

    # -- iteration -----------------------------------------------------------

    def _next_batch(self) -> np.ndarray:
        st = self.state
        train = st.train_idx
        bs = len(train) if self.config.batch_size is None else min(self.config.batch_size, len(train))
        if st.cursor + bs > len(st.order):
            st.order = train[st.rng.permutation(len(train))]
            st.cursor = 0
        batch = st.order[st.cursor : st.cursor + bs]
        st.cursor += bs
        return np.sort(batch)

    def _apply_rates(self, stage: Stage, k: int):
        lrs = DEFAULT_LR[self.config.mode]
        for g, opt in self.state.optimizers.items():
            lr = stage.lr.get(g, lrs[g])
            if g == "object" and self.config.mode == "pixelated" and self.config.object_kind == "potential":
                # pixelated object rates are radians of phase per step
                lr = lr / interaction_constant(self.state.energy)
            opt.lr = lr * self.state.lr_scale * stage.lr_decay**k

    def _project(self, stage: Stage):
        st = self.state
        if st.object_param is not None and stage.tie_slices and st.object_param.shape[0] > 1:
            st.object_param.data = tie_slices(st.object_param.data)
        if st.probe_param is not None and stage.orthogonalize and st.probe_param.shape[0] > 1:
            st.probe_param.data = orthogonalize_modes(st.probe_param.data).astype(st.probe_param.dtype)
        if stage.optimize_positions:
            d = st.positions.data - st.initial_positions
            r = np.sqrt(np.sum(d**2, axis=1, keepdims=True))
            lim = 0.999 * self.guard
            over = r > lim
            if np.any(over):
                d = np.where(over, d * (lim / np.maximum(r, 1e-30)), d)
                st.positions.data = (st.initial_positions + d).astype(st.positions.dtype)
            lo, hi = self.position_bounds
            st.positions.data = np.clip(st.positions.data, lo, hi).astype(st.positions.dtype)

    def step(self) -> dict:
        st = self.state
        stage, k = self.stage_at(st.iteration)
        t0 = time.perf_counter()
        self._apply_rates(stage, k)
        for opt in st.optimizers.values():
            opt.zero_grad()
        batch = self._next_batch()
        total, fid = self.loss_terms(stage, batch, training=True)
        value = float(total.item())
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at iteration {st.iteration}")
        total.backward()
        enabled = {"object": stage.optimize_object, "probe": stage.optimize_probe, "positions": stage.optimize_positions}
        for g, opt in st.optimizers.items():
            if enabled[g]:
                opt.step()
        self._project(stage)
        val = self.validation_loss(stage)
        st.elapsed += time.perf_counter() - t0
        st.iteration += 1
        rec = {"iteration": st.iteration, "seconds": st.elapsed, "train_loss": value, "val_loss": val}
        st.history.append(rec)
        if val is not None and (st.best is None or val < st.best["val_loss"]):
            st.best = {
                "iteration": st.iteration,
                "val_loss": val,
                "object": st.object_array(),
                "probe": st.probe_array(),
                "positions": st.positions.data.copy(),
            }
        return rec

    def run(self, iterations: int | None = None, callback=None) -> ReconState:
        """Advance through the stage plan.

        ``iterations`` limits how many iterations this call performs (the
        plan's end is never exceeded). ``callback(state)`` is invoked after
        every iteration. Non-finite losses roll back to the last in-memory
        snapshot and halve the learning rates, at most three times.
        """
        end = self.config.total_iterations
        if iterations is not None:
            end = min(end, self.state.iteration + int(iterations))
        self._good = self.state.clone()
        while self.state.iteration < end:
            try:
                self.step()
            except DivergenceError as exc:
                if self._good.rollbacks >= MAX_ROLLBACKS:
                    err = DivergenceError(f"{exc}; gave up after {MAX_ROLLBACKS} rollbacks")
                    err.state = self._good
                    raise err from exc
                self.state = self._good.clone()
                self.state.rollbacks += 1
                self.state.lr_scale *= 0.5
                self._good = self.state.clone()
                continue
            if callback is not None:
                callback(self.state)
            if self.state.iteration % self.config.snapshot_every == 0:
                self._good = self.state.clone()
        return self.state


def run_pixelated(config: ReconConfig, dataset: Dataset4D, state: ReconState | None = None, callback=None, **kw) -> ReconState:
    if config.mode != "pixelated":
        config = copy.deepcopy(config)
        config.mode = "pixelated"
    return Reconstructor(config, dataset, state, **kw).run(callback=callback)


def object_scale(kind: str, obj: np.ndarray) -> float:
    """Generator output scale for an object estimate.

    Potentials in V*Angstrom reach tens to hundreds, far outside the O(1)
    range the networks are initialised for; they are handled divided by
    their largest magnitude. Phase and transmission objects are already O(1).
    """
    if kind != "potential":
        return 1.0
    m = float(np.max(np.abs(obj)))
    return m if np.isfinite(m) and m > 0 else 1.0


def potential_target(obj: np.ndarray) -> np.ndarray:
    """Non-negative generator target from a pixelated potential.

    The pixelated estimate carries an unobservable constant offset, so the
    median (the background level) is removed and the remaining negative
    values, which a softplus output cannot represent, are clipped to zero.
    """
    return np.maximum(obj - np.median(obj), 0).astype(obj.dtype)


def pretrain_generators(config: ReconConfig, dataset: Dataset4D, source: ReconState | None = None, object_shape=None):
    """Fit object and probe generators to a short pixelated reconstruction.

    Returns ``(object_dgp, probe_dgp, source_state)``. When ``source`` is
    None a pixelated run of ``config.pretrain_iterations`` iterations (with
    tied slices for multislice objects) provides the targets.
    """
    if source is None:
        pcfg = copy.deepcopy(config)
        pcfg.mode = "pixelated"
        pcfg.validation_fraction = config.validation_fraction
        pcfg.stages = [Stage(config.pretrain_iterations, tie_slices=config.num_slices > 1)]
        source = Reconstructor(pcfg, dataset, object_shape=object_shape).run()
    dt = config.real_dtype
    odgp = build_unet(config.object_spec(), seed=config.seed, dtype=dt, noise_sigma=config.noise_sigma)
    pdgp = build_unet(config.probe_spec(), seed=config.seed + 1, dtype=dt, noise_sigma=config.noise_sigma)
    obj = source.object_array()
    probe = source.probe_array(normalized=True)
    if config.object_kind == "potential":
        obj = potential_target(obj)
    oscale = object_scale(config.object_kind, obj)
    if config.autoencoder_iterations > 0:
        pretrain_autoencoder(odgp, obj, config.autoencoder_iterations, config.autoencoder_lr, scale=oscale)
        pretrain_autoencoder(pdgp, probe, config.autoencoder_iterations, config.autoencoder_lr)
    else:
        set_anchor(odgp, obj, oscale)
        set_anchor(pdgp, probe)
    return odgp, pdgp, source


def run_dgp(
    config: ReconConfig,
    dataset: Dataset4D,
    object_dgp: DGPState | None = None,
    probe_dgp: DGPState | None = None,
    state: ReconState | None = None,
    callback=None,
    object_shape=None,
) -> ReconState:
    """DGP reconstruction, pre-training the generators first when not supplied."""
    if config.mode != "dgp":
        config = copy.deepcopy(config)
        config.mode = "dgp"
    pre_iters = 0
    if state is None and (object_dgp is None or probe_dgp is None):
        object_dgp, probe_dgp, src = pretrain_generators(config, dataset, object_shape=object_shape)
        pre_iters = src.iteration
    rec = Reconstructor(config, dataset, state, object_dgp=object_dgp, probe_dgp=probe_dgp, object_shape=object_shape) if state is None else Reconstructor(config, dataset, state)
    if state is None:
        rec.state.pretrain_iterations = pre_iters
    return rec.run(callback=callback)


# -- persistence -----------------------------------------------------------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def snapshot_bytes(state: ReconState, timing: bool = False, provenance: dict | None = None) -> bytes:
    """Serialize a reconstruction state.

    Wall-clock timings are left out unless ``timing`` is set, so that equal
    configurations and seeds give byte-identical snapshots.
    """
    history = state.history if timing else [{k: v for k, v in h.items() if k != "seconds"} for h in state.history]
    sec: dict[str, np.ndarray] = {
        "positions": state.positions.data,
        "initial_positions": state.initial_positions,
        "train_idx": state.train_idx.astype(np.int64),
        "val_idx": state.val_idx.astype(np.int64),
        "order": state.order.astype(np.int64),
    }
    meta = {
        "kind": "recon-snapshot",
        "config": state.config.to_dict(),
        "energy": state.energy,
        "sampling": list(state.sampling),
        "intensity_scale": state.intensity_scale,
        "iteration": state.iteration,
        "elapsed": state.elapsed if timing else 0.0,
        "history": history,
        "rng": _rng_state(state.rng),
        "cursor": state.cursor,
        "lr_scale": state.lr_scale,
        "rollbacks": state.rollbacks,
        "pretrain_iterations": state.pretrain_iterations,
        "optimizers": {},
        "provenance": dict(provenance or {"seed": state.config.seed}),
    }
    if state.object_param is not None:
        sec["object"] = state.object_param.data
        sec["probe"] = state.probe_param.data
    else:
        meta["object_dgp"], _ = pack_dgp(state.object_dgp, "object_dgp/", sec)
        meta["probe_dgp"], _ = pack_dgp(state.probe_dgp, "probe_dgp/", sec)
    for g in GROUPS:
        opt = state.optimizers[g]
        meta["optimizers"][g] = {"t": opt.t, "lr": opt.lr, "betas": [opt.beta1, opt.beta2], "eps": opt.eps, "n": len(opt.m)}
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            sec[f"opt/{g}/m/{i}"] = m
            sec[f"opt/{g}/v/{i}"] = v
    if state.best is not None:
        meta["best"] = {"iteration": state.best["iteration"], "val_loss": state.best["val_loss"]}
        for key in ("object", "probe", "positions"):
            sec[f"best/{key}"] = state.best[key]
    return dumps(meta, sec)


def state_from_bytes(data: bytes) -> ReconState:
    c = loads(data)
    meta, sec = c.metadata, c.sections
    if meta.get("kind") != "recon-snapshot":
        raise ContractError("container does not hold a reconstruction snapshot")
    config = ReconConfig.from_dict(meta["config"])
    state = ReconState(
        config=config,
        energy=float(meta["energy"]),
        sampling=tuple(meta["sampling"]),
        intensity_scale=float(meta["intensity_scale"]),
        positions=Tensor(sec["positions"]),
        initial_positions=sec["initial_positions"],
        train_idx=sec["train_idx"],
        val_idx=sec["val_idx"],
        optimizers={},
        iteration=int(meta["iteration"]),
        elapsed=float(meta["elapsed"]),
        history=list(meta["history"]),
        rng=_set_rng(meta["rng"]),
        order=sec["order"],
        cursor=int(meta["cursor"]),
        lr_scale=float(meta["lr_scale"]),
        rollbacks=int(meta["rollbacks"]),
        pretrain_iterations=int(meta["pretrain_iterations"]),
    )
    if "object" in sec:
        state.object_param = Tensor(sec["object"])
        state.probe_param = Tensor(sec["probe"])
        groups = {"object": [state.object_param], "probe": [state.probe_param]}
    else:
        state.object_dgp = unpack_dgp(meta["object_dgp"], sec, "object_dgp/")
        state.probe_dgp = unpack_dgp(meta["probe_dgp"], sec, "probe_dgp/")
        groups = {"object": state.object_dgp.parameters(), "probe": state.probe_dgp.parameters()}
    groups["positions"] = [state.positions]
    for g, om in meta["optimizers"].items():
        opt = Adam(groups[g], lr=om["lr"], betas=tuple(om["betas"]), eps=om["eps"])
        opt.load_state_dict(
            {
                "t": om["t"],
                "lr": om["lr"],
                "m": [sec[f"opt/{g}/m/{i}"] for i in range(om["n"])],
                "v": [sec[f"opt/{g}/v/{i}"] for i in range(om["n"])],
            }
        )
        state.optimizers[g] = opt
    if "best" in meta:
        state.best = dict(meta["best"])
        for key in ("object", "probe", "positions"):
            state.best[key] = sec[f"best/{key}"]
    return state


def snapshot(state: ReconState, path, timing: bool = False, provenance: dict | None = None):
    Path(path).write_bytes(snapshot_bytes(state, timing, provenance))


def restore(path) -> ReconState:
    return state_from_bytes(Path(path).read_bytes())


def write_history_csv(state: ReconState, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "seconds", "train_loss", "val_loss"])
        for h in state.history:
            w.writerow([h["iteration"], f"{h['seconds']:.6f}" if "seconds" in h else "", repr(h["train_loss"]), "" if h["val_loss"] is None else repr(h["val_loss"])])
