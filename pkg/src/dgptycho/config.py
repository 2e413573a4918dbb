"""
Run configuration documents (YAML or JSON).

A document has four sections::

    simulation:   phantom and imaging parameters for ``simulate``
    recon:        every ReconConfig field except ``loss``
    loss:         default loss weights, inherited by stages without their own
    export:       image rendering defaults

Every field has a default and unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .engine import ReconConfig
from .errors import ConfigurationError
from .losses import LossWeights


@dataclass
class SimulationConfig:
    phantom: str = "nanoparticle"
    size: list = field(default_factory=lambda: [64, 64])
    sampling: float = 0.1
    energy: float = 200.0
    aperture: float = 25.0
    defocus: float = 0.0
    c3: float = 0.0
    detector: list = field(default_factory=lambda: [32, 32])
    scan_shape: list = field(default_factory=lambda: [16, 16])
    # raster step in pixels; None spreads the scan over the whole object
    scan_step: float | None = None
    # electrons per square Angstrom; None means noiseless
    dose: float | None = None
    seed: int = 0
    # nanoparticle
    radius: float = 2.5
    roughness: float = 0.02
    peak_phase: float = 1.5
    # bilayer
    layer_spacing: float = 7.0
    twist: float = 3.0
    num_slices: int = 16
    slice_thickness: float = 1.0
    # lattice
    lattice_spacing: float = 2.0

    def __post_init__(self):
        if self.phantom not in ("nanoparticle", "bilayer", "lattice"):
            raise ConfigurationError(f"unknown phantom {self.phantom!r}")
        self.size = [int(v) for v in self.size]
        self.detector = [int(v) for v in self.detector]
        self.scan_shape = [int(v) for v in self.scan_shape]
        if self.dose is not None and not self.dose > 0:
            raise ConfigurationError("dose must be positive (or null for noiseless data)")


@dataclass
class ExportConfig:
    percentile_low: float = 1.0
    percentile_high: float = 99.0

    def __post_init__(self):
        if not 0 <= self.percentile_low < self.percentile_high <= 100:
            raise ConfigurationError("need 0 <= percentile_low < percentile_high <= 100")


@dataclass
class RunConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def to_dict(self) -> dict:
        rec = self.recon.to_dict()
        loss = rec.pop("loss")
        return {
            "simulation": asdict(self.simulation),
            "recon": rec,
            "loss": loss,
            "export": asdict(self.export),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> RunConfig:
        d = {} if d is None else d
        if not isinstance(d, dict):
            raise ConfigurationError("configuration document must be a mapping")
        unknown = set(d) - {"simulation", "recon", "loss", "export"}
        if unknown:
            raise ConfigurationError(f"unknown configuration sections: {sorted(unknown)}")
        try:
            sim = _strict(SimulationConfig, d.get("simulation") or {}, "simulation")
            exp = _strict(ExportConfig, d.get("export") or {}, "export")
            rec = dict(d.get("recon") or {})
            if "loss" in rec:
                raise ConfigurationError("loss weights belong in the top-level 'loss' section")
            loss = d.get("loss") or {}
            _check_keys(LossWeights, loss, "loss")
            rec["loss"] = loss
            recon = ReconConfig.from_dict(rec)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(str(exc)) from exc
        return cls(sim, recon, exp)

    def hash(self) -> str:
        """Short SHA-256 digest of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.recon.seed, "simulation_seed": self.simulation.seed}


def _check_keys(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown keys in {where!r}: {sorted(unknown)}")


def _strict(cls, d: dict, where: str):
    _check_keys(cls, d, where)
    return cls(**d)


def dumps_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def loads_config(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from exc
    return RunConfig.from_dict(doc)


def load_config(path) -> RunConfig:
    return loads_config(Path(path).read_text())


def save_config(cfg: RunConfig, path):
    Path(path).write_text(dumps_config(cfg))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Return a copy of ``cfg`` with ``key.path=value`` overrides applied.

    Values are parsed as YAML scalars or flow collections; list elements are
    addressed by integer path components (``recon.stages.0.iterations=20``).
    """
    doc = copy.deepcopy(cfg.to_dict())
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse value in {item!r}") from exc
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        node = doc
        for i, p in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                try:
                    idx = int(p)
                    node[idx]
                except (ValueError, IndexError) as exc:
                    raise ConfigurationError(f"bad list index {p!r} in {key!r}") from exc
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                # missing keys are created here and vetted by from_dict below
                if last:
                    node[p] = value
                else:
                    if node.get(p) is None:
                        node[p] = {}
                    node = node[p]
            else:
                raise ConfigurationError(f"cannot descend into {key!r}")
    return RunConfig.from_dict(doc)
