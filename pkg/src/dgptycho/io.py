"""Reading and writing 4D datasets in the binary container format."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .container import dumps, loads
from .errors import DataError
from .physics import ObjectVolume, ScanGeometry
from .simdata import Dataset4D

KNOWN_SECTIONS = ("intensities", "positions", "ground_truth", "true_probe")
UNITS = {
    "intensities": "counts",
    "positions": "angstrom",
    "energy": "keV",
    "aperture": "mrad",
    "defocus": "angstrom",
    "c3": "mm",
    "dose": "electrons/angstrom^2",
}


def dataset_to_bytes(ds: Dataset4D, provenance: dict | None = None) -> bytes:
    geo = ds.geometry
    meta = {
        "kind": "dataset",
        "energy": float(ds.energy),
        "aperture": float(ds.aperture),
        "defocus": float(ds.defocus),
        "c3": float(ds.c3),
        # JSON has no infinity; null marks noiseless data
        "dose": None if np.isinf(ds.dose) else float(ds.dose),
        "seed": int(ds.seed),
        "geometry": {
            "sampling": list(geo.sampling),
            "detector_shape": list(geo.detector_shape),
            "energy": float(geo.energy),
            "scan_shape": None if geo.scan_shape is None else list(geo.scan_shape),
        },
        "metadata": dict(ds.metadata, **({"provenance": provenance} if provenance else {})),
        "units": UNITS,
        "shapes": {"intensities": list(ds.intensities.shape)},
    }
    sections = {
        "intensities": np.asarray(ds.intensities, dtype=np.float32),
        "positions": np.asarray(geo.positions, dtype=np.float64),
    }
    if ds.ground_truth is not None:
        gt = ds.ground_truth
        meta["ground_truth"] = {"kind": gt.kind, "slice_thickness": gt.slice_thickness, "sampling": list(gt.sampling)}
        sections["ground_truth"] = gt.data
    if ds.true_probe is not None:
        sections["true_probe"] = ds.true_probe
    for name, arr in ds.extra_sections.items():
        if name in sections:
            raise DataError(f"extra section {name!r} clashes with a known section")
        sections[name] = arr
    return dumps(meta, sections)


def dataset_from_bytes(data: bytes) -> Dataset4D:
    c = loads(data)
    meta, sec = c.metadata, c.sections
    if meta.get("kind") != "dataset":
        raise DataError("container does not hold a dataset")
    for name in ("intensities", "positions"):
        if name not in sec:
            raise DataError(f"dataset is missing the {name!r} section")
    g = meta["geometry"]
    geo = ScanGeometry(
        sec["positions"],
        tuple(g["sampling"]),
        tuple(g["detector_shape"]),
        g["energy"],
        None if g["scan_shape"] is None else tuple(g["scan_shape"]),
    )
    gt = None
    if "ground_truth" in sec:
        m = meta["ground_truth"]
        gt = ObjectVolume(sec["ground_truth"], m["kind"], m["slice_thickness"], tuple(m["sampling"]))
    extra = {k: v for k, v in sec.items() if k not in KNOWN_SECTIONS}
    ds = Dataset4D(
        intensities=sec["intensities"],
        geometry=geo,
        energy=meta["energy"],
        aperture=meta["aperture"],
        defocus=meta["defocus"],
        c3=meta["c3"],
        dose=np.inf if meta["dose"] is None else meta["dose"],
        seed=meta["seed"],
        ground_truth=gt,
        true_probe=sec.get("true_probe"),
        metadata=meta.get("metadata", {}),
        extra_sections=extra,
    )
    if ds.intensities.shape[0] != geo.num_positions:
        raise DataError("number of patterns and positions differ")
    return ds


def write_dataset(ds: Dataset4D, path, provenance: dict | None = None):
    Path(path).write_bytes(dataset_to_bytes(ds, provenance))


def read_dataset(path) -> Dataset4D:
    return dataset_from_bytes(Path(path).read_bytes())
