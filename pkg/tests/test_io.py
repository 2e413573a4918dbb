import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from dgptycho.config import RunConfig, apply_overrides, dumps_config, load_config, loads_config, save_config
from dgptycho.container import dumps, loads, read_container
from dgptycho.errors import BadMagicError, ConfigurationError, ContainerError, TruncatedSectionError, VersionError
from dgptycho.io import dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset

from helpers import nanoparticle_dataset

GOLDEN = Path(__file__).parent / "data" / "golden_v1.p4ds"


def golden_contents():
    meta = {"kind": "golden", "units": {"a": "counts"}, "seed": 7}
    sections = {
        "a": np.arange(6, dtype="<f4").reshape(2, 3),
        "b": np.array([1 + 2j, -3j], dtype="<c16"),
        "scalar": np.array(5, dtype="<i8"),
    }
    return meta, sections


def hand_encoded(meta, sections):
    """Independent byte-level encoding of the container layout."""
    out = b"P4DS" + struct.pack("<I", 1)
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<Q", len(js)) + js
    for name, arr in sections.items():
        tag = arr.dtype.str.encode()
        out += struct.pack("<H", len(name)) + name.encode()
        out += struct.pack("<B", len(tag)) + tag
        out += struct.pack("<B", arr.ndim) + b"".join(struct.pack("<Q", s) for s in arr.shape)
        payload = arr.tobytes()
        out += struct.pack("<Q", len(payload)) + payload
    return out


# -- container ---------------------------------------------------------------------


def test_layout_matches_hand_encoding():
    meta, sections = golden_contents()
    assert dumps(meta, sections) == hand_encoded(meta, sections)


def test_golden_file():
    meta, sections = golden_contents()
    blob = GOLDEN.read_bytes()
    assert dumps(meta, sections) == blob
    c = read_container(GOLDEN)
    assert c.metadata == meta and c.version == 1
    for k, v in sections.items():
        assert c.sections[k].dtype == v.dtype and np.array_equal(c.sections[k], v)


@settings(max_examples=40, deadline=None)
@given(
    arrays(
        st.sampled_from([np.float32, np.float64, np.complex64, np.complex128, np.int64, np.uint8]),
        array_shapes(min_dims=0, max_dims=4, max_side=5),
    )
)
def test_round_trip_bitwise(arr):
    blob = dumps({"x": 1}, {"arr": arr})
    back = loads(blob)
    assert back.sections["arr"].dtype == arr.dtype and back.sections["arr"].shape == arr.shape
    assert back.sections["arr"].tobytes() == arr.tobytes()
    assert dumps(back.metadata, back.sections) == blob


def test_big_endian_input_stored_little_endian():
    arr = np.arange(4, dtype=">f8")
    back = loads(dumps({}, {"x": arr})).sections["x"]
    assert back.dtype == np.dtype("<f8") and np.array_equal(back, arr)


def test_distinct_errors():
    blob = dumps({"k": 1}, {"x": np.ones(3)})
    with pytest.raises(BadMagicError):
        loads(b"NOPE" + blob[4:])
    with pytest.raises(VersionError):
        loads(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(TruncatedSectionError, match="section"):
        loads(blob[:-1])
    assert issubclass(BadMagicError, VersionError)
    assert not issubclass(TruncatedSectionError, VersionError)


def test_inconsistent_section_length():
    blob = bytearray(dumps({}, {"x": np.ones(2)}))
    # the payload length field sits right before the 16 payload bytes
    blob[-24:-16] = struct.pack("<Q", 8)
    with pytest.raises(ContainerError):
        loads(bytes(blob[:-8]))


def test_non_finite_metadata_rejected():
    with pytest.raises(ValueError):
        dumps({"x": float("nan")}, {})


# -- datasets ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset():
    return nanoparticle_dataset(dose=1e3, seed=2)


def test_dataset_round_trip(dataset, tmp_path):
    write_dataset(dataset, tmp_path / "d.p4ds", provenance={"config_hash": "abc", "seed": 2})
    back = read_dataset(tmp_path / "d.p4ds")
    assert back.intensities.dtype == np.float32 and back.geometry.positions.dtype == np.float64
    assert np.array_equal(back.intensities, dataset.intensities)
    assert np.array_equal(back.geometry.positions, dataset.geometry.positions)
    assert np.array_equal(back.ground_truth.data, dataset.ground_truth.data)
    assert back.dose == dataset.dose and back.energy == dataset.energy
    assert back.metadata["provenance"]["config_hash"] == "abc"
    assert dataset_to_bytes(back) == (tmp_path / "d.p4ds").read_bytes()


def test_noiseless_dose_survives(tmp_path):
    ds = nanoparticle_dataset()
    assert np.isinf(dataset_from_bytes(dataset_to_bytes(ds)).dose)


def test_unknown_section_preserved(dataset):
    c = loads(dataset_to_bytes(dataset))
    c.sections["vendor/notes"] = np.array([1, 2, 3], dtype=np.int16)
    blob = dumps(c.metadata, c.sections)
    ds = dataset_from_bytes(blob)
    assert np.array_equal(ds.extra_sections["vendor/notes"], [1, 2, 3])
    assert dataset_to_bytes(ds) == blob


def test_truncated_dataset_file(dataset, tmp_path):
    p = tmp_path / "d.p4ds"
    write_dataset(dataset, p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(TruncatedSectionError):
        read_dataset(p)


# -- configuration -----------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["recon.mode=dgp", "recon.num_slices=4", "loss.lambda_z=0.01", "simulation.dose=1e4"])
    assert loads_config(dumps_config(cfg)) == cfg
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert cfg.recon.loss.lambda_z == 0.01 and cfg.simulation.dose == 1e4


def test_unknown_keys_rejected():
    for doc in ("bogus: 1", "recon: {modee: dgp}", "loss: {lambda_q: 1}", "simulation: {phantom: cat}", "recon: {stages: [{iterations: 3, foo: 1}]}"):
        with pytest.raises(ConfigurationError):
            loads_config(doc)
    with pytest.raises(ConfigurationError):
        loads_config("recon: [1, 2")


def test_override_changes_hash():
    base = RunConfig()
    over = apply_overrides(base, ["loss.lambda_z=0.01"])
    assert over.hash() != base.hash()
    assert apply_overrides(base, ["loss.lambda_z=0.0"]).hash() == base.hash()
    assert over.provenance()["config_hash"] == over.hash()


def test_override_stage_list_element():
    cfg = apply_overrides(RunConfig(), ["recon.stages=[{iterations: 5}, {iterations: 7, tie_slices: true}]", "recon.stages.1.iterations=9"])
    assert [s.iterations for s in cfg.recon.stages] == [5, 9]
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, ["recon.stages.4.iterations=1"])
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, ["no_equals_sign"])
