import io
import json

import numpy as np
import pytest
from PIL import Image

from dgptycho.errors import ContractError
from dgptycho.export import contrast_limits, export_png, plot_curves, to_uint8, write_png, write_raw


def decode(png):
    img = Image.open(io.BytesIO(png))
    assert img.mode == "L"
    return np.asarray(img)


def test_constant_image_is_uniform_gray():
    png, info = export_png(np.full((8, 8), 3.3))
    px = decode(png)
    assert np.all(px == px[0, 0]) and px[0, 0] == 128


def test_min_max_mapping():
    img = np.linspace(-2.0, 5.0, 64).reshape(8, 8)
    px = decode(export_png(img)[0])
    assert px.min() == 0 and px.max() == 255
    assert px.flat[0] == 0 and px.flat[-1] == 255
    assert np.all(np.diff(px.ravel().astype(int)) >= 0)


def test_percentiles_clip_two_percent_of_ramp():
    ramp = np.arange(10_000, dtype=float).reshape(100, 100)
    _, info = export_png(ramp, percentile=(1, 99))
    assert info["clipped_low"] + info["clipped_high"] == 200
    assert info["clipped_low"] == info["clipped_high"] == 100


def test_explicit_contrast_recorded(tmp_path):
    img = np.random.default_rng(0).random((6, 5))
    info = write_png(img, tmp_path / "a.png", contrast={"min": 0.2, "max": 0.8})
    side = json.loads((tmp_path / "a.png.json").read_text())
    assert side["min"] == 0.2 and side["max"] == 0.8 and side == info
    px = decode((tmp_path / "a.png").read_bytes())
    assert px.shape == (6, 5)
    assert np.array_equal(px, to_uint8(img, 0.2, 0.8))


def test_contract_errors():
    with pytest.raises(ContractError):
        export_png(np.array([[np.nan, 1.0]]))
    with pytest.raises(ContractError):
        export_png(np.ones(4))
    with pytest.raises(ContractError):
        contrast_limits(np.ones((2, 2)), contrast=(0, 1), percentile=(1, 99))


def test_raw_dump(tmp_path):
    img = np.arange(12.0).reshape(3, 4)
    write_raw(img, tmp_path / "x.f32")
    back = np.fromfile(tmp_path / "x.f32", dtype="<f4").reshape(3, 4)
    assert np.array_equal(back, img)
    assert json.loads((tmp_path / "x.f32.json").read_text())["shape"] == [3, 4]


def test_curve_plot_written(tmp_path):
    plot_curves({"a": ([1, 2, 3], [0.1, 0.5, 0.7])}, tmp_path / "c.png")
    assert (tmp_path / "c.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
