import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from erft.errors import FormatError, GeometryError, ValidationError
from erft.raster_io import (RasterImage, WeightArchive, read_raster, read_weights, validate_pair,
                            write_raster, write_weights)


def test_one_pixel_raster_is_22_bytes(tmp_path):
    path = tmp_path / "one.erft"
    write_raster(np.array([[[0.25]]]), path)
    blob = path.read_bytes()
    assert len(blob) == 22
    assert blob[:4] == b"ERFT"
    assert struct.unpack("<HIII", blob[4:18]) == (1, 1, 1, 1)
    assert struct.unpack("<f", blob[18:]) == (0.25,)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_raster_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("r") / "x.erft"
    write_raster(data, path)
    np.testing.assert_array_equal(read_raster(path).data, data)


def test_raster_is_band_major(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    write_raster(data, tmp_path / "a.erft")
    raw = np.frombuffer((tmp_path / "a.erft").read_bytes()[18:], dtype="<f4")
    np.testing.assert_array_equal(raw, np.arange(12))


def test_raster_errors(tmp_path):
    path = tmp_path / "a.erft"
    write_raster(np.ones((1, 2, 2)), path)
    blob = path.read_bytes()
    (tmp_path / "magic.erft").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        read_raster(tmp_path / "magic.erft")
    (tmp_path / "ver.erft").write_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FormatError):
        read_raster(tmp_path / "ver.erft")
    (tmp_path / "short.erft").write_bytes(blob[:-1])
    with pytest.raises(OSError):
        read_raster(tmp_path / "short.erft")
    (tmp_path / "head.erft").write_bytes(blob[:10])
    with pytest.raises(OSError):
        read_raster(tmp_path / "head.erft")
    with pytest.raises(ValidationError):
        write_raster(np.array([[[np.nan]]]), tmp_path / "nan.erft")
    with pytest.raises(ValidationError):
        RasterImage(np.zeros((1, 0, 3)))


def test_weights_round_trip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
              "a.b": rng.normal(size=(1, 2, 1, 1)).astype(np.float32),
              "scalar": np.float32(1.5).reshape(())}
    write_weights(WeightArchive(params=params, features=2, channels=3, blocks=1), tmp_path / "w")
    back = read_weights(tmp_path / "w")
    assert (back.features, back.channels, back.blocks) == (2, 3, 1)
    assert list(back.params) == list(params)
    for k in params:
        np.testing.assert_array_equal(back.params[k], params[k])


def test_weights_header_size(tmp_path):
    write_weights(WeightArchive(params={}, features=4, channels=2, blocks=3), tmp_path / "w")
    blob = (tmp_path / "w").read_bytes()
    assert len(blob) == 22
    assert struct.unpack("<HIIII", blob[4:]) == (1, 4, 2, 3, 0)


def test_weights_errors(tmp_path):
    with pytest.raises(ValidationError):
        write_weights(WeightArchive(params=[("a", np.zeros(1)), ("a", np.ones(1))]), tmp_path / "d")
    with pytest.raises(ValidationError):
        write_weights(WeightArchive(params={"a": np.array([np.inf])}), tmp_path / "inf")
    write_weights(WeightArchive(params={"a": np.zeros(4)}), tmp_path / "w")
    blob = (tmp_path / "w").read_bytes()
    (tmp_path / "t").write_bytes(blob[:-3])
    with pytest.raises(OSError):
        read_weights(tmp_path / "t")
    (tmp_path / "m").write_bytes(b"ERFT" + blob[4:])
    with pytest.raises(FormatError):
        read_weights(tmp_path / "m")


def test_validate_pair():
    pan, lrms = np.zeros((1, 16, 16)), np.zeros((3, 4, 4))
    pair = validate_pair(pan, lrms, 4)
    assert pair.ratio == 4 and pair.lrms.channels == 3
    with pytest.raises(GeometryError):
        validate_pair(np.zeros((2, 16, 16)), lrms, 4)
    with pytest.raises(GeometryError):
        validate_pair(np.zeros((1, 16, 12)), lrms, 4)
    with pytest.raises(GeometryError):
        validate_pair(pan, lrms, 1)


def test_half_value_byte_layout(tmp_path):
    write_raster(np.full((1, 1, 1), 0.5), tmp_path / "h.erft")
    expected = b"ERFT" + b"\x01\x00" + b"\x01\x00\x00\x00" * 3 + b"\x00\x00\x00\x3f"
    assert (tmp_path / "h.erft").read_bytes() == expected
