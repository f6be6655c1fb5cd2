import io

import numpy as np
import pytest
from PIL import Image as PILImage

from relight.errors import DataError, ShapeError
from relight.image import (
    ImageF32,
    ImageU8,
    decode_png,
    encode_png,
    to_f32,
    to_u8,
)


def _rand_u8(rng, h, w, c):
    return ImageU8(rng.integers(0, 256, size=(h, w, c), dtype=np.uint8))


def test_to_f32_values():
    img = ImageU8(np.array([[[0], [255], [51]]], dtype=np.uint8))
    f = to_f32(img)
    assert f.data[0, 0, 0] == 0.0
    assert f.data[0, 1, 0] == 1.0
    assert f.data[0, 2, 0] == pytest.approx(51 / 255, abs=1e-7)


def test_to_u8_rounding_and_clamping():
    f = ImageF32(np.array([[[1.2], [0.5], [-0.1]]], dtype=np.float32))
    u = to_u8(f)
    assert u.data[0, 0, 0] == 255  # clamp above
    assert u.data[0, 1, 0] == 128  # round half away from zero
    assert u.data[0, 2, 0] == 0  # clamp below


def test_to_u8_nan_maps_to_zero():
    f = ImageF32(np.array([[[np.nan], [0.25]]], dtype=np.float32))
    u = to_u8(f)
    assert u.data[0, 0, 0] == 0
    assert u.data[0, 1, 0] == 64


def test_u8_f32_round_trip_exact_for_all_bytes():
    all_bytes = np.arange(256, dtype=np.uint8).reshape(16, 16, 1)
    img = ImageU8(all_bytes)
    assert np.array_equal(to_u8(to_f32(img)).data, all_bytes)


def test_invariants_rejected():
    with pytest.raises(ShapeError):
        ImageU8(np.zeros((4, 4, 2), dtype=np.uint8))
    with pytest.raises(ShapeError):
        ImageF32(np.zeros((4, 4, 3), dtype=np.float64))
    with pytest.raises(ShapeError):
        ImageU8(np.zeros((0, 4, 1), dtype=np.uint8))


@pytest.mark.parametrize("channels", [1, 3])
@pytest.mark.parametrize("size", [(1, 1), (8, 8), (13, 7)])
def test_png_round_trip_bit_exact(channels, size):
    rng = np.random.default_rng(hash((channels, size)) % 2**32)
    img = _rand_u8(rng, size[0], size[1], channels)
    decoded = decode_png(encode_png(img))
    assert decoded.channels == channels
    assert np.array_equal(decoded.data, img.data)


def test_png_truncated_errors():
    rng = np.random.default_rng(0)
    data = encode_png(_rand_u8(rng, 16, 16, 3))
    with pytest.raises(DataError, match="malformed|truncated"):
        decode_png(data[:60])


def test_png_not_a_png():
    with pytest.raises(DataError, match="signature"):
        decode_png(b"definitely not a png file at all")


def test_png_16bit_rejected():
    arr = (np.arange(64, dtype=np.int64) * 1000 % 65536).astype(np.uint16).reshape(8, 8)
    pil = PILImage.fromarray(arr)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    with pytest.raises(DataError, match="bit depth"):
        decode_png(buf.getvalue())


def test_png_palette_rejected():
    rng = np.random.default_rng(3)
    rgb = PILImage.fromarray(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
    pil = rgb.convert("P", palette=PILImage.Palette.ADAPTIVE, colors=256)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    assert buf.getvalue()[25] == 3  # palette color type with 8-bit depth
    with pytest.raises(DataError, match="color type"):
        decode_png(buf.getvalue())


def test_png_alpha_rejected():
    pil = PILImage.new("RGBA", (4, 4))
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    with pytest.raises(DataError, match="color type"):
        decode_png(buf.getvalue())
