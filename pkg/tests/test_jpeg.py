import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage
from skimage import data as skdata

from patchscope.errors import ConfigError, NotAJpegError, TruncatedFileError, UnsupportedFeatureError
from patchscope.imageio import Image, psnr
from patchscope.jpeg import STD_CHROMA_QT, STD_LUMA_QT, jpeg_decode, jpeg_encode, quant_table


def _pillow_tables(quality):
    buf = io.BytesIO()
    PILImage.new("RGB", (16, 16)).save(buf, "JPEG", quality=quality)
    t = PILImage.open(buf).quantization
    return np.array(t[0]), np.array(t[1])


@pytest.mark.parametrize("quality", [1, 10, 25, 49, 50, 51, 75, 80, 99, 100])
def test_quant_tables_match_libjpeg(quality):
    luma, chroma = _pillow_tables(quality)
    np.testing.assert_array_equal(quant_table(STD_LUMA_QT, quality).ravel(), luma)
    np.testing.assert_array_equal(quant_table(STD_CHROMA_QT, quality).ravel(), chroma)


def test_quality_100_luma_table_all_ones():
    assert np.all(quant_table(STD_LUMA_QT, 100) == 1)


def test_quality_out_of_range():
    with pytest.raises(ConfigError):
        jpeg_encode(Image(np.zeros((8, 8, 3), np.uint8)), 0)
    with pytest.raises(ConfigError):
        jpeg_encode(Image(np.zeros((8, 8, 3), np.uint8)), 101)


@pytest.mark.parametrize("quality", [1, 2, 30, 75, 100])
@pytest.mark.parametrize("shape", [(8, 8, 3), (13, 21, 3), (16, 16, 1)])
def test_mid_gray_is_exact(quality, shape):
    img = Image(np.full(shape, 128, np.uint8))
    np.testing.assert_array_equal(jpeg_decode(jpeg_encode(img, quality)).pixels, img.pixels)


@settings(max_examples=40)
@given(
    q=st.integers(1, 100),
    h=st.integers(1, 24),
    w=st.integers(1, 24),
    grey=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_any_quality_roundtrip_decodes(q, h, w, grey, seed):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, (h, w, 1 if grey else 3), dtype=np.uint8)
    out = jpeg_decode(jpeg_encode(Image(px), q))
    assert out.pixels.shape == px.shape


def test_psnr_non_decreasing_in_quality():
    img = Image(skdata.chelsea())
    values = [psnr(img, jpeg_decode(jpeg_encode(img, q))) for q in range(30, 101, 5)]
    assert all(b >= a - 0.1 for a, b in zip(values, values[1:]))


def test_quality_100_psnr_on_natural_image():
    img = Image(skdata.chelsea())
    assert psnr(img, jpeg_decode(jpeg_encode(img, 100))) >= 45.0


@pytest.mark.parametrize("quality", [50, 90])
def test_interoperates_with_libjpeg(quality):
    px = skdata.chelsea()[:120, :160]
    buf = io.BytesIO()
    PILImage.fromarray(px).save(buf, "JPEG", quality=quality)
    theirs = buf.getvalue()
    diff = jpeg_decode(theirs).pixels.astype(int) - np.asarray(PILImage.open(io.BytesIO(theirs)))
    assert np.abs(diff).max() <= 6 and np.abs(diff).mean() < 1.0
    ours = jpeg_encode(Image(px), quality)
    diff = jpeg_decode(ours).pixels.astype(int) - np.asarray(PILImage.open(io.BytesIO(ours)))
    assert np.abs(diff).max() <= 6 and np.abs(diff).mean() < 1.0


def test_greyscale_and_restart_intervals_from_libjpeg():
    px = skdata.camera()[:64, :80]
    buf = io.BytesIO()
    PILImage.fromarray(px).save(buf, "JPEG", quality=85, restart_marker_blocks=3)
    assert b"\xff\xdd" in buf.getvalue()
    out = jpeg_decode(buf.getvalue())
    assert out.channels == 1
    ref = np.asarray(PILImage.open(io.BytesIO(buf.getvalue())))
    assert np.abs(out.pixels[..., 0].astype(int) - ref).max() <= 6


def test_unsupported_and_broken_streams():
    px = skdata.chelsea()[:32, :32]
    buf = io.BytesIO()
    PILImage.fromarray(px).save(buf, "JPEG", quality=80, progressive=True)
    with pytest.raises(UnsupportedFeatureError):
        jpeg_decode(buf.getvalue())
    with pytest.raises(NotAJpegError):
        jpeg_decode(b"\x89PNG....")
    good = jpeg_encode(Image(px), 80)
    with pytest.raises(TruncatedFileError):
        jpeg_decode(good[: len(good) // 3])
