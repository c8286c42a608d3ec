import numpy as np
import pytest

from patchscope.errors import (
    HeaderMismatchError, MissingFileError, NotAJpegError, TruncatedFileError, UnsupportedFormatError,
)
from patchscope.imageio import Image, decode_pnm, encode_pnm, psnr, read_image, write_image


def test_p6_2x1_roundtrip(tmp_path):
    img = Image(np.array([[[255, 0, 10], [1, 2, 3]]], dtype=np.uint8))
    write_image(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw == b"P6\n2 1\n255\n" + bytes([255, 0, 10, 1, 2, 3])
    back = read_image(tmp_path / "a.ppm")
    assert back.pixels.tobytes() == img.pixels.tobytes()
    assert (back.width, back.height, back.channels) == (2, 1, 3)


def test_pgm_roundtrip(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_image(tmp_path / "h.pgm", Image(px))
    np.testing.assert_array_equal(read_image(tmp_path / "h.pgm").pixels[..., 0], px)


def test_header_comments_and_maxval():
    img = decode_pnm(b"P5\n# comment\n2 1\n# another\n15\n" + bytes([0, 15]))
    assert img.pixels[0, :, 0].tolist() == [0, 255]


def test_bad_soi_is_not_a_jpeg(tmp_path):
    (tmp_path / "x.jpg").write_bytes(b"\x00\x00not a jpeg")
    with pytest.raises(NotAJpegError):
        read_image(tmp_path / "x.jpg")


def test_each_failure_has_its_own_error(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        read_image(tmp_path / "x.png")
    with pytest.raises(MissingFileError):
        read_image(tmp_path / "absent.ppm")
    with pytest.raises(TruncatedFileError):
        decode_pnm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(HeaderMismatchError):
        decode_pnm(b"P6\n1 1\n255\n" + bytes(4))
    with pytest.raises(UnsupportedFormatError):
        decode_pnm(b"P3\n1 1\n255\n1 2 3")
    (tmp_path / "g.ppm").write_bytes(encode_pnm(Image(np.zeros((2, 2), np.uint8))))
    with pytest.raises(HeaderMismatchError):
        read_image(tmp_path / "g.ppm")
    assert len({UnsupportedFormatError, TruncatedFileError, HeaderMismatchError, MissingFileError}) == 4


def test_image_invariants():
    with pytest.raises(HeaderMismatchError):
        Image(np.zeros((0, 3, 3), np.uint8))
    with pytest.raises(HeaderMismatchError):
        Image(np.full((2, 2, 3), 300.0))
    assert Image(np.zeros((2, 2))).to_rgb().channels == 3


def test_psnr():
    a = np.zeros((4, 4, 3), np.uint8)
    b = a.copy()
    assert psnr(a, b) == float("inf")
    b[0, 0, 0] = 255
    assert psnr(a, b) == pytest.approx(10 * np.log10(48))
