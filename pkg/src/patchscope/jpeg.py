"""Baseline sequential JPEG (JFIF) encoder and decoder.

Encoding is fixed: YCbCr with 4:2:0 chroma subsampling, 8x8 DCT, the
standard quantisation tables scaled with the IJG quality rule, and the
standard Huffman tables.  The decoder handles any baseline or extended
sequential Huffman stream with 8-bit samples, including restart intervals,
arbitrary sampling factors and multi-scan files; progressive, lossless and
arithmetic-coded streams are rejected.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.fft import dctn, idctn

from .errors import ConfigError, HeaderMismatchError, NotAJpegError, TruncatedFileError, UnsupportedFeatureError
from .imageio import Image

# fmt: off
ZIGZAG = np.array([
     0,  1,  8, 16,  9,  2,  3, 10, 17, 24, 32, 25, 18, 11,  4,  5,
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13,  6,  7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
])

STD_LUMA_QT = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
]).reshape(8, 8)

STD_CHROMA_QT = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
]).reshape(8, 8)

DC_LUMA_BITS = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
DC_LUMA_VALS = list(range(12))
DC_CHROMA_BITS = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
DC_CHROMA_VALS = list(range(12))

AC_LUMA_BITS = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D]
AC_LUMA_VALS = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
]
AC_CHROMA_BITS = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77]
AC_CHROMA_VALS = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
    0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
    0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
    0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
]
# fmt: on

SOI, EOI, SOS, DQT, DHT, DRI, SOF0, SOF1 = 0xD8, 0xD9, 0xDA, 0xDB, 0xC4, 0xDD, 0xC0, 0xC1
_UNSUPPORTED_SOF = {
    0xC2: "progressive DCT", 0xC3: "lossless", 0xC5: "differential sequential", 0xC6: "differential progressive",
    0xC7: "differential lossless", 0xC9: "arithmetic sequential", 0xCA: "arithmetic progressive",
    0xCB: "arithmetic lossless", 0xCD: "arithmetic differential sequential",
    0xCE: "arithmetic differential progressive", 0xCF: "arithmetic differential lossless",
}


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling: 5000/q below 50, 200-2q from 50 up; entries clamped to [1, 255]."""
    if not 1 <= int(quality) <= 100:
        raise ConfigError(f"JPEG quality must be in [1, 100], got {quality}")
    q = int(quality)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    return np.clip((base * scale + 50) // 100, 1, 255).astype(np.int64)


def huffman_codes(bits: list[int], vals: list[int]) -> dict[int, tuple[int, int]]:
    """Canonical code assignment: symbol -> (code, length)."""
    codes = {}
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            codes[vals[k]] = (code, length)
            code += 1
            k += 1
        code <<= 1
    return codes


def _category(v: int) -> int:
    return abs(v).bit_length()


def _extra_bits(v: int, size: int) -> int:
    return v if v >= 0 else v + (1 << size) - 1


# ---------------------------------------------------------------------------
# encoder


def _rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168735892 * r - 0.331264108 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418687589 * g - 0.081312411 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _pad_to(plane: np.ndarray, mh: int, mw: int) -> np.ndarray:
    h, w = plane.shape
    return np.pad(plane, ((0, -h % mh), (0, -w % mw)), mode="edge")


def _quantised_blocks(plane: np.ndarray, qt: np.ndarray) -> np.ndarray:
    """[by, bx, 64] zigzag-ordered quantised coefficients."""
    coef = dctn(_blocks(plane) - 128.0, axes=(-2, -1), norm="ortho")
    q = np.rint(coef / qt).astype(np.int64)
    return q.reshape(q.shape[0], q.shape[1], 64)[:, :, ZIGZAG]


class _BitWriter:
    def __init__(self):
        self.parts: list[str] = []

    def write(self, code: int, length: int) -> None:
        if length:
            self.parts.append(format(code, f"0{length}b"))

    def getvalue(self) -> bytes:
        bits = "".join(self.parts)
        bits += "1" * (-len(bits) % 8)
        raw = int(bits, 2).to_bytes(len(bits) // 8, "big") if bits else b""
        return raw.replace(b"\xff", b"\xff\x00")


def _encode_block(bw: _BitWriter, zz, pred: int, dc_codes, ac_codes) -> int:
    dc = zz[0]
    diff = dc - pred
    size = _category(diff)
    bw.write(*dc_codes[size])
    bw.write(_extra_bits(diff, size), size)
    run = 0
    last = 63
    while last > 0 and zz[last] == 0:
        last -= 1
    for i in range(1, last + 1):
        v = zz[i]
        if v == 0:
            run += 1
            continue
        while run > 15:
            bw.write(*ac_codes[0xF0])
            run -= 16
        size = _category(v)
        bw.write(*ac_codes[(run << 4) | size])
        bw.write(_extra_bits(v, size), size)
        run = 0
    if last < 63:
        bw.write(*ac_codes[0x00])
    return dc


def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def _dht(tc: int, th: int, bits: list[int], vals: list[int]) -> bytes:
    return bytes([(tc << 4) | th]) + bytes(bits) + bytes(vals)


def jpeg_encode(img: Image, quality: int = 75) -> bytes:
    """Encode an 8-bit image as baseline JFIF (colour images use 4:2:0)."""
    lq = quant_table(STD_LUMA_QT, quality)
    cq = quant_table(STD_CHROMA_QT, quality)
    h, w = img.height, img.width
    colour = img.channels == 3
    if colour:
        ycc = _rgb_to_ycbcr(img.pixels)
        y = _pad_to(ycc[..., 0], 16, 16)
        cb = _pad_to(ycc[..., 1], 16, 16)
        cr = _pad_to(ycc[..., 2], 16, 16)
        cb = cb.reshape(cb.shape[0] // 2, 2, cb.shape[1] // 2, 2).mean(axis=(1, 3))
        cr = cr.reshape(cr.shape[0] // 2, 2, cr.shape[1] // 2, 2).mean(axis=(1, 3))
        planes = [_quantised_blocks(y, lq), _quantised_blocks(cb, cq), _quantised_blocks(cr, cq)]
    else:
        planes = [_quantised_blocks(_pad_to(img.pixels[..., 0].astype(np.float64), 8, 8), lq)]

    codes = [
        (huffman_codes(DC_LUMA_BITS, DC_LUMA_VALS), huffman_codes(AC_LUMA_BITS, AC_LUMA_VALS)),
        (huffman_codes(DC_CHROMA_BITS, DC_CHROMA_VALS), huffman_codes(AC_CHROMA_BITS, AC_CHROMA_VALS)),
    ]
    bw = _BitWriter()
    planes_l = [p.tolist() for p in planes]
    if colour:
        yb, cbb, crb = planes_l
        preds = [0, 0, 0]
        for my in range(len(cbb)):
            for mx in range(len(cbb[0])):
                for dy in (0, 1):
                    for dx in (0, 1):
                        preds[0] = _encode_block(bw, yb[2 * my + dy][2 * mx + dx], preds[0], *codes[0])
                preds[1] = _encode_block(bw, cbb[my][mx], preds[1], *codes[1])
                preds[2] = _encode_block(bw, crb[my][mx], preds[2], *codes[1])
    else:
        pred = 0
        for row in planes_l[0]:
            for blk in row:
                pred = _encode_block(bw, blk, pred, *codes[0])

    out = [bytes([0xFF, SOI])]
    out.append(_segment(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00"))
    out.append(_segment(DQT, bytes([0]) + bytes(lq.reshape(64)[ZIGZAG].tolist())))
    if colour:
        out.append(_segment(DQT, bytes([1]) + bytes(cq.reshape(64)[ZIGZAG].tolist())))
        comps = [(1, 0x22, 0), (2, 0x11, 1), (3, 0x11, 1)]
    else:
        comps = [(1, 0x11, 0)]
    sof = struct.pack(">BHHB", 8, h, w, len(comps)) + b"".join(bytes(c) for c in comps)
    out.append(_segment(SOF0, sof))
    tables = [_dht(0, 0, DC_LUMA_BITS, DC_LUMA_VALS), _dht(1, 0, AC_LUMA_BITS, AC_LUMA_VALS)]
    if colour:
        tables += [_dht(0, 1, DC_CHROMA_BITS, DC_CHROMA_VALS), _dht(1, 1, AC_CHROMA_BITS, AC_CHROMA_VALS)]
    out.append(_segment(DHT, b"".join(tables)))
    sel = [(1, 0x00)] if not colour else [(1, 0x00), (2, 0x11), (3, 0x11)]
    sos = bytes([len(sel)]) + b"".join(bytes(s) for s in sel) + bytes([0, 63, 0])
    out.append(_segment(SOS, sos))
    out.append(bw.getvalue())
    out.append(bytes([0xFF, EOI]))
    return b"".join(out)


# ---------------------------------------------------------------------------
# decoder


class _HuffTable:
    """16-bit peek lookup: code prefix -> (symbol, length)."""

    def __init__(self, bits: list[int], vals: list[int]):
        if sum(bits) != len(vals):
            raise HeaderMismatchError("DHT: symbol count does not match code length counts")
        self.lookup: list[tuple[int, int] | None] = [None] * 65536
        for sym, (code, length) in huffman_codes(bits, vals).items():
            lo = code << (16 - length)
            hi = (code + 1) << (16 - length)
            entry = (sym, length)
            for i in range(lo, hi):
                self.lookup[i] = entry


class _Component:
    __slots__ = ("cid", "h", "v", "tq", "coef", "bw", "bh", "bw_used", "bh_used", "td", "ta", "pred")

    def __init__(self, cid, h, v, tq):
        self.cid, self.h, self.v, self.tq = cid, h, v, tq
        self.coef = None
        self.pred = 0


def _decode_scan(segments: list[str], comps: list[_Component], dc_tabs, ac_tabs, frame, restart: int) -> None:
    hmax, vmax, mcux, mcuy = frame
    interleaved = len(comps) > 1
    if interleaved:
        units = [(my, mx) for my in range(mcuy) for mx in range(mcux)]
    else:
        c = comps[0]
        # non-interleaved scans visit only the blocks covering the component's own samples
        units = [(by, bx) for by in range(c.bh_used) for bx in range(c.bw_used)]
    seg_iter = iter(segments)
    bits = next(seg_iter, None)
    if bits is None:
        raise TruncatedFileError("scan has no entropy-coded data")
    pos = 0
    for c in comps:
        c.pred = 0
    for n, unit in enumerate(units):
        if restart and n and n % restart == 0:
            bits = next(seg_iter, None)
            if bits is None:
                raise TruncatedFileError("missing restart interval data")
            pos = 0
            for c in comps:
                c.pred = 0
        if interleaved:
            my, mx = unit
            targets = [(c, my * c.v + dy, mx * c.h + dx) for c in comps for dy in range(c.v) for dx in range(c.h)]
        else:
            targets = [(comps[0], unit[0], unit[1])]
        for c, by, bx in targets:
            pos = _decode_block(bits, pos, c, by, bx, dc_tabs[c.td], ac_tabs[c.ta])


def _decode_block(bits: str, pos: int, c: _Component, by: int, bx: int, dct: _HuffTable, act: _HuffTable) -> int:
    def peek16(p):
        chunk = bits[p : p + 16]
        if len(chunk) < 16:
            chunk = chunk + "1" * (16 - len(chunk))
        return int(chunk, 2)

    entry = dct.lookup[peek16(pos)]
    if entry is None:
        raise HeaderMismatchError("invalid DC Huffman code")
    size, ln = entry
    pos += ln
    diff = 0
    if size:
        if pos + size > len(bits):
            raise TruncatedFileError("entropy-coded data ends inside a coefficient")
        raw = int(bits[pos : pos + size], 2)
        pos += size
        diff = raw if raw >= (1 << (size - 1)) else raw - (1 << size) + 1
    c.pred += diff
    blk = c.coef[by, bx]
    blk[0] = c.pred
    k = 1
    lookup = act.lookup
    while k < 64:
        entry = lookup[peek16(pos)]
        if entry is None:
            raise HeaderMismatchError("invalid AC Huffman code")
        rs, ln = entry
        pos += ln
        run, size = rs >> 4, rs & 15
        if size == 0:
            if run == 15:
                k += 16
                continue
            break
        k += run
        if k > 63:
            raise HeaderMismatchError("AC run past end of block")
        if pos + size > len(bits):
            raise TruncatedFileError("entropy-coded data ends inside a coefficient")
        raw = int(bits[pos : pos + size], 2)
        pos += size
        blk[k] = raw if raw >= (1 << (size - 1)) else raw - (1 << size) + 1
        k += 1
    return pos


def _entropy_segments(data: bytes, start: int) -> tuple[list[str], int]:
    """Split entropy-coded data at RST markers; return bit strings and the index of the next marker."""
    segs = []
    cur = bytearray()
    i = start
    n = len(data)
    while True:
        j = data.find(b"\xff", i)
        if j < 0 or j + 1 >= n:
            raise TruncatedFileError("entropy-coded data not terminated by a marker")
        cur += data[i:j]
        nxt = data[j + 1]
        if nxt == 0x00:
            cur.append(0xFF)
            i = j + 2
        elif nxt == 0xFF:
            i = j + 1  # fill byte
        elif 0xD0 <= nxt <= 0xD7:
            segs.append(cur)
            cur = bytearray()
            i = j + 2
        else:
            segs.append(cur)
            return ["".join(f"{b:08b}" for b in bytes(s)) if s else "" for s in segs], j


def jpeg_decode(data: bytes) -> Image:
    if len(data) < 2 or data[0] != 0xFF or data[1] != SOI:
        raise NotAJpegError("not a JPEG: missing SOI marker")
    qts: dict[int, np.ndarray] = {}
    dc_tabs: dict[int, _HuffTable] = {}
    ac_tabs: dict[int, _HuffTable] = {}
    comps: dict[int, _Component] = {}
    order: list[int] = []
    frame = None
    size = None
    restart = 0
    pos = 2
    n = len(data)
    while True:
        while pos < n and data[pos] == 0xFF and pos + 1 < n and data[pos + 1] == 0xFF:
            pos += 1
        if pos + 2 > n:
            raise TruncatedFileError("JPEG ends before EOI")
        if data[pos] != 0xFF:
            raise HeaderMismatchError(f"expected a marker at byte {pos}")
        marker = data[pos + 1]
        pos += 2
        if marker == EOI:
            break
        if marker in _UNSUPPORTED_SOF:
            raise UnsupportedFeatureError(f"unsupported JPEG feature: {_UNSUPPORTED_SOF[marker]}")
        if marker == 0xCC:
            raise UnsupportedFeatureError("unsupported JPEG feature: arithmetic coding conditioning (DAC)")
        if 0xD0 <= marker <= 0xD7 or marker == 0x01:
            continue
        if pos + 2 > n:
            raise TruncatedFileError("segment length missing")
        (length,) = struct.unpack(">H", data[pos : pos + 2])
        if length < 2 or pos + length > n:
            raise TruncatedFileError(f"segment 0x{marker:02X} runs past end of file")
        seg = data[pos + 2 : pos + length]
        pos += length
        if marker == DQT:
            i = 0
            while i < len(seg):
                pq, tq = seg[i] >> 4, seg[i] & 15
                i += 1
                if pq == 0:
                    vals = np.frombuffer(seg[i : i + 64], dtype=np.uint8).astype(np.int64)
                    i += 64
                else:
                    vals = np.frombuffer(seg[i : i + 128], dtype=">u2").astype(np.int64)
                    i += 128
                if vals.size != 64:
                    raise TruncatedFileError("DQT table truncated")
                table = np.empty(64, dtype=np.int64)
                table[ZIGZAG] = vals
                qts[tq] = table.reshape(8, 8)
        elif marker == DHT:
            i = 0
            while i < len(seg):
                tc, th = seg[i] >> 4, seg[i] & 15
                bits = list(seg[i + 1 : i + 17])
                if len(bits) < 16:
                    raise TruncatedFileError("DHT table truncated")
                total = sum(bits)
                vals = list(seg[i + 17 : i + 17 + total])
                if len(vals) < total:
                    raise TruncatedFileError("DHT table truncated")
                i += 17 + total
                (dc_tabs if tc == 0 else ac_tabs)[th] = _HuffTable(bits, vals)
        elif marker in (SOF0, SOF1):
            p, h, w, nc = struct.unpack(">BHHB", seg[:6])
            if p != 8:
                raise UnsupportedFeatureError(f"unsupported JPEG feature: {p}-bit samples")
            if h == 0 or w == 0:
                raise UnsupportedFeatureError("unsupported JPEG feature: DNL-defined height")
            if nc not in (1, 3):
                raise UnsupportedFeatureError(f"unsupported JPEG feature: {nc} components")
            size = (h, w)
            for k in range(nc):
                cid, hv, tq = seg[6 + 3 * k : 9 + 3 * k]
                comps[cid] = _Component(cid, hv >> 4, hv & 15, tq)
                order.append(cid)
            hmax = max(c.h for c in comps.values())
            vmax = max(c.v for c in comps.values())
            mcux = -(-w // (8 * hmax))
            mcuy = -(-h // (8 * vmax))
            frame = (hmax, vmax, mcux, mcuy)
            for c in comps.values():
                c.bw, c.bh = mcux * c.h, mcuy * c.v
                c.coef = np.zeros((c.bh, c.bw, 64), dtype=np.int64)
                c.bw_used = -(-(-(-w * c.h // hmax)) // 8)
                c.bh_used = -(-(-(-h * c.v // vmax)) // 8)
        elif marker == DRI:
            (restart,) = struct.unpack(">H", seg[:2])
        elif marker == SOS:
            if frame is None:
                raise HeaderMismatchError("SOS before SOF")
            ns = seg[0]
            scomps = []
            for k in range(ns):
                cid, t = seg[1 + 2 * k], seg[2 + 2 * k]
                if cid not in comps:
                    raise HeaderMismatchError(f"scan references unknown component {cid}")
                c = comps[cid]
                c.td, c.ta = t >> 4, t & 15
                if c.td not in dc_tabs or c.ta not in ac_tabs:
                    raise HeaderMismatchError("scan references an undefined Huffman table")
                scomps.append(c)
            segments, pos = _entropy_segments(data, pos)
            _decode_scan(segments, scomps, dc_tabs, ac_tabs, frame, restart)
        # APPn, COM and other informational segments are skipped
    if frame is None or size is None:
        raise HeaderMismatchError("JPEG has no frame header")
    return _reconstruct(size, frame, [comps[c] for c in order], qts)


_UNZIGZAG = np.argsort(ZIGZAG)


def _upsample(plane: np.ndarray, factor: int, axis: int) -> np.ndarray:
    """Factor 2 uses the centred triangle filter (3/4, 1/4) with edge clamping; other factors replicate."""
    if factor == 1:
        return plane
    if factor != 2:
        return np.repeat(plane, factor, axis=axis)
    x = np.moveaxis(plane, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]])
    nxt = np.concatenate([x[1:], x[-1:]])
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=x.dtype)
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _reconstruct(size, frame, comps: list[_Component], qts) -> Image:
    h, w = size
    hmax, vmax, _, _ = frame
    planes = []
    for c in comps:
        if c.tq not in qts:
            raise HeaderMismatchError(f"component {c.cid} uses undefined quantisation table {c.tq}")
        coef = c.coef[:, :, _UNZIGZAG].reshape(c.bh, c.bw, 8, 8) * qts[c.tq]
        px = idctn(coef.astype(np.float64), axes=(-2, -1), norm="ortho") + 128.0
        plane = px.transpose(0, 2, 1, 3).reshape(c.bh * 8, c.bw * 8)
        plane = _upsample(plane, vmax // c.v, axis=0)
        plane = _upsample(plane, hmax // c.h, axis=1)
        planes.append(plane[:h, :w])
    if len(planes) == 1:
        out = planes[0][:, :, None]
    else:
        y, cb, cr = planes
        cb = cb - 128.0
        cr = cr - 128.0
        out = np.stack([y + 1.402 * cr, y - 0.344136286 * cb - 0.714136286 * cr, y + 1.772 * cb], axis=-1)
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8), "jpeg")
