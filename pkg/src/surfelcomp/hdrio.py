"""Radiance RGBE (.hdr) reading and writing.

Scanlines are written with the new-style per-component RLE; the reader
accepts both RLE and flat files. Extra header lines survive a round trip,
which the octahedral-texture serialization relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_SIGNATURE = b"#?RADIANCE"


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    """Encode (..., 3) float radiance into (..., 4) uint8 RGBE."""
    rgb = np.asarray(rgb, dtype=np.float64)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    maxc = rgb.max(axis=-1)
    live = maxc >= 1e-32
    if np.any(live):
        m, e = np.frexp(maxc[live])
        scale = m * 256.0 / maxc[live]
        vals = np.clip(rgb[live] * scale[..., None], 0, 255).astype(np.uint8)
        out[live, :3] = vals
        out[live, 3] = (e + 128).astype(np.uint8)
    return out


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """Decode (..., 4) uint8 RGBE into (..., 3) float32 radiance."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    exp = rgbe[..., 3].astype(np.int32)
    scale = np.where(exp == 0, 0.0, np.ldexp(1.0, exp - 136))
    return ((rgbe[..., :3].astype(np.float32) + 0.5) * scale[..., None]).astype(np.float32)


def _rle_encode_stream(stream: bytes) -> bytes:
    """New-style RGBE RLE for one component stream of one scanline."""
    data = np.frombuffer(stream, dtype=np.uint8)
    n = len(data)
    # Boundaries of maximal runs of identical bytes.
    edges = np.flatnonzero(np.diff(data)) + 1
    starts = np.concatenate([[0], edges])
    lengths = np.diff(np.concatenate([starts, [n]]))
    out = bytearray()
    lit_start = None

    def flush_literal(end):
        nonlocal lit_start
        if lit_start is None:
            return
        pos = lit_start
        while pos < end:
            chunk = min(128, end - pos)
            out.append(chunk)
            out.extend(data[pos:pos + chunk].tobytes())
            pos += chunk
        lit_start = None

    for start, length in zip(starts, lengths):
        if length >= 4:
            flush_literal(start)
            pos = start
            while length > 0:
                chunk = min(127, length)
                out.append(128 + chunk)
                out.append(data[pos])
                pos += chunk
                length -= chunk
        else:
            if lit_start is None:
                lit_start = start
    flush_literal(n)
    return bytes(out)


def write_hdr(path, rgb: np.ndarray, extra_header: list[str] | None = None) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected (H, W, 3) image")
    h, w = rgb.shape[:2]
    rgbe = float_to_rgbe(rgb)
    with open(path, "wb") as f:
        f.write(_SIGNATURE + b"\n")
        f.write(b"FORMAT=32-bit_rle_rgbe\n")
        for line in extra_header or []:
            f.write(line.encode("ascii") + b"\n")
        f.write(b"\n")
        f.write(f"-Y {h} +X {w}\n".encode("ascii"))
        if 8 <= w <= 32767:
            for row in rgbe:
                f.write(bytes([2, 2, (w >> 8) & 0xFF, w & 0xFF]))
                for c in range(4):
                    f.write(_rle_encode_stream(row[:, c].tobytes()))
        else:
            f.write(rgbe.tobytes())


def _decode_rle_scanline(buf: memoryview, pos: int, width: int) -> tuple[np.ndarray, int]:
    row = np.empty((width, 4), dtype=np.uint8)
    for c in range(4):
        filled = 0
        while filled < width:
            code = buf[pos]
            pos += 1
            if code > 128:
                count = code - 128
                row[filled:filled + count, c] = buf[pos]
                pos += 1
            else:
                count = code
                row[filled:filled + count, c] = np.frombuffer(buf[pos:pos + count], dtype=np.uint8)
                pos += count
            filled += count
        if filled != width:
            raise FormatError("corrupt RLE scanline")
    return row, pos


def read_hdr(path) -> tuple[np.ndarray, list[str]]:
    """Read an .hdr file; returns (float32 (H, W, 3) image, header lines)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"#?"):
        raise FormatError("not a Radiance HDR file")
    # Header ends at the first blank line; the resolution line follows.
    end = raw.find(b"\n\n")
    if end < 0:
        raise FormatError("truncated HDR header")
    header_lines = raw[:end].decode("ascii", "replace").split("\n")[1:]
    res_end = raw.find(b"\n", end + 2)
    if res_end < 0:
        raise FormatError("missing HDR resolution line")
    res = raw[end + 2:res_end].decode("ascii", "replace").split()
    if len(res) != 4 or res[0] != "-Y" or res[2] != "+X":
        raise FormatError(f"unsupported HDR orientation: {' '.join(res)}")
    h, w = int(res[1]), int(res[3])
    buf = memoryview(raw)
    pos = res_end + 1
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    for y in range(h):
        if pos + 4 <= len(raw) and buf[pos] == 2 and buf[pos + 1] == 2 \
                and ((buf[pos + 2] << 8) | buf[pos + 3]) == w:
            row, pos = _decode_rle_scanline(buf, pos + 4, w)
            rgbe[y] = row
        else:
            need = w * 4
            if pos + need > len(raw):
                raise FormatError("truncated HDR pixel data")
            rgbe[y] = np.frombuffer(buf[pos:pos + need], dtype=np.uint8).reshape(w, 4)
            pos += need
    return rgbe_to_float(rgbe), header_lines
