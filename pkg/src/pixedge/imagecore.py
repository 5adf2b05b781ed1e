"""Image planes, Netpbm/PXF1 file I/O and bilinear resampling.

An image plane is a float64 ``numpy`` array of shape ``(H, W, C)``.  Grayscale
images and edge maps carry ``C == 1``; most functions also accept a bare
``(H, W)`` array and treat it as a single channel.

PXF1 tensor layout (all integers little-endian)::

    b"PXF1" | u32 ndim | u32 dims[ndim] | f32 payload[prod(dims)]
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

PXF_MAGIC = b"PXF1"
_WHITESPACE = b" \t\n\r\v\f"
# refuse tensors whose header claims more than this many elements
MAX_TENSOR_ELEMENTS = 1 << 31


def as_plane(array):
    """Return ``array`` as a float64 ``(H, W, C)`` plane (no copy if possible)."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or min(a.shape) < 1:
        raise ContractError(f"expected a non-empty (H, W[, C]) array, got shape {a.shape}")
    return a


def as_map(array):
    """Return a single-channel plane as a 2-D float64 array."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ContractError(f"expected one channel, got {a.shape[2]}")
        a = a[:, :, 0]
    if a.ndim != 2 or min(a.shape) < 1:
        raise ContractError(f"expected a non-empty 2-D map, got shape {a.shape}")
    return a


# ---------------------------------------------------------------- Netpbm


def _parse_pnm_header(buf):
    """Parse ``P5``/``P6`` headers; return (magic, width, height, maxval, data_offset)."""
    if len(buf) < 2:
        raise FormatError("file too short for a Netpbm header", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(buf) and (buf[pos] in _WHITESPACE or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos] in b"0123456789":
            pos += 1
        if start == pos:
            raise FormatError("malformed header: expected a decimal integer", start)
        fields.append((int(buf[start:pos]), start))
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise FormatError("malformed header: missing whitespace before raster", pos)
    pos += 1
    (width, w_off), (height, h_off), (maxval, m_off) = fields
    if width < 1:
        raise FormatError("width must be positive", w_off)
    if height < 1:
        raise FormatError("height must be positive", h_off)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}", m_off)
    if magic == b"P6" and maxval != 255:
        raise FormatError("P6 images must use maxval 255", m_off)
    return magic, width, height, maxval, pos


def read_image(path):
    """Read a binary PGM (P5) or PPM (P6) file into a plane scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _parse_pnm_header(buf)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(buf) - offset < need:
        raise FormatError(
            f"truncated raster: need {need} bytes, found {len(buf) - offset}",
            len(buf),
        )
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return raw.reshape(height, width, channels).astype(np.float64) / maxval


def read_raw_pnm(path):
    """Read a P5/P6 file returning the integer samples and maxval unscaled."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _parse_pnm_header(buf)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    count = width * height * channels
    if len(buf) - offset < count * dtype.itemsize:
        raise FormatError("truncated raster", len(buf))
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return raw.reshape(height, width, channels).astype(np.int64), maxval


def _quantize(values, maxval):
    # round half up, as documented for edge maps
    return np.floor(values * maxval + 0.5).astype(np.int64)


def write_image(plane, path, maxval=255):
    """Write a 1-channel plane as P5 or a 3-channel plane as P6.

    Values must lie in [0, 1]; they are stored as ``round(v * maxval)``.
    """
    a = as_plane(plane)
    channels = a.shape[2]
    if channels not in (1, 3):
        raise ContractError(f"can only write 1 or 3 channels, got {channels}")
    if maxval not in (255, 65535):
        raise ContractError(f"unsupported maxval {maxval}")
    if channels == 3 and maxval != 255:
        raise ContractError("P6 output is limited to maxval 255")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ContractError("plane values must lie in [0, 1]")
    samples = _quantize(a, maxval)
    dtype = ">u2" if maxval == 65535 else "u1"
    magic = "P6" if channels == 3 else "P5"
    header = f"{magic}\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + samples.astype(dtype).tobytes())


def write_edge_map(plane, path):
    """Write a soft edge map in [0, 1] as a 16-bit P5 file."""
    a = as_map(plane)
    write_image(a, path, maxval=65535)


def write_binary_map(mask, path):
    """Write a boolean boundary mask as an 8-bit P5 file (0 or 255)."""
    m = np.asarray(mask, dtype=bool)
    write_image(m.astype(np.float64), path, maxval=255)


# ------------------------------------------------------------------- PXF1


def encode_tensor(array):
    """Serialize an array to PXF1 bytes (payload stored as float32)."""
    a = np.asarray(array)
    header = PXF_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Decode one PXF1 record starting at ``offset``.

    Returns ``(array, end_offset)``; the array is float32 with the stored dims.
    """
    if buf[offset : offset + 4] != PXF_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    pos = offset + 4
    if len(buf) < pos + 4:
        raise FormatError("truncated tensor header", pos)
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * ndim:
        raise FormatError(f"truncated dims: {ndim} declared", pos)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = 1
    for d in dims:
        count *= d
        if count > MAX_TENSOR_ELEMENTS:
            raise FormatError(f"dims {dims} overflow the element limit", offset + 8)
    available = (len(buf) - pos) // 4
    if available < count:
        raise FormatError(
            f"payload length mismatch: dims {dims} need {count} floats, found {available}",
            pos,
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return data.astype(np.float32), pos + 4 * count


def write_tensor(array, path):
    """Write an array (e.g. a plane) to a PXF1 file."""
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path):
    """Read a PXF1 file. Trailing bytes after the payload are a format error."""
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(
            f"payload length mismatch: {len(buf) - end} trailing bytes", end
        )
    return array


# ------------------------------------------------------------- resampling


def _axis_weights(n_in, n_out):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(plane, out_h, out_w):
    """Bilinear resize with the align-corners convention.

    Output index ``i`` samples source coordinate ``i * (n_in - 1) / (n_out - 1)``
    (or 0 when ``n_out == 1``).  Accepts 2-D or 3-D input and preserves ndim.
    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output size must be positive, got {out_h}x{out_w}")
    a = np.asarray(plane, dtype=np.float64)
    squeeze = a.ndim == 2
    a = as_plane(a)
    h, w = a.shape[:2]
    if (h, w) == (out_h, out_w):
        out = a.copy()
    else:
        y0, y1, fy = _axis_weights(h, out_h)
        x0, x1, fx = _axis_weights(w, out_w)
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
        bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
        out = top * (1 - fy) + bottom * fy
    return out[:, :, 0] if squeeze else out
