"""Image file I/O: 8/16-bit PGM/PPM and PNG, mapped to [0, 1] reals.

PGM/PPM use the binary Netpbm formats (P5/P6) on write and also accept
the ASCII variants (P2/P3) on read; 16-bit samples are big-endian per
the Netpbm convention. PNG goes through Pillow (8-bit gray/RGB and
16-bit gray).
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import ImageTensor

__all__ = ["read_image", "write_image"]


def _tokens(raw: bytes):
    # Netpbm header tokens, skipping '#' comments.
    i = 0
    while True:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        if start == i:
            return
        yield raw[start:i], i


def _read_pnm(path) -> ImageTensor:
    raw = open(path, "rb").read()
    toks = _tokens(raw)
    magic, _ = next(toks)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    width, _ = next(toks)
    height, _ = next(toks)
    maxval, pos = next(toks)
    width, height, maxval = int(width), int(height), int(maxval)
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P2", b"P3"):
        vals = np.array(raw[pos:].split()[:count], dtype=np.float64)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(raw, dtype=dtype, count=count, offset=pos + 1).astype(np.float64)
    if vals.size != count:
        raise ValueError(f"truncated PNM file {path}")
    img = vals.reshape(height, width, channels) / maxval
    return ImageTensor(np.moveaxis(img, 2, 0))


def _write_pnm(path, img: ImageTensor, bit_depth: int):
    maxval = (1 << bit_depth) - 1
    data = np.clip(img.data, 0.0, 1.0)
    quant = np.rint(data * maxval)
    quant = quant.astype(">u2" if bit_depth == 16 else "u1")
    magic = b"P6" if img.channels == 3 else b"P5"
    inter = np.moveaxis(quant, 0, 2)  # interleave channels for the wire format
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (img.width, img.height, maxval))
        fh.write(inter.tobytes())


def _read_png(path) -> ImageTensor:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return ImageTensor(arr)
        if im.mode == "L":
            return ImageTensor(np.asarray(im, dtype=np.float64) / 255.0)
        conv = im.convert("RGB")
        arr = np.asarray(conv, dtype=np.float64) / 255.0
        return ImageTensor(np.moveaxis(arr, 2, 0))


def _write_png(path, img: ImageTensor, bit_depth: int):
    data = np.clip(img.data, 0.0, 1.0)
    if bit_depth == 16:
        if img.channels != 1:
            raise ValueError("16-bit PNG output is supported for single-channel images only")
        quant = np.rint(data[0] * 65535).astype(np.uint16)
        Image.fromarray(quant).save(path)
        return
    quant = np.rint(data * 255).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(quant[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(quant, 0, 2), mode="RGB").save(path)


def read_image(path) -> ImageTensor:
    """Load a PGM/PPM/PNG file as an ImageTensor with values in [0, 1]."""
    suffix = str(path).lower().rsplit(".", 1)[-1]
    if suffix in ("pgm", "ppm", "pnm"):
        return _read_pnm(path)
    if suffix == "png":
        return _read_png(path)
    raise ValueError(f"unsupported image extension .{suffix}")


def write_image(path, img: ImageTensor, bit_depth: int = 8):
    """Write an ImageTensor to PGM/PPM/PNG, quantized from [0, 1]."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    suffix = str(path).lower().rsplit(".", 1)[-1]
    if suffix in ("pgm", "ppm", "pnm"):
        _write_pnm(path, img, bit_depth)
    elif suffix == "png":
        _write_png(path, img, bit_depth)
    else:
        raise ValueError(f"unsupported image extension .{suffix}")
