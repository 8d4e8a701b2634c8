"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255, bit-exact."""

from __future__ import annotations

import numpy as np


class NetpbmError(Exception):
    pass


def write_image(path, img):
    """Write a uint8 HxW array as P5 or HxWx3 as P6."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 pixels, got {a.dtype}")
    if a.ndim == 2:
        magic, h, w = b"P5", a.shape[0], a.shape[1]
    elif a.ndim == 3 and a.shape[2] == 3:
        magic, h, w = b"P6", a.shape[0], a.shape[1]
    else:
        raise NetpbmError(f"expected HxW or HxWx3 image, got shape {a.shape}")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(a).tobytes())


def _read_header(f):
    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r} (only binary P5/P6)")

    def token():
        # skip whitespace and '#' comments, then read one token
        c = f.read(1)
        while c.isspace() or c == b"#":
            if c == b"#":
                while c not in (b"\n", b""):
                    c = f.read(1)
            c = f.read(1)
        tok = b""
        while c and not c.isspace():
            tok += c
            c = f.read(1)
        if not tok:
            raise NetpbmError("truncated header")
        return int(tok)

    w, h, maxval = token(), token(), token()
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 supported, got {maxval}")
    return magic, w, h


def read_header(path):
    """(width, height, channels) without reading pixel data."""
    with open(path, "rb") as f:
        magic, w, h = _read_header(f)
    return w, h, 3 if magic == b"P6" else 1


def read_image(path):
    """Read a P5 file as uint8 HxW, or a P6 file as uint8 HxWx3."""
    with open(path, "rb") as f:
        magic, w, h = _read_header(f)
        channels = 3 if magic == b"P6" else 1
        data = f.read(w * h * channels + 1)
    if len(data) < w * h * channels:
        raise NetpbmError(f"truncated pixel data in {path}")
    if len(data) > w * h * channels:
        raise NetpbmError(f"trailing bytes in {path}")
    a = np.frombuffer(data, dtype=np.uint8)
    return a.reshape(h, w) if channels == 1 else a.reshape(h, w, 3)
