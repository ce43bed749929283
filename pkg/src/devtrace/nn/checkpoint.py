"""Checkpoint files.

Layout (little-endian)::

    magic      4 bytes  b"DTCK"
    version    uint16   1
    meta_len   uint32
    meta       meta_len bytes of UTF-8 JSON (model kind tag, config, extras)
    params     record block
    buffers    record block
    has_opt    uint8
    [if has_opt]
      step     uint64
      lr, beta1, beta2, eps   float64 x 4
      m        record block (same names as params)
      v        record block

    record block = count uint32, then per record:
      name_len uint16, name (UTF-8), dtype_len uint8, dtype (numpy str, e.g. "<f4"),
      ndim uint8, dims uint32 x ndim, raw row-major values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"DTCK"
VERSION = 1


def _write_block(fh, arrays):
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw_name = name.encode("utf-8")
        dstr = dt.str.encode("ascii")
        fh.write(struct.pack("<H", len(raw_name)) + raw_name)
        fh.write(struct.pack("<B", len(dstr)) + dstr)
        fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def unpack(self, fmt):
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def take(self, n):
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def block(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nl,) = self.unpack("<H")
            name = self.take(nl).decode("utf-8")
            (dl,) = self.unpack("<B")
            dt = np.dtype(self.take(dl).decode("ascii"))
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="))
        return out


def save_checkpoint(path, params, buffers, meta, optimizer_state: AdamState | None = None):
    """``params``/``buffers`` map names to arrays (``Param`` objects are unwrapped)."""
    params = {k: getattr(v, "data", v) for k, v in params.items()}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(meta_raw)) + meta_raw)
        _write_block(fh, params)
        _write_block(fh, buffers)
        if optimizer_state is None:
            fh.write(b"\x00")
        else:
            st = optimizer_state
            fh.write(b"\x01" + struct.pack("<Q4d", st.step, st.lr, st.beta1, st.beta2, st.eps))
            _write_block(fh, st.m)
            _write_block(fh, st.v)


def load_checkpoint(path):
    """Return ``(params, buffers, meta, optimizer_state_or_None)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    r = _Reader(data)
    r.off = 4
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    params = r.block()
    buffers = r.block()
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, lr, b1, b2, eps = r.unpack("<Q4d")
        opt = AdamState(lr, b1, b2, eps, step, r.block(), r.block())
    return params, buffers, meta, opt
