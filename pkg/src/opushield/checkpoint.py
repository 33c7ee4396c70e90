"""Binary checkpoints for the defended head and the base network.

Layout (all little-endian): 4-byte magic, u16 format version, u32 dims,
u64 seeds where applicable, then float64 arrays row-major in a fixed order.
The fixed surrogate/feedback matrices are regenerated from their seeds and
never stored.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .base import BaseNet
from .errors import DataError
from .model import ClassifierParams, fixed_feedback, fixed_surrogate

__all__ = ["save_classifier", "load_classifier", "save_base", "load_base"]

HEAD_MAGIC = b"OPUC"
BASE_MAGIC = b"BASE"
FORMAT_VERSION = 1


def _write_arrays(f, arrays) -> None:
    for arr in arrays:
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise DataError("checkpoint truncated")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _check_header(f, magic: bytes, path) -> None:
    got = f.read(4)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", f.read(2))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")


def save_classifier(path, p: ClassifierParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEAD_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(
            struct.pack(
                "<IIII",
                p.feature_dim,
                p.opu_input_dim,
                p.opu_output_dim,
                p.num_classes,
            )
        )
        f.write(struct.pack("<QQ", p.r_seed, p.b_seed))
        _write_arrays(f, [p.W1, p.b1, p.W3, p.b3])


def load_classifier(path) -> ClassifierParams:
    path = Path(path)
    with open(path, "rb") as f:
        _check_header(f, HEAD_MAGIC, path)
        feature, opu_in, opu_out, classes = struct.unpack("<IIII", f.read(16))
        r_seed, b_seed = struct.unpack("<QQ", f.read(16))
        W1 = _read_array(f, (opu_in, feature))
        b1 = _read_array(f, (opu_in,))
        W3 = _read_array(f, (classes, opu_out))
        b3 = _read_array(f, (classes,))
    return ClassifierParams(
        W1=W1,
        b1=b1,
        W3=W3,
        b3=b3,
        R=fixed_surrogate(opu_in, opu_out, r_seed),
        B=fixed_feedback(opu_in, classes, b_seed),
        r_seed=r_seed,
        b_seed=b_seed,
    )


def save_base(path, net: BaseNet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hidden = net.Wa.shape[0]
    with open(path, "wb") as f:
        f.write(BASE_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(
            struct.pack("<IIII", net.input_dim, hidden, net.feature_dim, net.num_classes)
        )
        _write_arrays(f, [net.Wa, net.ba, net.Wb, net.bb, net.Wc, net.bc])


def load_base(path) -> BaseNet:
    path = Path(path)
    with open(path, "rb") as f:
        _check_header(f, BASE_MAGIC, path)
        input_dim, hidden, feature, classes = struct.unpack("<IIII", f.read(16))
        return BaseNet(
            Wa=_read_array(f, (hidden, input_dim)),
            ba=_read_array(f, (hidden,)),
            Wb=_read_array(f, (feature, hidden)),
            bb=_read_array(f, (feature,)),
            Wc=_read_array(f, (classes, feature)),
            bc=_read_array(f, (classes,)),
        )
