"""Binary model files, PGM/SASR rasters and results CSV.

Model file (``.satr``), all integers little-endian::

    b"SATR" | version u16 | spec_len u32 | spec JSON (UTF-8) | block_count u32
    then per block:
    layer_index u32 | name_len u8 | name | rank u8 | dims u32 * rank | values f32 * prod(dims)

SVM file (``.ssvm``)::

    b"SSVM" | version u16 | K u32 | dim u32 | C f64 | K * (name_len u8 | name UTF-8)
    | weights f64 * K*dim | biases f64 * K | mean f64 * dim | scale f64 * dim

Real-valued raster (``.sasr``): ``b"SASR" | width u32 | height u32 | f32 * width*height``
in row-major order.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (BadMagicError, FormatError, ShapeMismatchError, TruncatedFileError,
                     UnsupportedDepthError, VersionError)
from .network import Network, NetworkSpec
from .svm import SvmModel

MODEL_MAGIC = b"SATR"
MODEL_VERSION = 1
RASTER_MAGIC = b"SASR"
SVM_MAGIC = b"SSVM"
SVM_VERSION = 1


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.what}: truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).copy()


def model_to_bytes(net: Network) -> bytes:
    spec = net.spec.to_json().encode("utf-8")
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HI", MODEL_VERSION, len(spec))
    out += spec
    out += struct.pack("<I", len(net.params))
    for (idx, name), values in net.params.items():
        nb = name.encode("ascii")
        out += struct.pack("<IB", idx, len(nb)) + nb
        out += struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape)
        out += np.ascontiguousarray(values, dtype="<f4").tobytes()
    return bytes(out)


def model_from_bytes(data: bytes, what: str = "model") -> Network:
    r = _Reader(data, what)
    magic = r.take(4)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{what}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    (version,) = r.unpack("H")
    if version != MODEL_VERSION:
        raise VersionError(f"{what}: unsupported format version {version} (expected {MODEL_VERSION})")
    (spec_len,) = r.unpack("I")
    try:
        spec = NetworkSpec.from_json(r.take(spec_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{what}: invalid embedded network description: {exc}") from exc
    (count,) = r.unpack("I")
    expected = spec.param_shapes()
    params = {}
    for _ in range(count):
        idx, name_len = r.unpack("IB")
        name = r.take(name_len).decode("ascii", errors="replace")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I")
        key = (idx, name)
        if expected.get(key) != tuple(dims):
            raise ShapeMismatchError(
                f"{what}: block {key} has shape {tuple(dims)}, network expects {expected.get(key)}")
        params[key] = r.array("<f4", int(np.prod(dims, dtype=np.int64))).astype(np.float64).reshape(dims)
    if set(params) != set(expected):
        raise ShapeMismatchError(f"{what}: missing parameter blocks {sorted(set(expected) - set(params))}")
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
    return Network(spec, params)


def save_model(net: Network, path) -> None:
    Path(path).write_bytes(model_to_bytes(net))


def load_model(path) -> Network:
    return model_from_bytes(Path(path).read_bytes(), what=str(path))


def svm_to_bytes(model: SvmModel) -> bytes:
    k, d = model.weights.shape
    out = bytearray(SVM_MAGIC)
    out += struct.pack("<HIId", SVM_VERSION, k, d, model.C)
    for name in model.class_names:
        nb = name.encode("utf-8")
        if len(nb) > 255:
            raise FormatError(f"class name too long for SVM file: {name!r}")
        out += struct.pack("<B", len(nb)) + nb
    for arr in (model.weights, model.biases, model.mean, model.scale):
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def svm_from_bytes(data: bytes, what: str = "SVM") -> SvmModel:
    r = _Reader(data, what)
    magic = r.take(4)
    if magic != SVM_MAGIC:
        raise BadMagicError(f"{what}: bad magic {magic!r}, expected {SVM_MAGIC!r}")
    (version,) = r.unpack("H")
    if version != SVM_VERSION:
        raise VersionError(f"{what}: unsupported format version {version} (expected {SVM_VERSION})")
    k, d, c = r.unpack("IId")
    names = []
    for _ in range(k):
        (n,) = r.unpack("B")
        try:
            names.append(r.take(n).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what}: class name is not UTF-8") from exc
    weights = r.array("<f8", k * d).reshape(k, d)
    biases = r.array("<f8", k)
    mean = r.array("<f8", d)
    scale = r.array("<f8", d)
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
    try:
        return SvmModel(tuple(names), weights, biases, c, mean, scale)
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from exc


def save_svm(model: SvmModel, path) -> None:
    Path(path).write_bytes(svm_to_bytes(model))


def load_svm(path) -> SvmModel:
    return svm_from_bytes(Path(path).read_bytes(), what=str(path))


# -- rasters -----------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Whitespace-separated header tokens (with # comments) and the data offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("PGM header ended early")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def pgm_from_bytes(data: bytes, what: str = "PGM") -> np.ndarray:
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{what}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{what}: malformed header: {exc}") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{what}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedDepthError(f"{what}: maxval {maxval} unsupported (only 8-bit, maxval 255)")
    raster = data[offset:offset + width * height]
    if len(raster) != width * height:
        raise TruncatedFileError(f"{what}: expected {width * height} pixel bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def pgm_to_bytes(image) -> bytes:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise FormatError("PGM values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def read_pgm(path) -> np.ndarray:
    return pgm_from_bytes(Path(path).read_bytes(), what=str(path))


def write_pgm(path, image) -> None:
    Path(path).write_bytes(pgm_to_bytes(image))


def sasr_to_bytes(image) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"SASR needs a 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise FormatError("SASR values must be finite and nonnegative")
    h, w = arr.shape
    return RASTER_MAGIC + struct.pack("<II", w, h) + arr.astype("<f4").tobytes()


def sasr_from_bytes(data: bytes, what: str = "SASR") -> np.ndarray:
    r = _Reader(data, what)
    magic = r.take(4)
    if magic != RASTER_MAGIC:
        raise BadMagicError(f"{what}: bad magic {magic!r}, expected {RASTER_MAGIC!r}")
    w, h = r.unpack("II")
    values = r.array("<f4", w * h)
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise FormatError(f"{what}: raster contains negative or non-finite values")
    return values.astype(np.float64).reshape(h, w)


def read_sasr(path) -> np.ndarray:
    return sasr_from_bytes(Path(path).read_bytes(), what=str(path))


def write_sasr(path, image) -> None:
    Path(path).write_bytes(sasr_to_bytes(image))


def read_image(path) -> np.ndarray:
    """Load a raster on the [0, 1] magnitude scale (PGM is divided by 255)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path).astype(np.float64) / 255.0
    return read_sasr(path)


def write_image(path, image) -> None:
    """Write SASR as-is, or PGM after scaling [0, 1] to [0, 255]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, to_uint8(image))
    else:
        write_sasr(path, image)


def to_uint8(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# -- results tables ----------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def results_csv_text(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_results_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    """UTF-8 CSV with a header row; reals get six decimals, None becomes an empty field."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(results_csv_text(rows, columns))
