"""Binary container for models and cached feature sets.

Layout (all integers 32-bit little-endian, all reals 64-bit little-endian)::

    magic        8 bytes ("ADBNMODL" for models, "ADBNFEAT" for features)
    version      u32
    header       format-specific dimensions and a length-prefixed digest
    payload      parameter or feature block
    text lines   u32 count, then per line u32 byte length + UTF-8 bytes
    checksum     u32 CRC-32C of every preceding byte

Model payload: for each layer ``b``, ``c`` then ``W`` in column-major
order, followed by the head weights (column-major) and head bias.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import crc32c
import numpy as np

from .data import LabeledPatchSet
from .dbn import DbnModel, OutputHead, StructureEvent, replay_structure
from .rbm import RbmParams

MODEL_MAGIC = b"ADBNMODL"
FEATURE_MAGIC = b"ADBNFEAT"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


class ModelFileError(Exception):
    """Base class for unreadable model or feature files."""


class CorruptFileError(ModelFileError):
    """Checksum mismatch, truncation or inconsistent contents."""


class VersionError(ModelFileError):
    """The file was written by an unsupported format version."""


# --------------------------------------------------------------------------
# low-level writer / reader

class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, _U32.pack(FORMAT_VERSION)]

    def u32(self, *values) -> None:
        for v in values:
            self.parts.append(_U32.pack(int(v)))

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def reals(self, arr) -> None:
        self.parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())

    def lines(self, lines) -> None:
        lines = list(lines)
        self.u32(len(lines))
        for line in lines:
            self.text(line)

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + _U32.pack(crc32c.crc32c(body))


class _Reader:
    def __init__(self, data: bytes, magic: bytes, what: str):
        if len(data) < len(magic) + 8:
            raise CorruptFileError(f"{what} file is truncated ({len(data)} bytes)")
        if data[:len(magic)] != magic:
            raise CorruptFileError(f"not a {what} file (bad magic {data[:len(magic)]!r})")
        version = _U32.unpack_from(data, len(magic))[0]
        if version != FORMAT_VERSION:
            raise VersionError(f"{what} file has format version {version}; "
                               f"this build reads version {FORMAT_VERSION}")
        body, stored = data[:-4], _U32.unpack_from(data, len(data) - 4)[0]
        actual = crc32c.crc32c(body)
        if stored != actual:
            raise CorruptFileError(
                f"{what} file checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")
        self.data = body
        self.pos = len(magic) + 4
        self.what = what

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError(f"{self.what} file ends early")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def text(self) -> str:
        try:
            return self._take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"{self.what} file has invalid UTF-8 text") from exc

    def reals(self, n: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * n), dtype=_F64).astype(np.float64)

    def lines(self) -> list:
        return [self.text() for _ in range(self.u32())]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptFileError(f"{self.what} file has {len(self.data) - self.pos} trailing bytes")


def _write_atomic(path, blob: bytes) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# --------------------------------------------------------------------------
# models

def model_to_bytes(model: DbnModel) -> bytes:
    w = _Writer(MODEL_MAGIC)
    w.u32(model.input_dim, len(model.layers), *model.hidden_sizes, model.n_classes)
    w.text(model.preprocess_digest)
    for layer in model.layers:
        w.reals(layer.b)
        w.reals(layer.c)
        w.reals(layer.W.ravel(order="F"))
    w.reals(model.head.weights.ravel(order="F"))
    w.reals(model.head.bias)
    w.lines(ev.to_line() for ev in model.structure_log)
    return w.finish()


def model_from_bytes(data: bytes) -> DbnModel:
    r = _Reader(data, MODEL_MAGIC, "model")
    input_dim, n_layers = r.u32(), r.u32()
    sizes = [r.u32() for _ in range(n_layers)]
    n_classes = r.u32()
    digest = r.text()
    if n_layers < 1 or input_dim < 1 or min(sizes) < 1 or n_classes < 2:
        raise CorruptFileError("model header has impossible dimensions")

    layers, prev = [], input_dim
    for size in sizes:
        b, c = r.reals(prev), r.reals(size)
        W = r.reals(prev * size).reshape((prev, size), order="F")
        layers.append(RbmParams(b, c, W))
        prev = size
    head = OutputHead(r.reals(prev * n_classes).reshape((prev, n_classes), order="F"),
                      r.reals(n_classes))
    try:
        events = [StructureEvent.from_line(line) for line in r.lines()]
    except (ValueError, KeyError) as exc:
        raise CorruptFileError(f"model structure log is malformed: {exc}") from exc
    r.done()

    if events:
        try:
            replayed = replay_structure(events)
        except (ValueError, IndexError) as exc:
            raise CorruptFileError(f"structure log does not replay: {exc}") from exc
        if replayed != (input_dim, sizes):
            raise CorruptFileError(f"structure log replays to {replayed}, "
                                   f"header says {(input_dim, sizes)}")
    return DbnModel(layers, head, events, digest)


def save_model(model: DbnModel, path) -> Path:
    """Write ``model`` atomically; returns the path."""
    return _write_atomic(path, model_to_bytes(model))


def load_model(path) -> DbnModel:
    """Read a model file, raising ``ModelFileError`` subclasses on any defect."""
    return model_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# feature sets

def save_features(data: LabeledPatchSet, path) -> Path:
    w = _Writer(FEATURE_MAGIC)
    w.u32(len(data), data.feature_dim, data.n_classes)
    w.text(data.provenance)
    w.reals(data.features)
    w.parts.append(np.asarray(data.labels, dtype="<u4").tobytes())
    w.lines([])
    return _write_atomic(path, w.finish())


def load_features(path) -> LabeledPatchSet:
    r = _Reader(Path(path).read_bytes(), FEATURE_MAGIC, "feature")
    n, dim, n_classes = r.u32(), r.u32(), r.u32()
    provenance = r.text()
    features = r.reals(n * dim).reshape(n, dim)
    labels = np.frombuffer(r._take(4 * n), dtype="<u4").astype(np.int64)
    r.lines()
    r.done()
    try:
        return LabeledPatchSet(features, labels, n_classes, provenance)
    except ValueError as exc:
        raise CorruptFileError(f"feature file contents are inconsistent: {exc}") from exc
