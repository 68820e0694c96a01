"""
Sparse model file (format version 1). Everything little-endian.

    offset  size  field
    0       4     magic "NRFP"
    4       2     u16 format version
    6       2     u16 flags (bit0: radiance field, i.e. encoding fields valid)
    8       8     i64 seed
    16      2     u16 l_pos
    18      2     u16 l_dir
    20      1     u8 include_identity
    21      1     u8 network count
    22      …     per network: u16 n, u32 × n widths, i16 skip_input_at (-1 none),
                  u8 hidden activation, u8 output activation (0 none, 1 relu), i64 seed
    …       …     per layer (network order, then layer order):
                  u8 tag, u32 rows, u32 cols, payload, u32 bias count, f32 × count
    end-4   4     u32 CRC-32 of every preceding byte

Layer payloads:
    tag 0  dense:        rows·cols f32 row-major, mask all ones
    tag 1  dense-zeros:  rows·cols f32 row-major, mask = (value != 0)
    tag 2  bitmap:       ceil(rows·cols / 8) mask bytes (bit j of byte k is
                         position 8k + j), u32 survivor count, survivors f32
                         in row-major mask order
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.core.errors import (
    BadMagicError,
    ChecksumMismatchError,
    CodecError,
    ContractError,
    DatasetIOError,
    DecodeError,
    PopcountMismatchError,
    SparsityViolationError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from app.compression.pruner import PruneReport, verify_sparsity
from app.field.encoding import EncodingConfig
from app.field.model import RadianceField
from app.mlp.network import (
    STORAGE_DTYPE,
    Activation,
    BiasVector,
    MaskedMatrix,
    Network,
    NetworkSpec,
)

logger = logging.getLogger(__name__)

MAGIC = b"NRFP"
FORMAT_VERSION = 1
FLAG_RADIANCE_FIELD = 0x1

_HEADER = struct.Struct("<4sHHqHHBB")
_NET_TAIL = struct.Struct("<hBBq")
_LAYER_HEAD = struct.Struct("<BII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")

_ACTIVATION_CODES = {Activation.NONE: 0, Activation.RELU: 1}
_CODE_ACTIVATIONS = {v: k for k, v in _ACTIVATION_CODES.items()}

Model = Union[RadianceField, Network]


class LayerEncoding(IntEnum):
    DENSE = 0
    DENSE_ZEROS = 1
    BITMAP = 2


@dataclass
class ByteReport:
    dense_bytes: int
    encoded_bytes: int
    layer_encodings: List[str] = field(default_factory=list)

    @property
    def measured_ratio(self) -> float:
        return self.dense_bytes / self.encoded_bytes


@dataclass
class CompressionSummary:
    ratio: float
    nominal_ratio: float
    measured_ratio: float


# ── Encoding ──────────────────────────────────────────────────────

def bitmap_bytes(n: int, survivors: int) -> int:
    return (n + 7) // 8 + _U32.size + 4 * survivors


def choose_encoding(w: MaskedMatrix, force: Optional[LayerEncoding] = None) -> LayerEncoding:
    """Smallest encoding that reproduces the layer exactly (or the forced one)."""
    all_live = bool(w.mask.all())
    zeros_ok = bool(np.array_equal(w.mask, w.values != 0))
    if force is LayerEncoding.BITMAP:
        return LayerEncoding.BITMAP
    if force is not None:
        if all_live:
            return LayerEncoding.DENSE
        if zeros_ok:
            return LayerEncoding.DENSE_ZEROS
        raise CodecError("dense encoding cannot represent a layer whose mask differs from its zero pattern")
    if all_live:
        return LayerEncoding.DENSE
    if bitmap_bytes(w.size, int(w.mask.sum())) < 4 * w.size or not zeros_ok:
        return LayerEncoding.BITMAP
    return LayerEncoding.DENSE_ZEROS


def _encode_layer(w: MaskedMatrix, b: BiasVector, tag: LayerEncoding) -> bytes:
    parts = [_LAYER_HEAD.pack(int(tag), w.rows, w.cols)]
    if tag is LayerEncoding.BITMAP:
        parts.append(np.packbits(w.mask.ravel(), bitorder="little").tobytes())
        survivors = w.values[w.mask]
        parts.append(_U32.pack(survivors.size))
        parts.append(survivors.astype(_F32).tobytes())
    else:
        parts.append(w.values.astype(_F32).tobytes())
    parts.append(_U32.pack(b.values.size))
    parts.append(b.values.astype(_F32).tobytes())
    return b"".join(parts)


def _encode_spec(spec: NetworkSpec) -> bytes:
    skip = -1 if spec.skip_input_at is None else spec.skip_input_at
    return b"".join([
        _U16.pack(len(spec.layer_widths)),
        struct.pack(f"<{len(spec.layer_widths)}I", *spec.layer_widths),
        _NET_TAIL.pack(
            skip,
            _ACTIVATION_CODES[spec.hidden_activation],
            _ACTIVATION_CODES[spec.output_activation],
            spec.seed,
        ),
    ])


def _networks(model: Model) -> List[Network]:
    return list(model.networks) if isinstance(model, RadianceField) else [model]


def encode_model(model: Model, force_encoding: Optional[LayerEncoding] = None) -> Tuple[bytes, ByteReport]:
    """Serialise a model; refuses models with nonzero values at masked slots."""
    _, violations = verify_sparsity(model)
    if violations:
        raise SparsityViolationError(f"{violations} masked weights hold nonzero values; refusing to serialise")

    nets = _networks(model)
    if isinstance(model, RadianceField):
        enc = model.encoding
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, FLAG_RADIANCE_FIELD, model.seed,
                              enc.l_pos, enc.l_dir, int(enc.include_identity), len(nets))
    else:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, model.spec.seed, 0, 0, 0, 1)

    parts = [header] + [_encode_spec(net.spec) for net in nets]
    dense_extra = 0
    tags = []
    for net in nets:
        for w, b in zip(net.weights, net.biases):
            tag = choose_encoding(w, force_encoding)
            layer = _encode_layer(w, b, tag)
            if tag is LayerEncoding.BITMAP:
                dense_extra += 4 * w.size - bitmap_bytes(w.size, int(w.mask.sum()))
            tags.append(tag.name.lower())
            parts.append(layer)
    body = b"".join(parts)
    data = body + _U32.pack(zlib.crc32(body))
    report = ByteReport(dense_bytes=len(data) + dense_extra, encoded_bytes=len(data), layer_encodings=tags)
    return data, report


def save(model: Model, path: str | Path, force_encoding: Optional[LayerEncoding] = None) -> ByteReport:
    data, report = encode_model(model, force_encoding)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise DatasetIOError(f"cannot write model file {path}: {exc}", path=str(path)) from exc
    logger.debug(
        "Saved %s: %d bytes (dense %d, x%.3f) layers=%s",
        path, report.encoded_bytes, report.dense_bytes, report.measured_ratio, report.layer_encodings,
        extra={"component": "codec"},
    )
    return report


# ── Decoding ──────────────────────────────────────────────────────

class _Reader:
    def __init__(self, data: bytes, end: int) -> None:
        self.data = data
        self.end = end
        self.pos = 0
        self.layer: Optional[int] = None

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError(f"file ends inside {what}", layer=self.layer, offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def floats(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * n, what), dtype=_F32).astype(STORAGE_DTYPE)


def _decode_spec(r: _Reader) -> NetworkSpec:
    start = r.pos
    (n,) = r.unpack(_U16, "width count")
    widths = struct.unpack(f"<{n}I", r.take(4 * n, "layer widths"))
    skip, hidden, output, seed = r.unpack(_NET_TAIL, "network header")
    try:
        return NetworkSpec(
            layer_widths=tuple(widths),
            skip_input_at=None if skip < 0 else skip,
            hidden_activation=_CODE_ACTIVATIONS[hidden],
            output_activation=_CODE_ACTIVATIONS[output],
            seed=seed,
        )
    except (KeyError, ValidationError) as exc:
        raise DecodeError(f"invalid network header: {exc}", offset=start) from exc


def _decode_layer(r: _Reader, spec: NetworkSpec, i: int) -> Tuple[MaskedMatrix, BiasVector]:
    start = r.pos
    tag, rows, cols = r.unpack(_LAYER_HEAD, "layer header")
    if (rows, cols) != spec.layer_shape(i):
        raise DecodeError(f"layer is {rows}×{cols}, header declares {spec.layer_shape(i)}",
                          layer=r.layer, offset=start)
    n = rows * cols
    if tag in (LayerEncoding.DENSE, LayerEncoding.DENSE_ZEROS):
        values = r.floats(n, "dense payload").reshape(rows, cols)
        mask = np.ones((rows, cols), dtype=bool) if tag == LayerEncoding.DENSE else values != 0
    elif tag == LayerEncoding.BITMAP:
        bits = np.frombuffer(r.take((n + 7) // 8, "mask bitmap"), dtype=np.uint8)
        mask = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(rows, cols)
        count_at = r.pos
        (count,) = r.unpack(_U32, "survivor count")
        if count != int(mask.sum()):
            raise PopcountMismatchError(
                f"survivor count {count} != bitmap popcount {int(mask.sum())}", layer=r.layer, offset=count_at
            )
        values = np.zeros((rows, cols), dtype=STORAGE_DTYPE)
        values[mask] = r.floats(count, "survivor values")
    else:
        raise DecodeError(f"unknown layer encoding tag {tag}", layer=r.layer, offset=start)

    bias_at = r.pos
    (n_bias,) = r.unpack(_U32, "bias count")
    if n_bias != cols:
        raise DecodeError(f"bias length {n_bias} != {cols} columns", layer=r.layer, offset=bias_at)
    biases = r.floats(n_bias, "biases")
    weight = MaskedMatrix(values=values, grads=np.zeros_like(values), mask=mask)
    return weight, BiasVector(values=biases, grads=np.zeros_like(biases))


def decode_model(data: bytes) -> Model:
    if len(data) < _HEADER.size + _U32.size:
        raise TruncatedFileError("file shorter than the fixed header", offset=len(data))
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}", offset=0)
    (version,) = _U16.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}", offset=4)
    end = len(data) - _U32.size
    (stored,) = _U32.unpack_from(data, end)
    actual = zlib.crc32(data[:end])
    if stored != actual:
        raise ChecksumMismatchError(f"checksum {stored:#010x} != computed {actual:#010x}", offset=end)

    r = _Reader(data, end)
    _, _, flags, seed, l_pos, l_dir, ident, n_nets = r.unpack(_HEADER, "header")
    specs = [_decode_spec(r) for _ in range(n_nets)]
    nets = []
    layer = 0
    for spec in specs:
        weights, biases = [], []
        for i in range(spec.n_layers):
            r.layer = layer
            w, b = _decode_layer(r, spec, i)
            weights.append(w)
            biases.append(b)
            layer += 1
        nets.append(Network(spec=spec, weights=weights, biases=biases))
    r.layer = None
    if r.pos != end:
        raise DecodeError(f"{end - r.pos} unexpected bytes before the checksum", offset=r.pos)

    if not flags & FLAG_RADIANCE_FIELD:
        if len(nets) != 1:
            raise DecodeError(f"plain network file holds {len(nets)} networks", offset=21)
        return nets[0]
    if len(nets) != 2:
        raise DecodeError(f"radiance field file holds {len(nets)} networks", offset=21)
    try:
        encoding = EncodingConfig(l_pos=l_pos, l_dir=l_dir, include_identity=bool(ident))
        return RadianceField(nets[0], nets[1], encoding, seed)
    except (ValidationError, ContractError) as exc:
        raise DecodeError(f"networks do not form a radiance field: {exc}", offset=16) from exc


def load(path: str | Path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read model file {path}: {exc}", path=str(path)) from exc
    return decode_model(data)


def load_field(path: str | Path) -> RadianceField:
    model = load(path)
    if not isinstance(model, RadianceField):
        raise DecodeError(f"{path} holds a plain network, not a radiance field", offset=6)
    return model


# ── Accounting ────────────────────────────────────────────────────

def compression_summary(prune: PruneReport, size: ByteReport) -> CompressionSummary:
    """Nominal 1/(1−p) beside the measured dense/encoded byte ratio."""
    return CompressionSummary(
        ratio=prune.ratio,
        nominal_ratio=1.0 / (1.0 - prune.ratio),
        measured_ratio=size.measured_ratio,
    )
