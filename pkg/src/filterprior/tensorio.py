"""Bit-exact archive formats and 3x3 filter extraction.

Three on-disk formats, all fixed little-endian so files are byte-identical
across platforms:

* TARC  - binary archive of named float32 tensors
          (magic "TARC", u32 version, u32 count, then per tensor:
           u16 name length, UTF-8 name, u8 rank, rank*u32 dims, f32 data)
* FBNK  - binary filter bank (magic "FBNK", u32 version, u32 N, u32 dim,
          N*dim f32) with a CSV sidecar <path>.meta carrying per-filter
          provenance (tensor name, out channel, in channel)
* GMM   - human-readable mixture model text; reals printed with 17
          significant digits so a read/write cycle is an exact fixed point
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyBankError,
    FormatError,
    TruncationError,
    ValidationError,
)

TARC_MAGIC = b"TARC"
FBNK_MAGIC = b"FBNK"
TARC_VERSION = 1
FBNK_VERSION = 1
GMM_VERSION = 1

KERNEL_SHAPE = (3, 3)
KERNEL_DIM = 9


def fmt_real(x) -> str:
    """Render a float with 17 significant digits (exact float64 round-trip)."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# TARC

@dataclass
class TensorEntry:
    name: str
    data: np.ndarray  # float32, shaped

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class TensorArchive:
    entries: list[TensorEntry] = field(default_factory=list)

    def validate(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate tensor names: {dupes}")
        for e in self.entries:
            if len(e.name.encode("utf-8")) > 0xFFFF:
                raise ValidationError(f"tensor name too long: {e.name[:40]}...")
            if e.data.ndim > 0xFF:
                raise ValidationError(f"tensor rank {e.data.ndim} exceeds 255")
            if any(d <= 0 or d > 0xFFFFFFFF for d in e.data.shape):
                raise ValidationError(f"bad dimension in shape {e.data.shape}")

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.data
        raise KeyError(name)


def write_tarc(archive: TensorArchive, path):
    archive.validate()
    buf = bytearray()
    buf += TARC_MAGIC
    buf += struct.pack("<II", TARC_VERSION, len(archive.entries))
    for e in archive.entries:
        name = e.name.encode("utf-8")
        buf += struct.pack("<H", len(name))
        buf += name
        buf += struct.pack("<B", e.data.ndim)
        buf += struct.pack(f"<{e.data.ndim}I", *e.data.shape)
        buf += e.data.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


class _Cursor:
    """Byte reader that raises TruncationError instead of slicing short."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(
                f"need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} remain"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def read_tarc(path) -> TensorArchive:
    cur = _Cursor(Path(path).read_bytes())
    magic = cur.take(4)
    if magic != TARC_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TARC_MAGIC!r}")
    version, count = cur.unpack("<II")
    if version != TARC_VERSION:
        raise FormatError(f"unsupported TARC version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        (rank,) = cur.unpack("<B")
        shape = cur.unpack(f"<{rank}I") if rank else ()
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = cur.take(4 * numel)
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        entries.append(TensorEntry(name, data))
    if not cur.exhausted:
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes after payload")
    archive = TensorArchive(entries)
    archive.validate()
    return archive


# ---------------------------------------------------------------------------
# Filter banks

@dataclass
class FilterMeta:
    tensor: str
    out_channel: int
    in_channel: int


@dataclass
class FilterBank:
    vectors: np.ndarray  # (N, dim) float64
    meta: list[FilterMeta]

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if len(self.meta) != self.n:
            raise ValidationError(
                f"meta length {len(self.meta)} != vector count {self.n}"
            )

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def iter_kernel_slices(data: np.ndarray):
    """Yield (out_channel, in_channel, flat 9-vector) for a trailing-(3,3) tensor.

    Slices are enumerated in lexicographic order of the leading indices,
    which for a (C_out, C_in, 3, 3) conv weight means out-major. Tensors
    whose trailing dims are not (3,3) yield nothing. This enumeration is
    the single source of truth shared by filter extraction and the
    regularizer's per-slice sums.
    """
    if data.ndim < 2 or data.shape[-2:] != KERNEL_SHAPE:
        return
    lead = data.shape[:-2]
    flat = np.ascontiguousarray(data, dtype=np.float64).reshape(-1, KERNEL_DIM)
    if len(lead) == 0:
        yield 0, 0, flat[0]
        return
    in_size = lead[-1]
    for i in range(flat.shape[0]):
        if len(lead) == 1:
            yield i, 0, flat[i]
        else:
            yield i // in_size, i % in_size, flat[i]


def extract_filters(archive: TensorArchive) -> FilterBank:
    """Collect every 3x3 kernel slice of the archive as a 9-vector bank.

    Qualifying tensors are those of rank >= 2 whose last two dims are (3,3);
    each leading-index combination contributes one row-major-flattened
    9-vector. Order: archive order, then leading-index lexicographic.
    Raises EmptyBankError when no tensor qualifies.
    """
    blocks = []
    meta = []
    for e in archive.entries:
        rows = []
        for out_c, in_c, vec in iter_kernel_slices(e.data):
            rows.append(vec)
            meta.append(FilterMeta(e.name, out_c, in_c))
        if rows:
            blocks.append(np.stack(rows))
    if not blocks:
        raise EmptyBankError("archive contains no tensor with trailing (3,3) dims")
    return FilterBank(np.concatenate(blocks, axis=0), meta)


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_fbank(bank: FilterBank, path):
    if bank.dim != KERNEL_DIM:
        warnings.warn(f"writing filter bank with dim={bank.dim} (expected 9)")
    buf = bytearray()
    buf += FBNK_MAGIC
    buf += struct.pack("<III", FBNK_VERSION, bank.n, bank.dim)
    buf += bank.vectors.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))
    with open(_sidecar_path(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tensor", "out_channel", "in_channel"])
        for m in bank.meta:
            w.writerow([m.tensor, m.out_channel, m.in_channel])


def read_fbank(path) -> FilterBank:
    cur = _Cursor(Path(path).read_bytes())
    magic = cur.take(4)
    if magic != FBNK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FBNK_MAGIC!r}")
    version, n, dim = cur.unpack("<III")
    if version != FBNK_VERSION:
        raise FormatError(f"unsupported FBNK version {version}")
    if dim != KERNEL_DIM:
        warnings.warn(f"reading filter bank with dim={dim} (expected 9)")
    raw = cur.take(4 * n * dim)
    if not cur.exhausted:
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes after payload")
    vectors = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, dim)
    meta = [FilterMeta("", 0, 0) for _ in range(n)]
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        with open(sidecar, newline="") as f:
            rows = list(csv.reader(f))
        if len(rows) != n + 1:
            raise FormatError(
                f"sidecar has {len(rows) - 1} rows, bank has {n} filters"
            )
        meta = [FilterMeta(r[0], int(r[1]), int(r[2])) for r in rows[1:]]
    return FilterBank(vectors, meta)


# ---------------------------------------------------------------------------
# Mixture model files

@dataclass
class GmmFile:
    dim: int
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, dim)
    variances: np.ndarray  # (K, dim), positive
    version: int = GMM_VERSION

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def validate(self):
        if self.k < 1:
            raise ValidationError("mixture must have at least one component")
        if self.means.shape != (self.k, self.dim):
            raise ValidationError(f"means shape {self.means.shape} != ({self.k}, {self.dim})")
        if self.variances.shape != (self.k, self.dim):
            raise ValidationError(f"variances shape {self.variances.shape} != ({self.k}, {self.dim})")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"weights sum to {self.weights.sum()!r}, not 1")
        if np.any(self.weights < 0):
            raise ValidationError("negative mixture weight")
        if np.any(self.variances <= 0):
            raise ValidationError("nonpositive variance")


def write_gmm(model: GmmFile, path):
    model.validate()
    lines = [
        f"GMM {model.version}",
        f"dim {model.dim}",
        f"components {model.k}",
        "weights " + " ".join(fmt_real(w) for w in model.weights),
    ]
    for k in range(model.k):
        lines.append(f"mean {k} " + " ".join(fmt_real(v) for v in model.means[k]))
        lines.append(f"var {k} " + " ".join(fmt_real(v) for v in model.variances[k]))
    Path(path).write_text("\n".join(lines) + "\n")


def _gmm_parse_error(lineno, text):
    return FormatError(f"GMM file line {lineno}: {text}")


def read_gmm(path) -> GmmFile:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty GMM file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "GMM":
        raise _gmm_parse_error(1, f"bad header {lines[0]!r}")
    if int(head[1]) != GMM_VERSION:
        raise FormatError(f"unsupported GMM version {head[1]}")

    def keyed(lineno, key, nvals=None):
        parts = lines[lineno].split()
        if not parts or parts[0] != key:
            raise _gmm_parse_error(lineno + 1, f"expected {key!r}, got {lines[lineno]!r}")
        vals = parts[1:]
        if nvals is not None and len(vals) != nvals:
            raise _gmm_parse_error(lineno + 1, f"expected {nvals} values, got {len(vals)}")
        return vals

    try:
        dim = int(keyed(1, "dim", 1)[0])
        k = int(keyed(2, "components", 1)[0])
        weights = np.array([float(v) for v in keyed(3, "weights", k)])
        means = np.empty((k, dim))
        variances = np.empty((k, dim))
        for j in range(k):
            mvals = keyed(4 + 2 * j, "mean", dim + 1)
            vvals = keyed(5 + 2 * j, "var", dim + 1)
            if int(mvals[0]) != j or int(vvals[0]) != j:
                raise _gmm_parse_error(5 + 2 * j, "component index out of order")
            means[j] = [float(v) for v in mvals[1:]]
            variances[j] = [float(v) for v in vvals[1:]]
    except IndexError:
        raise TruncationError("GMM file ends before all components are read") from None
    model = GmmFile(dim=dim, weights=weights, means=means, variances=variances)
    model.validate()
    return model
