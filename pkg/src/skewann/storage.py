"""Disk-resident vector storage with instrumented fetch counters.

Supported on-disk layouts, all little-endian and bit-exact:

* fvecs / bvecs / ivecs: each record is a 4-byte int32 dim followed by
  dim elements (float32 / uint8 / int32). Files must have a uniform dim.
* raw store: header ``{magic "ORCV", version u32, count u64, dim u32,
  elem_kind u8}`` then densely packed row-major records.

Raw-vector fetches are what the engine tries to avoid issuing; the store
counts every one of them, plus the distinct 4096-byte pages touched, so
"SSD reads" is a first-class measurable quantity. Counters are atomic
and shared; per-query accounting goes through a private FetchTracker.
"""

from __future__ import annotations

import mmap
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PAGE_SIZE = 4096

RAW_MAGIC = b"ORCV"
RAW_HEADER = struct.Struct("<4sIQIB")  # magic, version, count, dim, elem_kind
RAW_VERSION = 1

_ELEM_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("<u1")}
_ELEM_CODES = {"float32": 0, "uint8": 1}
_CODE_ELEMS = {v: k for k, v in _ELEM_CODES.items()}


class FormatError(ValueError):
    """File contents inconsistent with the declared format."""


# ---------------------------------------------------------------------------
# fvecs / bvecs / ivecs
# ---------------------------------------------------------------------------

_VEC_DTYPES = {".fvecs": np.dtype("<f4"), ".bvecs": np.dtype("<u1"), ".ivecs": np.dtype("<i4")}


def _vecs_dtype(path, kind=None):
    if kind is not None:
        return _VEC_DTYPES["." + kind.lstrip(".")]
    ext = os.path.splitext(path)[1]
    if ext not in _VEC_DTYPES:
        raise FormatError(f"cannot infer vecs element type from {path!r}")
    return _VEC_DTYPES[ext]


def read_vecs(path, kind=None):
    """Read an fvecs/bvecs/ivecs file into an (n, dim) array.

    The dim of the first record must be shared by every record; files
    with mixed dims are rejected as malformed.
    """
    dtype = _vecs_dtype(path, kind)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.empty((0, 0), dtype=dtype)
    if raw.size < 4:
        raise FormatError(f"{path}: truncated header")
    dim = int(np.frombuffer(raw[:4].tobytes(), dtype="<i4")[0])
    if dim <= 0:
        raise FormatError(f"{path}: non-positive dim {dim}")
    stride = 4 + dim * dtype.itemsize
    if raw.size % stride != 0:
        raise FormatError(f"{path}: size {raw.size} not a multiple of record stride {stride}")
    recs = raw.reshape(-1, stride)
    dims = recs[:, :4].copy().view("<i4").ravel()
    if not np.all(dims == dim):
        raise FormatError(f"{path}: records have mixed dims")
    return recs[:, 4:].copy().view(dtype).reshape(-1, dim)


def write_vecs(path, data, kind=None):
    """Write an (n, dim) array as fvecs/bvecs/ivecs (per-record dim headers)."""
    dtype = _vecs_dtype(path, kind)
    data = np.ascontiguousarray(data, dtype=dtype)
    n, dim = data.shape
    stride = 4 + dim * dtype.itemsize
    out = np.empty((n, stride), dtype=np.uint8)
    out[:, :4] = np.full((n, 1), dim, dtype="<i4").view(np.uint8)
    out[:, 4:] = data.view(np.uint8).reshape(n, dim * dtype.itemsize)
    out.tofile(path)


read_fvecs = lambda path: read_vecs(path, "fvecs")  # noqa: E731
read_bvecs = lambda path: read_vecs(path, "bvecs")  # noqa: E731
read_ivecs = lambda path: read_vecs(path, "ivecs")  # noqa: E731


def write_raw_store(path, data, elem_kind="float32"):
    """Write a matrix as an ORCV raw store."""
    dtype = _ELEM_DTYPES[elem_kind]
    data = np.ascontiguousarray(data, dtype=dtype)
    n, dim = data.shape
    with open(path, "wb") as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, dim, _ELEM_CODES[elem_kind]))
        data.tofile(f)


# ---------------------------------------------------------------------------
# VectorStore
# ---------------------------------------------------------------------------


@dataclass
class FetchTracker:
    """Per-query fetch accounting: raw fetches and distinct pages touched."""

    fetches: int = 0
    pages: set = field(default_factory=set)

    @property
    def pages_touched(self):
        return len(self.pages)


class VectorStore:
    """Read-only vector matrix on disk with counted fetches.

    Shareable across concurrent query workers; counters are atomic, and
    no writes occur after build time. ``backing="mmap"`` (default) maps
    the file; ``backing="buffered"`` issues an explicit pread per record
    so counting stays meaningful under aggressive OS readahead.
    """

    def __init__(self, path, count, dim, elem_kind, data_offset, record_stride,
                 payload_offset, backing):
        self.path = path
        self.count = count
        self.dim = dim
        self.elem_kind = elem_kind
        self._dtype = _ELEM_DTYPES[elem_kind]
        self._data_offset = data_offset
        self._stride = record_stride
        self._payload_offset = payload_offset
        self._backing = backing
        self._lock = threading.Lock()
        self.fetch_counter = 0
        self._pages = set()
        self._fh = open(path, "rb")
        if backing == "mmap":
            self._mm = mmap.mmap(self._fh.fileno(), 0, access=mmap.ACCESS_READ) if count else None
            self._matrix = self._build_matrix_view()
        elif backing == "buffered":
            self._mm = None
            self._matrix = None
        else:
            raise ValueError(f"unknown backing {backing!r}")

    # -- construction ------------------------------------------------------

    @classmethod
    def open(cls, path, elem_kind=None, dim=None, backing="mmap"):
        """Open a vector file (raw store or fvecs/bvecs) with validation.

        For raw stores the header is authoritative and any elem_kind/dim
        passed in is cross-checked. For vecs files the elem kind comes
        from the argument or the extension and dim from the first record.
        """
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            head = f.read(RAW_HEADER.size)
        if head[:4] == RAW_MAGIC:
            if len(head) < RAW_HEADER.size:
                raise FormatError(f"{path}: truncated raw-store header")
            magic, version, count, hdim, code = RAW_HEADER.unpack(head)
            if version != RAW_VERSION:
                raise FormatError(f"{path}: unsupported raw-store version {version}")
            if code not in _CODE_ELEMS:
                raise FormatError(f"{path}: unknown elem kind code {code}")
            kind = _CODE_ELEMS[code]
            if elem_kind is not None and elem_kind != kind:
                raise FormatError(f"{path}: elem kind {kind} != requested {elem_kind}")
            if dim is not None and dim != hdim:
                raise FormatError(f"{path}: dim {hdim} != requested {dim}")
            stride = hdim * _ELEM_DTYPES[kind].itemsize
            expect = RAW_HEADER.size + count * stride
            if size != expect:
                raise FormatError(f"{path}: size {size}, expected {expect}")
            return cls(path, count, hdim, kind, RAW_HEADER.size, stride, 0, backing)

        if elem_kind is None:
            ext = os.path.splitext(path)[1]
            elem_kind = {".fvecs": "float32", ".bvecs": "uint8"}.get(ext)
            if elem_kind is None:
                raise FormatError(f"{path}: cannot infer elem kind; pass elem_kind")
        esize = _ELEM_DTYPES[elem_kind].itemsize
        if size == 0:
            if dim is None:
                raise FormatError(f"{path}: empty file needs an explicit dim")
            return cls(path, 0, dim, elem_kind, 0, 4 + dim * esize, 4, backing)
        if size < 4:
            raise FormatError(f"{path}: truncated record header")
        with open(path, "rb") as f:
            fdim = struct.unpack("<i", f.read(4))[0]
        if fdim <= 0:
            raise FormatError(f"{path}: non-positive dim {fdim}")
        if dim is not None and dim != fdim:
            raise FormatError(f"{path}: dim {fdim} != requested {dim}")
        stride = 4 + fdim * esize
        if size % stride != 0:
            raise FormatError(f"{path}: size {size} not a multiple of record stride {stride}")
        return cls(path, size // stride, fdim, elem_kind, 0, stride, 4, backing)

    def _build_matrix_view(self):
        if self.count == 0:
            return np.empty((0, self.dim), dtype=self._dtype)
        esize = self._dtype.itemsize
        if self._payload_offset == 0:
            flat = np.frombuffer(self._mm, dtype=self._dtype,
                                 count=self.count * self.dim, offset=self._data_offset)
            return flat.reshape(self.count, self.dim)
        raw = np.frombuffer(self._mm, dtype=np.uint8,
                            count=self.count * self._stride, offset=self._data_offset)
        recs = raw.reshape(self.count, self._stride)
        return recs[:, self._payload_offset:].view(self._dtype)

    # -- fetching ----------------------------------------------------------

    def _record_pages(self, i):
        start = self._data_offset + i * self._stride
        end = start + self._stride
        return range(start // PAGE_SIZE, (end - 1) // PAGE_SIZE + 1)

    def _count_fetches(self, ids, tracker):
        new_pages = []
        for i in ids:
            for p in self._record_pages(int(i)):
                new_pages.append(p)
        with self._lock:
            self.fetch_counter += len(ids)
            self._pages.update(new_pages)
        if tracker is not None:
            tracker.fetches += len(ids)
            tracker.pages.update(new_pages)

    def fetch(self, i, tracker=None):
        """Fetch vector i, counting the read. Out-of-range is an error."""
        i = int(i)
        if not 0 <= i < self.count:
            raise IndexError(f"vector index {i} out of range [0, {self.count})")
        self._count_fetches((i,), tracker)
        return self._read_raw(i)

    def fetch_block(self, ids, tracker=None):
        """Fetch a batch of vectors as an (len(ids), dim) array, counting each."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return np.empty((0, self.dim), dtype=self._dtype)
        if ids.min() < 0 or ids.max() >= self.count:
            raise IndexError("vector index out of range")
        self._count_fetches(ids, tracker)
        if self._matrix is not None:
            return self._matrix[ids]
        return np.stack([self._read_raw(int(i)) for i in ids])

    def _read_raw(self, i):
        """Uncounted single-record read (integrity checks, verification)."""
        if self._matrix is not None:
            return self._matrix[i].copy()
        off = self._data_offset + i * self._stride + self._payload_offset
        buf = os.pread(self._fh.fileno(), self.dim * self._dtype.itemsize, off)
        return np.frombuffer(buf, dtype=self._dtype).copy()

    def load_all(self):
        """Whole dataset as one in-memory array (build-time use only)."""
        if self._matrix is not None:
            return np.ascontiguousarray(self._matrix)
        if self.count == 0:
            return np.empty((0, self.dim), dtype=self._dtype)
        return self.fetch_block(np.arange(self.count))

    # -- counters ----------------------------------------------------------

    @property
    def page_counter(self):
        with self._lock:
            return len(self._pages)

    def reset_counters(self):
        with self._lock:
            self.fetch_counter = 0
            self._pages.clear()

    def close(self):
        self._matrix = None
        if self._mm is not None:
            self._mm.close()
            self._mm = None
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# distance metrics
# ---------------------------------------------------------------------------


class DistanceMetric:
    """Distance over vectors: "l2" (squared L2 on the hot path) or "ip".

    Triangle-inequality pruning bounds are computed on true (non-squared)
    L2 because squared L2 is not a metric; inner-product distance admits
    no such bound, so pruning must stay off under "ip".
    """

    KINDS = ("l2", "ip")

    def __init__(self, kind="l2"):
        if kind not in self.KINDS:
            raise ValueError(f"unknown metric kind {kind!r}")
        self.kind = kind

    @property
    def supports_pruning(self):
        return self.kind == "l2"

    def pair(self, a, b):
        """Hot-path distance: squared L2, or negated inner product."""
        a = np.ascontiguousarray(a, dtype=np.float32)
        b = np.ascontiguousarray(b, dtype=np.float32)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        if self.kind == "l2":
            return float(kernels.l2sq_pair(a, b))
        return float(-np.dot(a.astype(np.float64), b.astype(np.float64)))

    def batch(self, q, X):
        q = np.ascontiguousarray(q, dtype=np.float32)
        X = np.ascontiguousarray(X, dtype=np.float32)
        if X.shape[1] != q.shape[0]:
            raise ValueError(f"dimension mismatch: {q.shape[0]} vs {X.shape[1]}")
        if self.kind == "l2":
            return kernels.l2sq_batch(q, X)
        return kernels.ip_dist_batch(q, X)

    def true_l2_pair(self, a, b):
        """Non-squared L2, the value bound comparisons run on."""
        if self.kind != "l2":
            raise ValueError("true L2 is only defined for the l2 metric")
        return float(np.sqrt(self.pair(a, b)))


def l2(a, b):
    """True (non-squared) L2 between two vectors."""
    return DistanceMetric("l2").true_l2_pair(a, b)
