"""Sharded record containers for tensor streams.

File layout (all integers little-endian):

    header, 16 bytes, never compressed:
        magic   8s   b"PRESTOC1"
        version u8   1
        comp    u8   0 none / 1 gzip / 2 zlib
        reserved 6x u8 zero
    record stream (whole stream compressed when comp != 0):
        length  u64  payload byte count
        lencrc  u32  CRC32 of the 8 length bytes
        payload length bytes
        crc     u32  CRC32 of the payload

A tensor payload is: dtype code u8, rank u8, rank extents as u64, then the
row-major element bytes.  Writing with k shards deals samples round-robin,
so shard sample counts differ by at most one and reading the shards back
round-robin restores the original order.
"""

from __future__ import annotations

import io
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .core import Compression, DType, Tensor
from .storage import StorageBackend

MAGIC = b"PRESTOC1"
VERSION = 1
HEADER_LEN = 16
RECORD_OVERHEAD = 16  # length + lencrc + crc

_COMP_CODES = {Compression.NONE: 0, Compression.GZIP: 1, Compression.ZLIB: 2}
_CODE_COMPS = {v: k for k, v in _COMP_CODES.items()}
_EXTENSIONS = {Compression.NONE: ".prc", Compression.GZIP: ".prc.gz", Compression.ZLIB: ".prc.zz"}
# wbits selecting the container written/expected by zlib
_WBITS = {Compression.GZIP: 31, Compression.ZLIB: 15}

_LEN_STRUCT = struct.Struct("<Q")
_CRC_STRUCT = struct.Struct("<I")


class ContainerFormatError(ValueError):
    """The container violates the on-disk format."""


class BadMagicError(ContainerFormatError):
    pass


class TruncatedRecordError(ContainerFormatError):
    pass


class CrcMismatchError(ContainerFormatError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (record stream offset {offset})")
        self.offset = offset


class ZeroOriginalError(ValueError):
    pass


def space_saving(original_bytes: int, compressed_bytes: int) -> float:
    """1 - compressed/original; negative when compression inflates."""
    if original_bytes == 0:
        raise ZeroOriginalError("original size is zero")
    return 1.0 - compressed_bytes / original_bytes


def extension_for(compression: Compression) -> str:
    return _EXTENSIONS[compression]


def compression_for_path(path: str | Path) -> Compression:
    name = str(path)
    for comp, ext in _EXTENSIONS.items():
        if name.endswith(ext):
            return comp
    raise ValueError(f"not a container path: {path}")


def shard_paths(base: str | Path, shards: int, compression: Compression) -> list[Path]:
    ext = extension_for(compression)
    return [Path(f"{base}-{i:05d}-of-{shards:05d}{ext}") for i in range(shards)]


def encode_tensor(tensor: Tensor) -> bytes:
    parts = [
        struct.pack("<BB", tensor.dtype.code, tensor.rank),
        struct.pack(f"<{tensor.rank}Q", *tensor.shape) if tensor.rank else b"",
        tensor.data,
    ]
    return b"".join(parts)


def decode_tensor(payload: bytes) -> Tensor:
    if len(payload) < 2:
        raise ContainerFormatError("tensor payload shorter than its header")
    code, rank = payload[0], payload[1]
    dtype = DType.from_code(code)
    dims_end = 2 + 8 * rank
    if len(payload) < dims_end:
        raise ContainerFormatError("tensor payload truncated inside extents")
    shape = struct.unpack(f"<{rank}Q", payload[2:dims_end]) if rank else ()
    return Tensor(dtype, tuple(int(d) for d in shape), payload[dims_end:])


def encoded_size(tensor: Tensor) -> int:
    return 2 + 8 * tensor.rank + tensor.nbytes


class _Sink:
    """Writes the record stream, compressing on the fly when asked."""

    def __init__(self, fh, compression: Compression, level: int = 6) -> None:
        self._fh = fh
        self._comp = (
            zlib.compressobj(level, zlib.DEFLATED, _WBITS[compression])
            if compression is not Compression.NONE
            else None
        )
        fh.write(struct.pack("<8sBB6x", MAGIC, VERSION, _COMP_CODES[compression]))

    def write_record(self, payload: bytes) -> None:
        length = _LEN_STRUCT.pack(len(payload))
        frame = b"".join(
            (length, _CRC_STRUCT.pack(zlib.crc32(length)), payload, _CRC_STRUCT.pack(zlib.crc32(payload)))
        )
        if self._comp is None:
            self._fh.write(frame)
        else:
            squeezed = self._comp.compress(frame)
            if squeezed:
                self._fh.write(squeezed)

    def close(self) -> None:
        if self._comp is not None:
            tail = self._comp.flush()
            if tail:
                self._fh.write(tail)
        self._fh.close()


@dataclass(frozen=True)
class WriteStats:
    bytes_written: int  # total on-store size including headers
    seconds: float
    samples: int
    paths: tuple[Path, ...]


def write_container(
    samples: Iterable[Tensor],
    base: str | Path,
    compression: Compression = Compression.NONE,
    shards: int = 1,
    backend: StorageBackend | None = None,
    level: int = 6,
) -> WriteStats:
    """Deal samples round-robin into shard files under `base`."""
    if shards < 1:
        raise ValueError("shards must be >= 1")
    backend = backend or StorageBackend()
    paths = shard_paths(base, shards, compression)
    start = time.perf_counter()
    sinks = [_Sink(backend.open_write(p), compression, level) for p in paths]
    count = 0
    try:
        for i, tensor in enumerate(samples):
            sinks[i % shards].write_record(encode_tensor(tensor))
            count = i + 1
    finally:
        for sink in sinks:
            sink.close()
    seconds = time.perf_counter() - start
    total = sum(backend.size(p) for p in paths)
    return WriteStats(bytes_written=total, seconds=seconds, samples=count, paths=tuple(paths))


class _RecordStream:
    """Buffered exact-length reads over an optionally compressed stream."""

    _CHUNK = 1 << 18

    def __init__(self, fh, compression: Compression) -> None:
        self._fh = fh
        self._decomp = (
            zlib.decompressobj(_WBITS[compression]) if compression is not Compression.NONE else None
        )
        self._buf = bytearray()
        self._eof = False

    def _fill(self, want: int) -> None:
        try:
            while len(self._buf) < want and not self._eof:
                raw = self._fh.read(self._CHUNK)
                if not raw:
                    self._eof = True
                    if self._decomp is not None:
                        self._buf += self._decomp.flush()
                    return
                self._buf += self._decomp.decompress(raw) if self._decomp is not None else raw
        except zlib.error as exc:
            raise ContainerFormatError(f"corrupt compressed stream: {exc}") from exc

    def read_exact(self, n: int) -> bytes | None:
        """n bytes, or None at a clean end-of-stream boundary."""
        if self._decomp is None and not self._buf:
            # plain stream with nothing buffered: skip the staging bytearray
            out = self._fh.read(n)
            if not out:
                self._eof = True
                return None
            while len(out) < n:
                more = self._fh.read(n - len(out))
                if not more:
                    self._eof = True
                    raise TruncatedRecordError(
                        f"stream ends {n - len(out)} bytes short of a full field"
                    )
                out += more
            return out
        self._fill(n)
        if not self._buf and self._eof:
            return None
        if len(self._buf) < n:
            raise TruncatedRecordError(
                f"stream ends {n - len(self._buf)} bytes short of a full field"
            )
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out


def _read_header(fh, path: str | Path) -> Compression:
    head = fh.read(HEADER_LEN)
    if len(head) < HEADER_LEN:
        raise TruncatedRecordError(f"{path}: shorter than the container header")
    magic, version, comp_code, reserved = struct.unpack("<8sBB6s", head)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    if comp_code not in _CODE_COMPS:
        raise ContainerFormatError(f"{path}: unknown compression code {comp_code}")
    if reserved != b"\x00" * 6:
        raise ContainerFormatError(f"{path}: reserved header bytes not zero")
    return _CODE_COMPS[comp_code]


def _iter_frames(stream: _RecordStream, label) -> Iterator[tuple[int, bytes, int]]:
    """Yield (offset, payload, stored_payload_crc) per record.  The length CRC
    is checked here because framing depends on it; the payload CRC is left to
    the caller so deserialization cost can be accounted separately."""
    offset = 0
    while True:
        length_bytes = stream.read_exact(8)
        if length_bytes is None:
            return
        lencrc = stream.read_exact(4)
        if lencrc is None:
            raise TruncatedRecordError(f"{label}: record cut off after length")
        if zlib.crc32(length_bytes) != _CRC_STRUCT.unpack(lencrc)[0]:
            raise CrcMismatchError(f"{label}: length CRC mismatch", offset)
        (length,) = _LEN_STRUCT.unpack(length_bytes)
        payload = stream.read_exact(length)
        if payload is None:
            raise TruncatedRecordError(f"{label}: record cut off before payload")
        crc = stream.read_exact(4)
        if crc is None:
            raise TruncatedRecordError(f"{label}: record cut off before payload CRC")
        yield offset, payload, _CRC_STRUCT.unpack(crc)[0]
        offset += RECORD_OVERHEAD + length


def verify_payload(payload: bytes, stored_crc: int, label="record", offset: int = 0) -> None:
    if zlib.crc32(payload) != stored_crc:
        raise CrcMismatchError(f"{label}: payload CRC mismatch", offset + 12)


def iter_shard_frames(
    path: str | Path,
    compression: Compression | None = None,
    backend: StorageBackend | None = None,
) -> Iterator[tuple[bytes, int]]:
    """Yield (payload, stored_payload_crc) from one shard.  Framing and the
    length CRC are verified; the payload CRC is the caller's to check."""
    backend = backend or StorageBackend()
    with backend.open_read(path) as fh:
        stored = _read_header(fh, path)
        if compression is not None and stored is not compression:
            raise ContainerFormatError(
                f"{path}: header says {stored.value}, caller expected {compression.value}"
            )
        for _, payload, crc in _iter_frames(_RecordStream(fh, stored), path):
            yield payload, crc


def frames_from_bytes(
    data: bytes, compression: Compression | None = None, label="memory"
) -> Iterator[tuple[bytes, int]]:
    """Like iter_shard_frames but over an in-memory copy of a shard file."""
    fh = io.BytesIO(data)
    stored = _read_header(fh, label)
    if compression is not None and stored is not compression:
        raise ContainerFormatError(
            f"{label}: header says {stored.value}, caller expected {compression.value}"
        )
    for _, payload, crc in _iter_frames(_RecordStream(fh, stored), label):
        yield payload, crc


def iter_shard(
    path: str | Path,
    compression: Compression | None = None,
    backend: StorageBackend | None = None,
) -> Iterator[Tensor]:
    """Yield tensors from one shard, verifying both CRCs per record."""
    backend = backend or StorageBackend()
    with backend.open_read(path) as fh:
        stored = _read_header(fh, path)
        if compression is not None and stored is not compression:
            raise ContainerFormatError(
                f"{path}: header says {stored.value}, caller expected {compression.value}"
            )
        for offset, payload, crc in _iter_frames(_RecordStream(fh, stored), path):
            verify_payload(payload, crc, path, offset)
            yield decode_tensor(payload)


def read_container(
    paths: Sequence[str | Path],
    compression: Compression | None = None,
    backend: StorageBackend | None = None,
) -> Iterator[Tensor]:
    """Yield tensors from shard files, interleaving shards round-robin so a
    round-robin-written container comes back in its original order."""
    iters: list[Iterator[Tensor] | None] = [
        iter_shard(p, compression, backend) for p in paths
    ]
    live = len(iters)
    while live:
        for i, it in enumerate(iters):
            if it is None:
                continue
            try:
                yield next(it)
            except StopIteration:
                iters[i] = None
                live -= 1
