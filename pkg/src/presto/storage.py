"""Storage backends with I/O accounting.

Two backends share one interface: LocalFs passes straight through to the
filesystem, Simulated adds wall-clock charges on top of real local files so
a laptop can stand in for a saturated network filesystem.  The simulated
charges are:

  * open_latency seconds per file open,
  * a token bucket shared by all workers limiting aggregate bytes/second,
  * a second bucket limiting chunk-granule operations/second (iops).

Both buckets serialize grants, so total observed bandwidth never exceeds
the configured rate and reading N bytes always takes at least N/bandwidth
seconds.  A single stream is therefore capped at
min(bandwidth, chunk * iops_cap).
"""

from __future__ import annotations

import enum
import errno
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


class StorageFullError(OSError):
    """Backing store ran out of space."""


class IoFailureError(OSError):
    """Unclassified I/O failure from the backing store."""


def _wrap_oserror(exc: OSError) -> OSError:
    if isinstance(exc, FileNotFoundError):
        return exc
    if exc.errno == errno.ENOSPC:
        return StorageFullError(*exc.args)
    return IoFailureError(*(exc.args or (str(exc),)))


class BackendKind(enum.Enum):
    LOCAL = "local"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.LOCAL
    bandwidth: float = 91_000_000.0  # bytes/s, shared by every worker
    open_latency: float = 0.04  # seconds per file open
    iops_cap: float = 22_200.0  # chunk-granule ops/s
    chunk: int = 65536  # accounting granule in bytes

    def __post_init__(self) -> None:
        if self.kind is BackendKind.SIMULATED:
            if self.bandwidth <= 0:
                raise ValueError("bandwidth must be > 0")
            if self.open_latency < 0:
                raise ValueError("open_latency must be >= 0")
            if self.iops_cap <= 0:
                raise ValueError("iops_cap must be > 0")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    @classmethod
    def local(cls) -> "BackendConfig":
        return cls(kind=BackendKind.LOCAL)

    @classmethod
    def simulated_default(cls) -> "BackendConfig":
        """Desk-scale profile: one tenth of a saturated 8-reader network
        store, with per-open costs that keep the sequential:small-file gap."""
        return cls(
            kind=BackendKind.SIMULATED,
            bandwidth=91_000_000.0,
            open_latency=0.04,
            iops_cap=22_200.0,
            chunk=65536,
        )


@dataclass(frozen=True)
class IoSnapshot:
    bytes_read: int = 0
    bytes_written: int = 0
    opens: int = 0
    read_seconds: float = 0.0

    def delta(self, earlier: "IoSnapshot") -> "IoSnapshot":
        return IoSnapshot(
            bytes_read=self.bytes_read - earlier.bytes_read,
            bytes_written=self.bytes_written - earlier.bytes_written,
            opens=self.opens - earlier.opens,
            read_seconds=self.read_seconds - earlier.read_seconds,
        )


class IoCounters:
    """Thread-safe monotone counters for one backend instance."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._bytes_read = 0
        self._bytes_written = 0
        self._opens = 0
        self._read_seconds = 0.0

    def add_read(self, nbytes: int, seconds: float) -> None:
        with self._lock:
            self._bytes_read += nbytes
            self._read_seconds += seconds

    def add_write(self, nbytes: int) -> None:
        with self._lock:
            self._bytes_written += nbytes

    def add_open(self) -> None:
        with self._lock:
            self._opens += 1

    def snapshot(self) -> IoSnapshot:
        with self._lock:
            return IoSnapshot(
                bytes_read=self._bytes_read,
                bytes_written=self._bytes_written,
                opens=self._opens,
                read_seconds=self._read_seconds,
            )


def _sleep_until(deadline: float) -> None:
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return
        time.sleep(remaining)


class TokenBucket:
    """Serializing rate limiter: consume(n) returns once n tokens have been
    granted at no more than `rate` tokens/second, aggregated over callers."""

    def __init__(self, rate: float) -> None:
        if rate <= 0:
            raise ValueError("rate must be > 0")
        self._rate = rate
        self._lock = threading.Lock()
        self._free_at = time.monotonic()

    def consume(self, tokens: float) -> None:
        if tokens <= 0:
            return
        with self._lock:
            start = max(time.monotonic(), self._free_at)
            finish = start + tokens / self._rate
            self._free_at = finish
        _sleep_until(finish)


class _BackendFile:
    """File-like handle that reports I/O to the owning backend."""

    def __init__(self, backend: "StorageBackend", fh, mode: str) -> None:
        self._backend = backend
        self._fh = fh
        self._mode = mode
        self._consumed = 0  # cumulative payload bytes for iops accounting
        self._ops_charged = 0

    def read(self, n: int = -1) -> bytes:
        t0 = time.perf_counter()
        try:
            data = self._fh.read(n)
        except OSError as exc:
            raise _wrap_oserror(exc) from exc
        self._charge(len(data))
        self._backend.counters.add_read(len(data), time.perf_counter() - t0)
        return data

    def write(self, data: bytes) -> int:
        try:
            self._fh.write(data)
        except OSError as exc:
            raise _wrap_oserror(exc) from exc
        self._charge(len(data))
        self._backend.counters.add_write(len(data))
        return len(data)

    def _charge(self, nbytes: int) -> None:
        if nbytes <= 0:
            return
        backend = self._backend
        if backend.config.kind is not BackendKind.SIMULATED:
            return
        backend._bandwidth_bucket.consume(nbytes)
        self._consumed += nbytes
        chunk = backend.config.chunk
        ops_needed = -(-self._consumed // chunk)  # ceil division
        if ops_needed > self._ops_charged:
            backend._iops_bucket.consume(ops_needed - self._ops_charged)
            self._ops_charged = ops_needed

    def close(self) -> None:
        try:
            self._fh.close()
        except OSError as exc:
            raise _wrap_oserror(exc) from exc

    def __enter__(self) -> "_BackendFile":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class StorageBackend:
    """Reads and writes real local files, optionally charging simulated
    delays.  Metadata operations (size, exists) are free."""

    def __init__(self, config: BackendConfig | None = None) -> None:
        self.config = config or BackendConfig.local()
        self.counters = IoCounters()
        if self.config.kind is BackendKind.SIMULATED:
            self._bandwidth_bucket = TokenBucket(self.config.bandwidth)
            self._iops_bucket = TokenBucket(self.config.iops_cap)

    def open_read(self, path: str | Path) -> _BackendFile:
        self._charge_open()
        try:
            fh = open(path, "rb")
        except OSError as exc:
            raise _wrap_oserror(exc) from exc
        return _BackendFile(self, fh, "rb")

    def open_write(self, path: str | Path) -> _BackendFile:
        self._charge_open()
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fh = open(path, "wb")
        except OSError as exc:
            raise _wrap_oserror(exc) from exc
        return _BackendFile(self, fh, "wb")

    def _charge_open(self) -> None:
        self.counters.add_open()
        if self.config.kind is BackendKind.SIMULATED and self.config.open_latency > 0:
            time.sleep(self.config.open_latency)

    def size(self, path: str | Path) -> int:
        try:
            return os.stat(path).st_size
        except OSError as exc:
            raise _wrap_oserror(exc) from exc

    def exists(self, path: str | Path) -> bool:
        return os.path.exists(path)

    def remove(self, path: str | Path) -> None:
        try:
            os.remove(path)
        except OSError as exc:
            raise _wrap_oserror(exc) from exc


def make_backend(config: BackendConfig) -> StorageBackend:
    return StorageBackend(config)


@dataclass(frozen=True)
class ProbeReport:
    """Measured behavior of a backend under a fio-shaped access pattern."""

    workers: int
    files_per_worker: int
    total_bytes: int
    seconds: float
    bandwidth: float  # bytes/s aggregate during the read phase
    iops: float  # bandwidth expressed as 4 KiB operations/s
    opens_per_second: float

    ROW_FIELDS = ("workers", "files_per_worker", "bandwidth", "iops")

    def to_row(self) -> dict[str, float]:
        return {
            "workers": self.workers,
            "files_per_worker": self.files_per_worker,
            "bandwidth": self.bandwidth,
            "iops": self.iops,
        }


def probe_storage(
    backend: StorageBackend,
    workers: int,
    files_per_worker: int,
    total_bytes_per_worker: int,
    root: str | Path,
    cleanup: bool = True,
) -> ProbeReport:
    """Write a file grid through the backend, read it back with one thread
    per worker, and report aggregate read bandwidth and opens/second."""
    if workers < 1 or files_per_worker < 1:
        raise ValueError("workers and files_per_worker must be >= 1")
    if total_bytes_per_worker < files_per_worker:
        raise ValueError("need at least one byte per file")
    root = Path(root)
    file_bytes = total_bytes_per_worker // files_per_worker
    payload = os.urandom(min(file_bytes, 1 << 20))
    paths: list[list[Path]] = []
    for w in range(workers):
        row = []
        for i in range(files_per_worker):
            p = root / f"w{w:03d}" / f"f{i:05d}.bin"
            with backend.open_write(p) as fh:
                remaining = file_bytes
                while remaining > 0:
                    piece = payload[: min(len(payload), remaining)]
                    fh.write(piece)
                    remaining -= len(piece)
            row.append(p)
        paths.append(row)

    before = backend.counters.snapshot()
    start = time.perf_counter()

    def read_worker(w: int) -> None:
        for p in paths[w]:
            with backend.open_read(p) as fh:
                while fh.read(backend.config.chunk):
                    pass

    threads = [threading.Thread(target=read_worker, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seconds = time.perf_counter() - start
    delta = backend.counters.snapshot().delta(before)

    if cleanup:
        for row in paths:
            for p in row:
                backend.remove(p)

    bandwidth = delta.bytes_read / seconds if seconds > 0 else 0.0
    return ProbeReport(
        workers=workers,
        files_per_worker=files_per_worker,
        total_bytes=delta.bytes_read,
        seconds=seconds,
        bandwidth=bandwidth,
        iops=bandwidth / 4096.0,
        opens_per_second=delta.opens / seconds if seconds > 0 else 0.0,
    )
