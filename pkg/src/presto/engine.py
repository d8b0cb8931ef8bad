"""Online execution engine.

One run = one strategy executed for a number of epochs against a backend.
Reader threads stream the stored form (raw sample files for split 0,
container shards otherwise) and emit framed payloads; worker threads
deserialize and apply the online step suffix; a terminal sink counts,
optionally shuffles, and digests what a training loop would have consumed.

Order contract: streams are built so that interleaving them round-robin by
stream index reproduces the original sample order, matching how containers
are written.  With one worker the delivered order is therefore exactly the
source order (plus any shuffle buffer); with several workers delivery order
is racy but the delivered multiset is unchanged, which the digests reflect.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import queue
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .core import (
    CacheMode,
    Compression,
    ExecMode,
    Pipeline,
    StepSpec,
    Strategy,
    Tensor,
    validate_strategy,
)
from .recordio import decode_tensor, encode_tensor, frames_from_bytes, verify_payload
from .storage import IoSnapshot, StorageBackend
from .steps import execute_step
from . import workloads

log = logging.getLogger(__name__)

_QUEUE_DEPTH = 8  # per-stream prefetch ceiling, in records
_PREFETCH_BYTES = 16_000_000  # in-flight byte budget across all streams


def _queue_depth(record_bytes: float, n_streams: int) -> int:
    """Records to prefetch per stream.  Small records get the full window;
    multi-MB records are held to roughly the byte budget so in-flight data
    does not balloon (one per stream is always allowed)."""
    if record_bytes <= 0:
        return _QUEUE_DEPTH
    fit = int(_PREFETCH_BYTES / (record_bytes * max(n_streams, 1)))
    return max(1, min(_QUEUE_DEPTH, fit))
_READ_CHUNK = 1 << 16


class EngineError(RuntimeError):
    pass


class MaterializationMissingError(EngineError):
    """A strategy with an offline prefix was run without its materialization."""


class CacheOutcome(enum.Enum):
    DISABLED = "disabled"
    POPULATED = "populated"
    SERVED = "served"
    OVERFLOWED = "overflowed"


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 1
    sample_limit: int | None = None
    memory_budget: int = 2_000_000_000  # bytes available to caches
    rng_seed: int = 0
    collect_digests: bool = False
    trace_path: Path | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.sample_limit is not None and self.sample_limit < 1:
            raise ValueError("sample_limit must be >= 1 when set")
        if self.memory_budget < 1:
            raise ValueError("memory_budget must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int  # 1-based
    samples: int
    wall_seconds: float
    throughput: float  # samples / wall_seconds
    io: IoSnapshot  # deltas for this epoch only
    cache: CacheOutcome
    multiset_digest: str | None = None
    sequence_digest: str | None = None


@dataclass(frozen=True)
class MaterializedDataset:
    """Where a strategy's offline output lives."""

    paths: tuple[Path, ...]
    bytes: int
    sample_count: int
    compression: Compression


def shuffle_stream(stream: Iterable, capacity: int, rng: random.Random) -> Iterator:
    """Reservoir-style streaming shuffle with a bounded buffer.

    Fill the buffer, then for each arrival emit a uniformly chosen slot and
    reuse it; drain in random order.  capacity 1 degenerates to the identity
    order, matching an unshuffled loader.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    buf = []
    for item in stream:
        if len(buf) < capacity:
            buf.append(item)
            continue
        j = rng.randrange(capacity)
        out = buf[j]
        buf[j] = item
        yield out
    while buf:
        yield buf.pop(rng.randrange(len(buf)))


class _ShuffleSink:
    """Push-side twin of shuffle_stream feeding a downstream callable."""

    def __init__(self, capacity: int, rng: random.Random, downstream: Callable) -> None:
        self._cap = capacity
        self._rng = rng
        self._down = downstream
        self._buf = []

    def push(self, item) -> None:
        if len(self._buf) < self._cap:
            self._buf.append(item)
            return
        j = self._rng.randrange(self._cap)
        out = self._buf[j]
        self._buf[j] = item
        self._down(out)

    def drain(self) -> None:
        while self._buf:
            self._down(self._buf.pop(self._rng.randrange(len(self._buf))))


class _Accumulator:
    """Terminal consumer: counts samples and keeps order-free and ordered
    digests of the delivered tensors."""

    def __init__(self, collect_digests: bool) -> None:
        self.count = 0
        self._collect = collect_digests
        self._xor = bytearray(32)
        self._seq = hashlib.sha256() if collect_digests else None

    def __call__(self, tensor: Tensor) -> None:
        self.count += 1
        if not self._collect:
            return
        h = hashlib.sha256(encode_tensor(tensor)).digest()
        for i in range(32):
            self._xor[i] ^= h[i]
        self._seq.update(h)

    @property
    def multiset_digest(self) -> str | None:
        return bytes(self._xor).hex() if self._collect else None

    @property
    def sequence_digest(self) -> str | None:
        return self._seq.hexdigest() if self._collect else None


@dataclass
class _Item:
    seq: int  # position in the original sample order
    value: bytes | Tensor
    crc: int | None = None  # set for container record payloads


class _StopPipeline(Exception):
    pass


class _Merger:
    """Round-robin merge of per-stream queues, restoring global order.

    Streams put _Item or an end sentinel; workers call next_item().  A
    sample_limit makes next_item() report exhaustion early and flips the
    stop event so readers bail out.
    """

    _END = object()

    def __init__(self, queues: Sequence[queue.Queue], limit: int | None, stop: threading.Event):
        self._queues = queues
        self._limit = limit
        self._stop = stop
        self._lock = threading.Lock()
        self._cursor = 0
        self._live = [True] * len(queues)
        self._live_count = len(queues)
        self._taken = 0

    def next_item(self) -> _Item | None:
        with self._lock:
            while True:
                if self._live_count == 0 or (
                    self._limit is not None and self._taken >= self._limit
                ):
                    self._stop.set()
                    return None
                i = self._cursor
                self._cursor = (self._cursor + 1) % len(self._queues)
                if not self._live[i]:
                    continue
                got = self._queues[i].get()
                if got is self._END:
                    self._live[i] = False
                    self._live_count -= 1
                    continue
                self._taken += 1
                return got

    @classmethod
    def end_sentinel(cls):
        return cls._END


def _put_until(q: queue.Queue, item, stop: threading.Event) -> None:
    while not stop.is_set():
        try:
            q.put(item, timeout=0.05)
            return
        except queue.Full:
            continue
    raise _StopPipeline


class _SerializedCache:
    """Raw on-store bytes per stream.  Replays re-run header parsing,
    decompression, framing and deserialization; only the backend reads are
    skipped."""

    def __init__(self, budget: int) -> None:
        self.budget = budget
        self._lock = threading.Lock()
        self._used = 0
        self.overflowed = False
        self.streams: list[list[bytes]] | None = None

    def prepare(self, n_streams: int) -> None:
        self.streams = [[] for _ in range(n_streams)]

    def add(self, stream_idx: int, blob: bytes) -> None:
        with self._lock:
            if self.overflowed:
                return
            self._used += len(blob)
            if self._used > self.budget:
                self.overflowed = True
                self.streams = None
                return
            self.streams[stream_idx].append(blob)

    @property
    def ready(self) -> bool:
        return self.streams is not None and not self.overflowed


class _SampleCache:
    """Deserialized tensors keyed by sample position.  Replays skip reads and
    deserialization both; accounting charges tensor bytes plus a fixed
    per-entry overhead."""

    ENTRY_OVERHEAD = 64

    def __init__(self, budget: int) -> None:
        self.budget = budget
        self._lock = threading.Lock()
        self._used = 0
        self.overflowed = False
        self.by_seq: dict[int, Tensor] | None = {}

    def add(self, seq: int, tensor: Tensor) -> None:
        with self._lock:
            if self.overflowed:
                return
            self._used += tensor.nbytes + self.ENTRY_OVERHEAD
            if self._used > self.budget:
                self.overflowed = True
                self.by_seq = None
                return
            self.by_seq[seq] = tensor

    @property
    def ready(self) -> bool:
        return self.by_seq is not None and not self.overflowed

    def streams_for(self, n_streams: int) -> list[list[_Item]]:
        out = [[] for _ in range(n_streams)]
        for seq in sorted(self.by_seq):
            out[seq % n_streams].append(_Item(seq, self.by_seq[seq]))
        return out


class _Trace:
    def __init__(self, path: Path | None) -> None:
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._lock = threading.Lock()

    def emit(self, epoch: int, worker: int, stage: str, start_ns: int, end_ns: int) -> None:
        if self._fh is None:
            return
        with self._lock:
            self._fh.write(f"{epoch}\t{worker}\t{stage}\t{start_ns}\t{end_ns}\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _reader_memory(items: Sequence[_Item], q: queue.Queue, stop: threading.Event) -> None:
    for item in items:
        _put_until(q, item, stop)


def _reader_serialized(
    blobs: Sequence[bytes],
    kind: str,
    seqs_or_base,
    n_streams: int,
    q: queue.Queue,
    stop: threading.Event,
    compression: Compression,
) -> None:
    """Replay raw cached bytes through the same parse path as storage."""
    if kind == "raw":
        for seq, blob in zip(seqs_or_base, blobs):
            _put_until(q, _Item(seq, blob), stop)
        return
    stream_idx = seqs_or_base
    for r, (payload, crc) in enumerate(frames_from_bytes(blobs[0], compression, "cache")):
        _put_until(q, _Item(r * n_streams + stream_idx, payload, crc), stop)


def _read_file_bytes(backend: StorageBackend, path: Path, tee: list | None) -> bytes:
    parts = []
    with backend.open_read(path) as fh:
        while True:
            chunk = fh.read(_READ_CHUNK)
            if not chunk:
                break
            parts.append(chunk)
    blob = b"".join(parts)
    if tee is not None:
        tee.append(blob)
    return blob


def _reader_raw_files(
    backend: StorageBackend,
    paths: Sequence[tuple[int, Path]],
    q: queue.Queue,
    stop: threading.Event,
    cache: _SerializedCache | None,
    stream_idx: int,
) -> None:
    for seq, path in paths:
        if stop.is_set():
            raise _StopPipeline
        blob = _read_file_bytes(backend, path, None)
        if cache is not None:
            cache.add(stream_idx, blob)
        _put_until(q, _Item(seq, blob), stop)


class _ShardFile:
    """File-like over a backend handle that optionally tees raw bytes."""

    def __init__(self, fh, cache: _SerializedCache | None, stream_idx: int, stop: threading.Event):
        self._fh = fh
        self._cache = cache
        self._idx = stream_idx
        self._stop = stop
        self._parts = [] if cache is not None else None

    def read(self, n: int) -> bytes:
        if self._stop.is_set():
            raise _StopPipeline
        chunk = self._fh.read(n)
        if self._parts is not None and chunk:
            self._parts.append(chunk)
        return chunk

    def finish(self) -> None:
        if self._cache is not None:
            self._cache.add(self._idx, b"".join(self._parts))


def _reader_shard(
    backend: StorageBackend,
    path: Path,
    stream_idx: int,
    n_streams: int,
    compression: Compression,
    q: queue.Queue,
    stop: threading.Event,
    cache: _SerializedCache | None,
) -> None:
    from .recordio import _RecordStream, _iter_frames, _read_header  # framing internals

    with backend.open_read(path) as raw:
        fh = _ShardFile(raw, cache, stream_idx, stop)
        stored = _read_header(fh, path)
        if stored is not compression:
            raise EngineError(f"{path}: expected {compression.value}, found {stored.value}")
        for r, (_, payload, crc) in enumerate(_iter_frames(_RecordStream(fh, stored), path)):
            _put_until(q, _Item(r * n_streams + stream_idx, payload, crc), stop)
        fh.finish()


def _mix_seed(seed: int, epoch: int, seq: int, step_idx: int) -> int:
    # ints only, so the result is stable across interpreter runs
    return hash((seed, epoch, seq, step_idx))


def run_online(
    strategy: Strategy,
    pipeline: Pipeline,
    backend: StorageBackend,
    config: RunConfig,
    materialized: MaterializedDataset | None = None,
) -> list[EpochStats]:
    """Execute the online phase of a strategy for config.epochs epochs."""
    validate_strategy(strategy, pipeline)
    m = strategy.split_index
    if m >= 1:
        if materialized is None:
            raise MaterializationMissingError(
                f"strategy {strategy.id} needs its offline prefix materialized first"
            )
        shard_list = list(materialized.paths)
        n_streams = len(shard_list)
    else:
        source = pipeline.source
        files = workloads.source_paths(source)
        if config.sample_limit is None:
            total = len(files)
        else:
            total = min(len(files), config.sample_limit)
        n_streams = min(strategy.parallelism, max(total, 1))

    if m >= 1:
        record_bytes = materialized.bytes / max(materialized.sample_count, 1)
    else:
        record_bytes = float(pipeline.source.bytes_per_sample)
    depth = _queue_depth(record_bytes, n_streams)

    online_steps: list[tuple[int, StepSpec]] = [
        (i, step) for i, step in enumerate(pipeline.steps) if i >= max(m, 1)
    ]
    gate = threading.Lock()
    trace = _Trace(config.trace_path)

    ser_cache: _SerializedCache | None = None
    smp_cache: _SampleCache | None = None
    if strategy.cache_mode is not CacheMode.NO_CACHE:
        # projection uses the stored footprint; the sample cache holds the
        # deserialized twin of the same bytes plus bookkeeping
        projected = materialized.bytes if m >= 1 else pipeline.source.total_bytes
        if config.sample_limit is not None:
            log.warning("cache disabled: sample_limit would populate a partial cache")
        elif projected > config.memory_budget:
            log.warning(
                "cache disabled before run: needs ~%d B, budget %d B",
                projected,
                config.memory_budget,
            )
        elif strategy.cache_mode is CacheMode.SERIALIZED:
            ser_cache = _SerializedCache(config.memory_budget)
        else:
            smp_cache = _SampleCache(config.memory_budget)

    stats: list[EpochStats] = []
    try:
        for epoch in range(1, config.epochs + 1):
            before = backend.counters.snapshot()
            start = time.perf_counter()

            serving_ser = ser_cache is not None and ser_cache.ready and epoch > 1
            serving_smp = smp_cache is not None and smp_cache.ready and epoch > 1
            populate_ser = ser_cache is not None and epoch == 1
            populate_smp = smp_cache is not None and epoch == 1
            if populate_ser:
                ser_cache.prepare(n_streams)

            stop = threading.Event()
            queues = [queue.Queue(maxsize=depth) for _ in range(n_streams)]
            merger = _Merger(queues, config.sample_limit, stop)
            readers: list[threading.Thread] = []
            errors: list[BaseException] = []
            smp_streams = smp_cache.streams_for(n_streams) if serving_smp else None

            def reader_main(idx: int, fn: Callable) -> None:
                try:
                    fn()
                except _StopPipeline:
                    pass
                except BaseException as exc:  # propagated after join
                    errors.append(exc)
                    stop.set()
                finally:
                    # the end marker must always land, even into a full queue
                    # nobody is draining any more
                    while True:
                        try:
                            queues[idx].put_nowait(_Merger.end_sentinel())
                            return
                        except queue.Full:
                            if stop.is_set():
                                try:
                                    queues[idx].get_nowait()
                                except queue.Empty:
                                    pass
                            else:
                                time.sleep(0.005)

            for idx in range(n_streams):
                if serving_smp:
                    fn = (lambda it=smp_streams[idx], q=queues[idx]: _reader_memory(it, q, stop))
                elif serving_ser and m >= 1:
                    blobs = ser_cache.streams[idx]
                    fn = (
                        lambda b=blobs, i=idx, q=queues[idx]: _reader_serialized(
                            b, "shard", i, n_streams, q, stop, materialized.compression
                        )
                    )
                elif serving_ser:
                    blobs = ser_cache.streams[idx]
                    seqs = range(idx, idx + len(blobs) * n_streams, n_streams)
                    fn = (
                        lambda b=blobs, s=seqs, q=queues[idx]: _reader_serialized(
                            b, "raw", s, n_streams, q, stop, Compression.NONE
                        )
                    )
                elif m >= 1:
                    fn = (
                        lambda p=shard_list[idx], i=idx, q=queues[idx]: _reader_shard(
                            backend, p, i, n_streams, materialized.compression, q, stop,
                            ser_cache if populate_ser else None,
                        )
                    )
                else:
                    mine = [(j, files[j]) for j in range(idx, total, n_streams)]
                    fn = (
                        lambda ps=mine, i=idx, q=queues[idx]: _reader_raw_files(
                            backend, ps, q, stop, ser_cache if populate_ser else None, i
                        )
                    )
                t = threading.Thread(target=reader_main, args=(idx, fn), daemon=True)
                readers.append(t)
                t.start()

            acc = _Accumulator(config.collect_digests)
            sink_lock = threading.Lock()
            if strategy.shuffle_buffer > 0:
                shuffle = _ShuffleSink(
                    strategy.shuffle_buffer,
                    random.Random(_mix_seed(config.rng_seed, epoch, -1, -1)),
                    acc,
                )
                def deliver(t: Tensor) -> None:
                    with sink_lock:
                        shuffle.push(t)
            else:
                shuffle = None
                def deliver(t: Tensor) -> None:
                    with sink_lock:
                        acc(t)

            source_dtype = getattr(pipeline.source, "dtype", None)

            def worker_main(widx: int) -> None:
                try:
                    while True:
                        item = merger.next_item()
                        if item is None:
                            return
                        t0 = time.perf_counter_ns()
                        if isinstance(item.value, Tensor):
                            tensor = item.value
                        elif item.crc is not None:
                            verify_payload(item.value, item.crc)
                            tensor = decode_tensor(item.value)
                        else:
                            width = source_dtype.width
                            tensor = Tensor(
                                source_dtype,
                                (len(item.value) // width,),
                                item.value,
                            )
                        trace.emit(epoch, widx, "deserialize", t0, time.perf_counter_ns())
                        if populate_smp:
                            # cache the load product; transforms still run
                            # every epoch so random steps stay per-epoch fresh
                            smp_cache.add(item.seq, tensor)
                        for step_idx, step in online_steps:
                            rng = (
                                random.Random(
                                    _mix_seed(config.rng_seed, epoch, item.seq, step_idx)
                                )
                                if not step.deterministic
                                else None
                            )
                            t1 = time.perf_counter_ns()
                            if step.exec_mode is ExecMode.EXCLUSIVE:
                                with gate:
                                    tensor = execute_step(step, tensor, rng=rng)
                            else:
                                tensor = execute_step(step, tensor, rng=rng)
                            trace.emit(epoch, widx, step.name, t1, time.perf_counter_ns())
                        deliver(tensor)
                except BaseException as exc:
                    errors.append(exc)
                    stop.set()
                    # unblock peers waiting on queues
                    for q in queues:
                        try:
                            q.put_nowait(_Merger.end_sentinel())
                        except queue.Full:
                            pass

            workers = [
                threading.Thread(target=worker_main, args=(w,), daemon=True)
                for w in range(strategy.parallelism)
            ]
            for t in workers:
                t.start()
            for t in workers:
                t.join()
            for t in readers:
                t.join()
            if errors:
                raise errors[0]
            if shuffle is not None:
                shuffle.drain()

            wall = time.perf_counter() - start
            outcome = CacheOutcome.DISABLED
            if strategy.cache_mode is not CacheMode.NO_CACHE:
                if serving_ser or serving_smp:
                    outcome = CacheOutcome.SERVED
                elif epoch == 1 and (populate_ser or populate_smp):
                    active = ser_cache if ser_cache is not None else smp_cache
                    if active is not None and active.overflowed:
                        outcome = CacheOutcome.OVERFLOWED
                        log.warning(
                            "cache overflowed budget %d B while populating", config.memory_budget
                        )
                    elif active is not None and active.ready:
                        outcome = CacheOutcome.POPULATED
            stats.append(
                EpochStats(
                    epoch=epoch,
                    samples=acc.count,
                    wall_seconds=wall,
                    throughput=acc.count / wall if wall > 0 else 0.0,
                    io=backend.counters.snapshot().delta(before),
                    cache=outcome,
                    multiset_digest=acc.multiset_digest,
                    sequence_digest=acc.sequence_digest,
                )
            )
    finally:
        trace.close()
    return stats
