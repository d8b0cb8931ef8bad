"""Strategy measurement.

For one strategy: materialize the offline prefix (timed, through the
backend), then run the online phase for a few repeated measurement runs.
For a campaign: do that for every enumerated strategy, surviving individual
failures, and keep enough metadata to reproduce the numbers.
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from . import __version__
from .core import (
    Compression,
    ExecMode,
    Pipeline,
    Strategy,
    Tensor,
    predict_storage,
    strategy_label,
    validate_strategy,
)
from .engine import EpochStats, MaterializedDataset, RunConfig, run_online
from .recordio import read_container, write_container
from .steps import calibration_units_per_second, execute_step
from .storage import StorageBackend
from . import workloads

log = logging.getLogger(__name__)

EPOCH_SELECTORS = ("first", "last", "mean")


class ProfileError(RuntimeError):
    pass


class AllStrategiesFailedError(ProfileError):
    pass


@dataclass(frozen=True)
class ProfileConfig:
    run: RunConfig = RunConfig()
    repeats: int = 1
    epoch_selector: str = "first"
    workdir: Path = Path("presto-work")
    keep_artifacts: bool = False

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.epoch_selector not in EPOCH_SELECTORS:
            raise ValueError(f"epoch_selector must be one of {EPOCH_SELECTORS}")
        object.__setattr__(self, "workdir", Path(self.workdir))


@dataclass(frozen=True)
class MaterializeStats:
    seconds: float
    bytes_written: int
    sample_count: int


def _read_sample_file(backend: StorageBackend, path, dtype) -> Tensor:
    parts = []
    with backend.open_read(path) as fh:
        while True:
            chunk = fh.read(1 << 16)
            if not chunk:
                break
            parts.append(chunk)
    blob = b"".join(parts)
    return Tensor(dtype, (len(blob) // dtype.width,), blob)


def _ordered_parallel(
    items: Iterable, fn: Callable, workers: int
) -> Iterator:
    """Map fn over items with a bounded worker pool, yielding in order."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    window = 4 * workers
    pending = collections.deque()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= window:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def materialize(
    strategy: Strategy,
    pipeline: Pipeline,
    backend: StorageBackend,
    base: str | Path,
) -> tuple[MaterializedDataset | None, MaterializeStats]:
    """Run the offline prefix and pack its output into a container.

    Split 0 stays in the source layout, so nothing is written and the cost
    is zero.  The clock covers reading the source, the prefix transforms,
    and writing the shards, all through the same backend.
    """
    validate_strategy(strategy, pipeline)
    m = strategy.split_index
    source = pipeline.source
    if m == 0:
        return None, MaterializeStats(0.0, 0, source.sample_count)

    gate = threading.Lock()
    prefix = pipeline.steps[1:m]

    def transform(t: Tensor) -> Tensor:
        for step in prefix:
            if step.exec_mode is ExecMode.EXCLUSIVE:
                with gate:
                    t = execute_step(step, t)
            else:
                t = execute_step(step, t)
        return t

    start = time.perf_counter()
    paths = workloads.source_paths(source)
    if source.layout is workloads.Layout.CONTAINERS:
        # Few opens either way; only the transforms are worth fanning out.
        stream = _ordered_parallel(
            read_container(paths, backend=backend), transform, strategy.parallelism
        )
    else:
        # One open per sample, so the reads must overlap too.
        def load(p) -> Tensor:
            return transform(_read_sample_file(backend, p, source.dtype))

        stream = _ordered_parallel(paths, load, strategy.parallelism)
    stats = write_container(
        stream,
        base,
        compression=strategy.compression,
        shards=strategy.shards,
        backend=backend,
    )
    seconds = time.perf_counter() - start
    mat = MaterializedDataset(
        paths=stats.paths,
        bytes=stats.bytes_written,
        sample_count=stats.samples,
        compression=strategy.compression,
    )
    return mat, MaterializeStats(seconds, stats.bytes_written, stats.samples)


@dataclass(frozen=True)
class ProfileRecord:
    strategy_id: str
    label: str
    strategy: Strategy
    sample_count: int
    preprocessing_seconds: float
    storage_bytes: int
    predicted_storage_bytes: int
    throughput_sps: float
    throughput_std: float
    repeats: tuple[tuple[EpochStats, ...], ...]  # [repeat][epoch]


def _select_throughput(epochs: Sequence[EpochStats], selector: str) -> float:
    if selector == "first":
        return epochs[0].throughput
    if selector == "last":
        return epochs[-1].throughput
    return statistics.fmean(e.throughput for e in epochs)


def _source_storage_bytes(pipeline: Pipeline, backend: StorageBackend) -> int:
    return sum(backend.size(p) for p in workloads.source_paths(pipeline.source))


def profile_strategy(
    strategy: Strategy,
    pipeline: Pipeline,
    backend: StorageBackend,
    config: ProfileConfig,
) -> ProfileRecord:
    desc = pipeline.source
    base = Path(config.workdir) / f"mat-{strategy.id}"
    mat, mstats = materialize(strategy, pipeline, backend, base)
    try:
        if mat is None:
            storage = _source_storage_bytes(pipeline, backend)
        else:
            storage = mat.bytes
        all_epochs: list[tuple[EpochStats, ...]] = []
        for _ in range(config.repeats):
            eps = run_online(strategy, pipeline, backend, config.run, materialized=mat)
            all_epochs.append(tuple(eps))
        picks = [_select_throughput(eps, config.epoch_selector) for eps in all_epochs]
        return ProfileRecord(
            strategy_id=strategy.id,
            label=strategy_label(pipeline, strategy.split_index),
            strategy=strategy,
            sample_count=all_epochs[0][0].samples,
            preprocessing_seconds=mstats.seconds,
            storage_bytes=storage,
            predicted_storage_bytes=predict_storage(
                pipeline, strategy.split_index, desc.total_bytes
            ),
            throughput_sps=statistics.fmean(picks),
            throughput_std=statistics.stdev(picks) if len(picks) > 1 else 0.0,
            repeats=tuple(all_epochs),
        )
    finally:
        if mat is not None and not config.keep_artifacts:
            for p in mat.paths:
                try:
                    backend.remove(p)
                except FileNotFoundError:
                    pass


@dataclass(frozen=True)
class CampaignError:
    strategy_id: str
    error: str


@dataclass(frozen=True)
class Campaign:
    records: tuple[ProfileRecord, ...]
    errors: tuple[CampaignError, ...]
    metadata: dict


def _pipeline_fingerprint(pipeline: Pipeline) -> dict:
    desc = pipeline.source
    return {
        "source": {
            "layout": desc.layout.value,
            "sample_count": desc.sample_count,
            "bytes_per_sample": desc.bytes_per_sample,
            "dtype": desc.dtype.name,
            "seed": desc.seed,
        },
        "steps": [
            {
                "name": s.name,
                "kind": s.kind.value,
                "size_ratio": s.size_ratio,
                "compute_cost": s.compute_cost,
                "exec_mode": s.exec_mode.value,
                "deterministic": s.deterministic,
                "params": {k: str(v) for k, v in sorted(s.params.items())},
            }
            for s in pipeline.steps
        ],
    }


def _config_digest(pipeline: Pipeline, strategies: Sequence[Strategy], config: ProfileConfig) -> str:
    doc = {
        "pipeline": _pipeline_fingerprint(pipeline),
        "strategies": [s.id for s in strategies],
        "epochs": config.run.epochs,
        "sample_limit": config.run.sample_limit,
        "memory_budget": config.run.memory_budget,
        "rng_seed": config.run.rng_seed,
        "repeats": config.repeats,
        "epoch_selector": config.epoch_selector,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def profile_campaign(
    pipeline: Pipeline,
    strategies: Sequence[Strategy],
    backend: StorageBackend,
    config: ProfileConfig,
) -> Campaign:
    """Profile every strategy, tolerating individual failures."""
    records: list[ProfileRecord] = []
    errors: list[CampaignError] = []
    interrupted = False
    for strategy in strategies:
        try:
            records.append(profile_strategy(strategy, pipeline, backend, config))
            log.info("profiled %s", strategy.id)
        except KeyboardInterrupt:
            log.warning("interrupted after %d of %d strategies", len(records), len(strategies))
            interrupted = True
            break
        except Exception as exc:
            log.warning("strategy %s failed: %s", strategy.id, exc)
            errors.append(CampaignError(strategy.id, f"{type(exc).__name__}: {exc}"))
    if strategies and not records and not interrupted:
        raise AllStrategiesFailedError(
            "; ".join(f"{e.strategy_id}: {e.error}" for e in errors[:5])
        )
    metadata = {
        "version": __version__,
        "created_unix": time.time(),
        "config_digest": _config_digest(pipeline, strategies, config),
        "calibration_units_per_second": calibration_units_per_second(),
        "backend": {
            "kind": backend.config.kind.value,
            "bandwidth": backend.config.bandwidth,
            "open_latency": backend.config.open_latency,
            "iops_cap": backend.config.iops_cap,
            "chunk": backend.config.chunk,
        },
        "epochs": config.run.epochs,
        "repeats": config.repeats,
        "epoch_selector": config.epoch_selector,
        "interrupted": interrupted,
        "strategies_requested": len(strategies),
    }
    return Campaign(records=tuple(records), errors=tuple(errors), metadata=metadata)


# ------------------------------------------------------------- serialization


def _epoch_to_dict(e: EpochStats) -> dict:
    return {
        "epoch": e.epoch,
        "samples": e.samples,
        "wall_seconds": e.wall_seconds,
        "throughput": e.throughput,
        "bytes_read": e.io.bytes_read,
        "bytes_written": e.io.bytes_written,
        "opens": e.io.opens,
        "read_seconds": e.io.read_seconds,
        "cache": e.cache.value,
        "multiset_digest": e.multiset_digest,
        "sequence_digest": e.sequence_digest,
    }


def _strategy_to_dict(s: Strategy) -> dict:
    return {
        "split_index": s.split_index,
        "compression": s.compression.value,
        "shards": s.shards,
        "parallelism": s.parallelism,
        "cache_mode": s.cache_mode.value,
        "shuffle_buffer": s.shuffle_buffer,
    }


def record_to_dict(r: ProfileRecord) -> dict:
    return {
        "strategy_id": r.strategy_id,
        "label": r.label,
        "strategy": _strategy_to_dict(r.strategy),
        "sample_count": r.sample_count,
        "preprocessing_seconds": r.preprocessing_seconds,
        "storage_bytes": r.storage_bytes,
        "predicted_storage_bytes": r.predicted_storage_bytes,
        "throughput_sps": r.throughput_sps,
        "throughput_std": r.throughput_std,
        "repeats": [[_epoch_to_dict(e) for e in eps] for eps in r.repeats],
    }


def campaign_to_dict(campaign: Campaign) -> dict:
    return {
        "metadata": campaign.metadata,
        "records": [record_to_dict(r) for r in campaign.records],
        "errors": [{"strategy_id": e.strategy_id, "error": e.error} for e in campaign.errors],
    }


def save_campaign(campaign: Campaign, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(campaign_to_dict(campaign), indent=2) + "\n")


def load_campaign(path: str | Path) -> dict:
    """Campaign document as plain dicts; ranking works off these directly."""
    return json.loads(Path(path).read_text())
