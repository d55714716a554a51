"""Inference throughput, latency percentiles and model footprint."""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .blocks import Module
from .errors import InvalidParameter, IoError, ShapeMismatch
from .models import param_count, read_checkpoint
from .tensor import Rng, Tensor, no_grad

Clock = Callable[[], int]  # monotonic nanoseconds


@dataclass
class BenchReport:
    model_id: str
    host: str
    threads: int
    warmup_iters: int
    measured_iters: int
    batch: int
    fps: float
    latency_p50_ms: float
    latency_p95_ms: float
    latency_p99_ms: float
    model_size_bytes: int
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def append_csv(self, path) -> Path:
        """Append one row, writing the header when the file is new."""
        path = Path(path)
        row = self.to_dict()
        new = not path.exists() or path.stat().st_size == 0
        try:
            with path.open("a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(row))
                if new:
                    w.writeheader()
                w.writerow(row)
        except OSError as exc:
            raise IoError(f"cannot append to {path}: {exc}") from exc
        return path


def host_descriptor() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine() or "unknown"


def nearest_rank(values, q: float) -> float:
    """Smallest value with at least ``q`` percent of the sample at or below it."""
    if not len(values):
        raise InvalidParameter("percentile of an empty sample")
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def _input_shape(model: Module, input_size) -> tuple[int, int, int]:
    shape = (3, input_size, input_size) if np.isscalar(input_size) else tuple(int(s) for s in input_size)
    cfg = getattr(model, "config", None)
    if cfg is not None and shape != (3, cfg.input_size, cfg.input_size):
        raise ShapeMismatch(f"model expects 3x{cfg.input_size}x{cfg.input_size} input, got {shape}")
    return shape


def bench_fps(
    model: Module,
    input_size,
    batch: int = 1,
    warmup_iters: int = 20,
    measured_iters: int = 100,
    clock: Clock = time.perf_counter_ns,
    workers: int = 1,
    seed: int = 0,
    model_id: str | None = None,
) -> BenchReport:
    """Time forward passes on a fixed random input.

    The clock is read immediately before and after every measured pass, so
    only forward time counts; warmup passes never touch the clock. With one
    worker ``fps = measured_iters * batch / sum(latencies)``. With several
    workers (threads sharing the read-only model) throughput is the total
    frame count over the wall time of the whole measured window.
    """
    if measured_iters < 10:
        raise InvalidParameter(f"measured_iters must be >= 10, got {measured_iters}")
    if batch < 1 or warmup_iters < 0 or workers < 1:
        raise InvalidParameter("batch and workers must be >= 1, warmup_iters >= 0")
    shape = _input_shape(model, input_size)
    dtype = next(iter(model.parameters())).dtype
    x = Tensor(Rng(seed).stream("bench").standard_normal((batch, *shape)), dtype=dtype)

    def run(out: list[int]):
        with no_grad():
            for _ in range(warmup_iters):
                model(x)
            for _ in range(measured_iters):
                t0 = clock()
                model(x)
                out.append(clock() - t0)

    if workers == 1:
        latencies: list[int] = []
        run(latencies)
        elapsed = sum(latencies)
    else:
        per_worker = [[] for _ in range(workers)]
        threads = [threading.Thread(target=run, args=(lat,)) for lat in per_worker]
        start = clock()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = clock() - start
        latencies = [v for lat in per_worker for v in lat]
    if elapsed <= 0:
        raise InvalidParameter("clock did not advance during the measured window")

    frames = measured_iters * batch * workers
    ms = [v / 1e6 for v in latencies]
    cfg = getattr(model, "config", None)
    return BenchReport(
        model_id=model_id or (cfg.kind if cfg is not None else type(model).__name__),
        host=host_descriptor(),
        threads=os.cpu_count() or 1,
        warmup_iters=warmup_iters,
        measured_iters=measured_iters,
        batch=batch,
        fps=frames / (elapsed / 1e9),
        latency_p50_ms=nearest_rank(ms, 50),
        latency_p95_ms=nearest_rank(ms, 95),
        latency_p99_ms=nearest_rank(ms, 99),
        model_size_bytes=4 * param_count(model),
        workers=workers,
    )


def size_report(checkpoint_path) -> tuple[int, int, int]:
    """(param_count, payload_bytes, total_file_bytes) read from a checkpoint."""
    header, payload = read_checkpoint(checkpoint_path)
    count = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"])
    total = Path(checkpoint_path).stat().st_size
    return count, len(payload), total
