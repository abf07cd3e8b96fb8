"""Throughput of eval forwards for N x P layouts, branches run in a loop or on a worker pool.

``seq`` evaluates the P branches of each layer one after another on the
calling thread; ``par`` submits them to a thread pool and sums the results in
branch order. Both compute the same parallel-layout function, so their
outputs are checked for agreement before any timing is reported.
"""
from __future__ import annotations

import csv
import io
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .config import ViTConfig, parse_layout
from .errors import ConfigError, ConsistencyError
from .model import build_model, forward_parallel
from .rng import Rng

CSV_FIELDS = ["layout", "exec", "batch", "ips", "stddev", "repeats"]
REL_TOL = 1e-5


@dataclass
class BenchRow:
    layout: str
    exec: str
    batch: int
    ips: float
    stddev: float
    repeats: int


@dataclass
class BenchReport:
    rows: list[BenchRow]
    config: dict
    workers: int
    max_rel_diff: float = 0.0
    schema_version: str = "1"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.layout, r.exec, r.batch, f"{r.ips:.6g}", f"{r.stddev:.6g}", r.repeats])
        return buf.getvalue()


def worker_count(branches: int) -> int:
    cap = os.environ.get("VTC_THREADS")
    n = branches
    if cap:
        n = min(n, max(1, int(cap)))
    return max(n, 1)


def _rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-30)
    return float(np.abs(a.astype(np.float64) - b).max()) / scale


def bench(config: ViTConfig, layouts, exec_modes=("seq", "par"), batch_sizes=(1,), repeats: int = 5,
          warmup: int = 2, seed: int = 0) -> BenchReport:
    if repeats < 5 or warmup < 2:
        raise ConfigError("bench needs at least 5 timed repeats and 2 warmups")
    for m in exec_modes:
        if m not in ("seq", "par"):
            raise ConfigError(f"exec mode must be 'seq' or 'par', got {m!r}")
    parsed = [parse_layout(s) if isinstance(s, str) else tuple(s) for s in layouts]
    if "par" in exec_modes:
        for n, p in parsed:
            if p < 2:
                raise ConfigError(f"par execution needs P > 1, layout {n}x{p} has a single branch")
    rows, worst = [], 0.0
    pool_size = max(worker_count(p) for _, p in parsed)
    with ThreadPoolExecutor(max_workers=pool_size) as pool, T.no_grad():
        for n, p in parsed:
            cfg = config.replace(depth=n, branches=p)
            model = build_model(cfg, Rng(seed))
            for b in batch_sizes:
                x = Rng(seed).fork(f"bench-{b}").normal((b, cfg.in_channels, cfg.image_size, cfg.image_size),
                                                       dtype=T.resolve_dtype(cfg.dtype))
                run = {"seq": lambda: forward_parallel(model, x, "eval"),
                       "par": lambda: forward_parallel(model, x, "eval", executor=pool)}
                outs = {m: run[m]().data for m in exec_modes}
                if len(outs) == 2:
                    diff = _rel_diff(outs["seq"], outs["par"])
                    worst = max(worst, diff)
                    if diff > REL_TOL:
                        raise ConsistencyError(f"layout {n}x{p} batch {b}: seq/par outputs differ by {diff:.3g} relative")
                for m in exec_modes:
                    for _ in range(warmup):
                        run[m]()
                    rates = []
                    for _ in range(repeats):
                        t0 = time.perf_counter()
                        run[m]()
                        rates.append(b / max(time.perf_counter() - t0, 1e-9))
                    rows.append(BenchRow(f"{n}x{p}", m, b, statistics.fmean(rates), statistics.stdev(rates), repeats))
    return BenchReport(rows, config.to_dict(), pool_size, worst)
