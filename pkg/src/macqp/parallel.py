"""Deterministic data-parallel execution of independent subproblems.

Phases (weight updates, coordinate updates, candidate fits) are barriers;
within a phase every task is a pure function writing a disjoint slot.
Results are merged in task-index order, so the outcome is bit-identical
for any worker count.
"""

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .model import MacqpError


@dataclass
class ParallelConfig:
    workers: int = 1
    shard_granularity: str = "auto"

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.shard_granularity not in ("auto", "per_unit", "per_point"):
            raise ValueError(f"unknown shard granularity {self.shard_granularity!r}")


def resolve_workers(requested):
    """Worker count, honoring the MAC_WORKERS environment override."""
    env = os.environ.get("MAC_WORKERS")
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError("MAC_WORKERS must be >= 1")
        return n
    return max(1, int(requested))


def parallel_map(tasks, workers):
    """Run zero-argument tasks and return their results in index order.

    With one worker this is a plain serial loop.  A failing task aborts
    the whole phase with an error naming its index.
    """
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        out = []
        for i, t in enumerate(tasks):
            try:
                out.append(t())
            except MacqpError:
                raise
            except Exception as exc:
                raise MacqpError(f"task {i} failed: {exc}") from exc
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(t) for t in tasks]
        out = []
        for i, fut in enumerate(futures):
            try:
                out.append(fut.result())
            except MacqpError:
                raise
            except Exception as exc:
                raise MacqpError(f"task {i} failed: {exc}") from exc
        return out


def chunk_slices(n, workers):
    """Contiguous index ranges covering 0..n, at most ``workers`` of them."""
    k = min(workers, n) if n > 0 else 0
    if k == 0:
        return []
    base, extra = divmod(n, k)
    slices = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        slices.append((start, start + size))
        start += size
    return slices


def speedup_bench(config, worker_counts, base_output_dir=None):
    """Run the identical experiment per worker count and time it.

    Returns rows of (workers, seconds, speedup-vs-first).  The
    correctness gate is checkpoint equality across worker counts, checked
    here by hash; a mismatch is an error.
    """
    from . import harness  # deferred: harness imports this module

    rows = []
    digests = set()
    for idx, w in enumerate(worker_counts):
        cfg = dict(config)
        cfg.setdefault("parallel", {})
        cfg = harness.override_workers(cfg, w)
        if base_output_dir is not None:
            cfg["output_dir"] = os.path.join(base_output_dir, f"workers_{w}")
        t0 = time.perf_counter()
        result = harness.run_experiment(cfg)
        seconds = time.perf_counter() - t0
        with open(result["model_path"], "rb") as fh:
            digests.add(hashlib.sha256(fh.read()).hexdigest())
        speedup = rows[0][1] / seconds if rows else 1.0
        rows.append((w, seconds, speedup))
    if len(digests) > 1:
        raise MacqpError("checkpoints differ across worker counts")
    return rows
