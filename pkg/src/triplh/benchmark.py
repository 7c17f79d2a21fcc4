"""Per-pair scoring latency: squared-Lorentz score versus Poincare distance.

Both kernels are compiled with identical numba flags and run single-threaded
over the same pre-generated inputs. Each user row is scored against a
contiguous run of item rows, which is how a full-catalog ranking pass reads
memory. Nothing is allocated inside the timed region.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

# A timed batch shorter than this is dominated by timer resolution and call overhead.
MIN_BATCH_SECONDS = 1e-3


@njit(fastmath=True)
def _lorentz_kernel(users, items, user_idx, item_idx, out):
    d = users.shape[1]
    for p in range(user_idx.shape[0]):
        a = user_idx[p]
        b = item_idx[p]
        inner = -users[a, 0] * items[b, 0]
        for k in range(1, d):
            inner += users[a, k] * items[b, k]
        d_uv = -2.0 - 2.0 * inner
        d_ou = -2.0 + 2.0 * users[a, 0]
        d_ov = -2.0 + 2.0 * items[b, 0]
        out[p] = 0.5 * (d_uv - d_ou - d_ov) / (users[a, 0] * items[b, 0])


@njit(fastmath=True)
def _poincare_kernel(users, items, user_idx, item_idx, out):
    d = users.shape[1]
    for p in range(user_idx.shape[0]):
        a = user_idx[p]
        b = item_idx[p]
        sq = 0.0
        xx = 0.0
        yy = 0.0
        for k in range(d):
            x = users[a, k]
            y = items[b, k]
            diff = x - y
            sq += diff * diff
            xx += x * x
            yy += y * y
        out[p] = -math.acosh(1.0 + 2.0 * sq / ((1.0 - xx) * (1.0 - yy)))


@dataclass
class LatencyStats:
    mean_ns: float
    p95_ns: float
    samples_ns: list

    def to_dict(self) -> dict:
        return {"mean_ns": self.mean_ns, "p95_ns": self.p95_ns}


@dataclass
class LatencyReport:
    dim: int
    n_pairs: int
    repetitions: int
    lorentz: LatencyStats
    poincare: LatencyStats

    @property
    def ratio(self) -> float:
        """Poincare time over Lorentz time; above 1 means Lorentz is faster."""
        return self.poincare.mean_ns / self.lorentz.mean_ns

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_pairs": self.n_pairs,
            "repetitions": self.repetitions,
            "lorentz_ns": self.lorentz.mean_ns,
            "lorentz_p95_ns": self.lorentz.p95_ns,
            "poincare_ns": self.poincare.mean_ns,
            "poincare_p95_ns": self.poincare.p95_ns,
            "ratio": self.ratio,
        }


def _pairs(n_pairs: int, n_rows: int):
    # block layout: user 0 against items 0..n_rows-1, then user 1, ...
    flat = np.arange(n_pairs, dtype=np.int64)
    return (flat // n_rows) % n_rows, flat % n_rows


def _stats(samples: list) -> LatencyStats:
    arr = np.asarray(samples)
    return LatencyStats(float(arr.mean()), float(np.percentile(arr, 95)), samples)


def latency_bench(
    dim: int = 64, n_pairs: int = 1_000_000, repetitions: int = 5, seed: int = 0
) -> LatencyReport:
    """Time both scoring kernels and return per-pair nanoseconds.

    Raises ``ValueError`` for non-positive sizes and when a batch finishes in
    too few timer ticks to measure; use more pairs in that case.
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")

    rng = np.random.default_rng(seed)
    n_rows = max(1, min(4096, math.isqrt(n_pairs)))
    # Small ambient norms keep Poincare points well inside the ball.
    x = rng.normal(0.0, 0.5 / math.sqrt(dim), size=(n_rows, dim))
    y = rng.normal(0.0, 0.5 / math.sqrt(dim), size=(n_rows, dim))
    lifted_x = np.hstack([np.sqrt(1.0 + np.sum(x * x, axis=1))[:, None], x])
    lifted_y = np.hstack([np.sqrt(1.0 + np.sum(y * y, axis=1))[:, None], y])
    user_idx, item_idx = _pairs(n_pairs, n_rows)
    out = np.empty(n_pairs)

    # compile, fault in the output pages and warm caches outside the timed region
    _lorentz_kernel(lifted_x, lifted_y, user_idx, item_idx, out)
    _poincare_kernel(x, y, user_idx, item_idx, out)

    floor = max(MIN_BATCH_SECONDS, 1000 * time.get_clock_info("perf_counter").resolution)
    lorentz, poincare = [], []
    for _ in range(repetitions):
        for kernel, args, sink in (
            (_lorentz_kernel, (lifted_x, lifted_y), lorentz),
            (_poincare_kernel, (x, y), poincare),
        ):
            start = time.perf_counter()
            kernel(*args, user_idx, item_idx, out)
            elapsed = time.perf_counter() - start
            if elapsed < floor:
                raise ValueError(
                    f"{n_pairs} pairs ran in {elapsed:.3g}s, too short to time reliably; "
                    "increase n_pairs"
                )
            sink.append(elapsed * 1e9 / n_pairs)
    return LatencyReport(dim, n_pairs, repetitions, _stats(lorentz), _stats(poincare))
