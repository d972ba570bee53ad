"""Wall-clock micro-benchmarks and log-log scaling fits."""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

CSV_HEADER = ("op", "tokens", "channels", "repeats", "median_ms", "p10_ms", "p90_ms")
WARMUP = 2
MIN_REPEATS = 5


@dataclass(frozen=True)
class BenchRecord:
    op_name: str
    input_tokens: int
    channels: int
    repeats: int
    median_ms: float
    p10_ms: float
    p90_ms: float

    def row(self) -> list:
        return [self.op_name, self.input_tokens, self.channels, self.repeats,
                f"{self.median_ms:.6f}", f"{self.p10_ms:.6f}", f"{self.p90_ms:.6f}"]


@dataclass
class BenchOp:
    """A named computation; ``setup(tokens, channels, rng)`` returns a
    zero-argument callable that performs one timed run."""

    name: str
    setup: Callable[[int, int, np.random.Generator], Callable[[], object]]


def _wkv_setup(fn):
    from .wkv import WkvParams

    def setup(tokens, channels, rng):
        k = rng.standard_normal((tokens, channels))
        v = rng.standard_normal((tokens, channels))
        p = WkvParams(rng.uniform(0.1, 2.0, channels), rng.standard_normal(channels))
        return lambda: fn(k, v, p)
    return setup


def wkv_ops() -> dict[str, BenchOp]:
    from .wkv import bi_wkv_reference, bi_wkv_scan
    return {
        "bi_wkv_scan": BenchOp("bi_wkv_scan", _wkv_setup(bi_wkv_scan)),
        "bi_wkv_reference": BenchOp("bi_wkv_reference", _wkv_setup(bi_wkv_reference)),
    }


def backbone_op(variant: str = "S", seed: int = 0) -> BenchOp:
    """Backbone inference on a square image; ``tokens`` is the pixel count."""
    from .backbone import BackboneConfig, backbone_forward, build_backbone
    model = build_backbone(BackboneConfig.from_variant(variant), seed)

    def setup(tokens, channels, rng):
        side = math.isqrt(tokens)
        if side * side != tokens:
            raise ContractError(f"backbone bench needs a square pixel count, got {tokens}")
        image = rng.uniform(0.0, 1.0, (side, side, 3)).astype(np.float32)
        return lambda: backbone_forward(model, image)

    return BenchOp(f"backbone_{variant}", setup)


def noop_op() -> BenchOp:
    return BenchOp("noop", lambda tokens, channels, rng: (lambda: None))


def bench(op: BenchOp, sizes: Sequence[int], repeats: int = MIN_REPEATS, channels: int = 64,
          seed: int = 0, warmup: int = WARMUP) -> list[BenchRecord]:
    """Median/p10/p90 wall time per size, after ``warmup`` untimed runs."""
    sizes = list(sizes)
    if len(sizes) < 3:
        raise ContractError(f"need at least 3 sizes, got {len(sizes)}")
    if sizes != sorted(sizes):
        raise ContractError("sizes must be ascending")
    if repeats < MIN_REPEATS:
        raise ContractError(f"repeats must be >= {MIN_REPEATS}")
    records = []
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        try:
            run = op.setup(n, channels, rng)
            for _ in range(warmup):
                run()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append((time.perf_counter() - t0) * 1e3)
        except Exception as exc:  # a failed size is skipped, not fatal
            warnings.warn(f"{op.name} at {n} tokens failed: {exc!r}; record skipped")
            continue
        p10, med, p90 = np.percentile(times, [10, 50, 90])
        records.append(BenchRecord(op.name, n, channels, repeats, float(med), float(p10), float(p90)))
    return records


def scaling_exponent(records: Sequence[BenchRecord]) -> float:
    """Least-squares slope of log(median_ms) against log(tokens)."""
    if len(records) < 3:
        raise ContractError(f"need at least 3 records to fit a slope, got {len(records)}")
    n = np.array([r.input_tokens for r in records], dtype=np.float64)
    t = np.array([r.median_ms for r in records], dtype=np.float64)
    if (n <= 0).any() or (t <= 0).any():
        raise ContractError("token counts and times must be positive")
    slope, _ = np.polyfit(np.log(n), np.log(t), 1)
    return float(slope)


def write_csv(path, records: Sequence[BenchRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [BenchRecord(r["op"], int(r["tokens"]), int(r["channels"]), int(r["repeats"]),
                        float(r["median_ms"]), float(r["p10_ms"]), float(r["p90_ms"])) for r in rows]
