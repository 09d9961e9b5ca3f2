# coding=utf-8
# Copyright 2025. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Throughput of the scalar, vectorized and threaded pack paths and of unpack."""

import logging
import timeit
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .codec import WORD_BYTES, pack, pack_parallel, pack_vectorized, unpack, vector_backend


logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["operation", "path", "weights", "round_to", "workers", "seconds", "gbytes_per_s"]
# inputs at least this large are expected to favour the vectorized path
VECTOR_WARN_BYTES = 4 * 1024 * 1024


class EquivalenceError(AssertionError):
    pass


@dataclass
class BenchResult:
    operation: str
    path: str
    weights: int
    round_to: int
    workers: int
    seconds: float
    gbytes_per_s: float


def random_weights(num_weights: int, seed: int = 0) -> np.ndarray:
    """Uniformly random 32-bit patterns viewed as float32 (NaN, Inf and subnormals included)."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2**32, size=num_weights, dtype=np.uint32).view(np.float32)


def check_equivalence(
    num_weights: int = 1_000_000, worker_counts: Sequence[int] = (1, 2, 8), seed: int = 0
) -> None:
    """Raises `EquivalenceError` unless every pack path matches the scalar path for all widths."""
    weights = random_weights(num_weights, seed)
    for r in range(1, WORD_BYTES + 1):
        reference = pack(weights, r).payload
        candidates = {"vectorized": pack_vectorized(weights, r).payload}
        for workers in worker_counts:
            candidates[f"parallel[{workers}]"] = pack_parallel(weights, r, workers).payload
        for name, payload in candidates.items():
            if payload != reference:
                raise EquivalenceError(f"{name} pack differs from the scalar path at round_to={r}")
    logger.info(f"Pack paths are byte-identical on {num_weights} random weights for round_to 1..{WORD_BYTES}")


def _best_of(fn, repeats: int) -> float:
    return min(timeit.Timer(fn).repeat(repeat=repeats, number=1))


def bench_codec(
    sizes: Sequence[int],
    round_tos: Sequence[int],
    worker_counts: Sequence[int],
    repeats: int = 5,
    seed: int = 0,
    precheck_weights: int = 1_000_000,
) -> list[BenchResult]:
    check_equivalence(precheck_weights, worker_counts=worker_counts, seed=seed)
    if vector_backend() is None:
        logger.warning("No vector backend reported for this host; the vectorized path falls back to scalar")

    results = []
    for size in sizes:
        weights = random_weights(size, seed)
        raw_gb = size * WORD_BYTES / 1e9

        def record(operation: str, path: str, r: int, workers: int, seconds: float) -> BenchResult:
            result = BenchResult(operation, path, size, r, workers, seconds, raw_gb / seconds if seconds > 0 else 0.0)
            results.append(result)
            return result

        for r in round_tos:
            scalar = record("pack", "scalar", r, 1, _best_of(lambda: pack(weights, r), repeats))
            vectorized = record("pack", "vectorized", r, 1, _best_of(lambda: pack_vectorized(weights, r), repeats))
            for workers in worker_counts:
                record("pack", "parallel", r, workers, _best_of(lambda: pack_parallel(weights, r, workers), repeats))
            block = pack(weights, r)
            record("unpack", "scalar", r, 1, _best_of(lambda: unpack(block), repeats))

            if size * WORD_BYTES >= VECTOR_WARN_BYTES and vectorized.seconds > scalar.seconds:
                logger.warning(
                    f"vectorized pack slower than scalar for {size} weights at round_to={r}: "
                    f"{vectorized.seconds * 1e3:.3f} ms vs {scalar.seconds * 1e3:.3f} ms"
                )
    return results


def results_frame(results: Sequence[BenchResult]) -> pd.DataFrame:
    return pd.DataFrame([asdict(result) for result in results], columns=BENCH_COLUMNS)
