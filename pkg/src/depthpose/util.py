"""Seeding and threading helpers shared by all modules.

All randomness in the toolkit flows from one integer seed through named
sub-streams, so each stage (synthesis, weight init, dropout, shuffling)
can be reproduced in isolation.
"""

from __future__ import annotations

import contextlib
import os
import zlib

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

THREADS_ENV_VAR = "DEPTHPOSE_THREADS"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the sub-stream `name` under `seed`.

    The name is folded in via CRC32 so the mapping is stable across runs
    and platforms.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


_blas_pin_depth = 0


@contextlib.contextmanager
def single_thread_blas():
    """Pin BLAS to one thread for the enclosed block.

    Multi-threaded BLAS kernels are not bitwise reproducible across thread
    counts, so every code path with a determinism contract (training,
    clustering, batched inference) wraps its linear algebra in this.
    Parallelism is instead provided at the sample level with a fixed
    reduction order (see `net.forward`/`net.backward`). Re-entrant: nested
    uses are no-ops, so hot loops can hold one outer pin.
    """
    global _blas_pin_depth
    if threadpool_limits is None or _blas_pin_depth > 0:  # pragma: no cover
        yield
        return
    _blas_pin_depth += 1
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield
    finally:
        _blas_pin_depth -= 1


def default_threads() -> int:
    """Worker-thread default: $DEPTHPOSE_THREADS if set, else 1."""
    value = os.environ.get(THREADS_ENV_VAR, "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1
