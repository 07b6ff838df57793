"""Readout throughput for the compiled and numpy kernels against a naive oracle."""
from __future__ import annotations

import time

import numpy as np

from ..kernels import available_backends, readout_kernel

BENCH_SIZES = (576, 8640, 86400)


def naive_readout(keys, values, queries, dot: bool = False) -> np.ndarray:
    """Per-query float64 reference: scores, softmax over all keys, weighted sum."""
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    out = np.empty((len(queries), v.shape[1]))
    for j, q in enumerate(np.asarray(queries, dtype=np.float64)):
        s = k @ q if dot else -((k - q) ** 2).sum(axis=1)
        e = np.exp(s - s.max())
        out[j] = (e / e.sum()) @ v
    return out


def relative_error(got, ref) -> float:
    """Largest absolute deviation relative to the reference's largest magnitude."""
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(float(np.abs(ref).max()), np.finfo(np.float64).tiny)
    return float(np.abs(np.asarray(got, dtype=np.float64) - ref).max() / scale)


def bench_readout(sizes=BENCH_SIZES, queries: int = 576, c_pk: int = 64, c_p: int = 384,
                  backends=None, oracle_queries: int = 8, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    backends = list(backends or available_backends())
    q = rng.normal(size=(queries, c_pk)).astype(np.float32)
    report = []
    for n in sizes:
        keys = rng.normal(size=(n, c_pk)).astype(np.float32)
        values = rng.normal(size=(n, c_p)).astype(np.float32)
        # shrink the key spread so the softmax is not a one-hot
        keys *= np.float32(0.15)
        q_n = q * np.float32(0.15)
        ref = naive_readout(keys, values, q_n[:oracle_queries])
        for backend in backends:
            t0 = time.perf_counter()
            out = readout_kernel(keys, values, q_n, backend=backend)
            elapsed = time.perf_counter() - t0
            report.append({
                "n": n, "queries": queries, "backend": backend, "seconds": elapsed,
                "rel_err": relative_error(out[:oracle_queries], ref),
            })
    return report
