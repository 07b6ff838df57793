"""Readout kernel dispatch: compiled extension when built, numpy otherwise.

Set ``HISTPROMPT_PURE_PYTHON=1`` to force the numpy path at import time.
Both paths tile over keys with an online softmax and accumulate in float64,
so they agree to rounding.
"""
from __future__ import annotations

import os

import numpy as np

DEFAULT_TILE = 512

try:
    if os.environ.get("HISTPROMPT_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from . import _readout
except ImportError:  # pragma: no cover - depends on the build
    _readout = None

BACKEND = "cython" if _readout is not None else "numpy"


def readout_numpy(keys, values, queries, dot=False, tile=DEFAULT_TILE):
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    queries = np.asarray(queries, dtype=np.float32)
    n, d = keys.shape
    m = queries.shape[0]
    if values.shape[0] != n or queries.shape[1] != d:
        raise ValueError("keys, values and queries are misaligned")
    if n == 0 or m == 0:
        raise ValueError("empty bank or query set")
    q64 = queries.astype(np.float64)
    acc = np.zeros((m, values.shape[1]))
    mx = np.full(m, -np.inf)
    den = np.zeros(m)
    for start in range(0, n, tile):
        k = keys[start:start + tile].astype(np.float64)
        v = values[start:start + tile].astype(np.float64)
        if dot:
            s = k @ q64.T
        else:
            # -|q|^2 is constant per column and cancels in the softmax
            s = 2.0 * (k @ q64.T) - np.einsum("ij,ij->i", k, k)[:, None]
        newmax = np.maximum(mx, s.max(axis=0))
        scale = np.exp(mx - newmax)
        den *= scale
        acc *= scale[:, None]
        mx = newmax
        p = np.exp(s - mx)
        den += p.sum(axis=0)
        acc += p.T @ v
    return (acc / den[:, None]).astype(np.float32)


def readout_kernel(keys, values, queries, dot=False, tile=DEFAULT_TILE, backend=None):
    """Softmax-weighted value aggregation, one output row per query row."""
    backend = backend or BACKEND
    if backend == "cython":
        if _readout is None:
            raise RuntimeError("compiled readout extension is not built")
        return _readout.readout(
            np.ascontiguousarray(keys, dtype=np.float32),
            np.ascontiguousarray(values, dtype=np.float32),
            np.ascontiguousarray(queries, dtype=np.float32),
            bool(dot), int(tile),
        )
    if backend == "numpy":
        return readout_numpy(keys, values, queries, dot, tile)
    raise ValueError(f"unknown backend {backend!r}")


def available_backends() -> list[str]:
    return ["cython", "numpy"] if _readout is not None else ["numpy"]
