"""FIFO prompt memory bank, its softmax readout, and the on-disk snapshot format.

Snapshot layout (little-endian)::

    b"HIPM" | version u32 | N, C_Pk, C_P, tokens_per_frame, frame_count (u32 each)
    | frame_ids u64[N] | keys f32[N, C_Pk] | values f32[N, C_P]
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FrameOrderError, MemoryEmptyError, SnapshotError
from .kernels import DEFAULT_TILE, readout_kernel
from .nn import add_macs, as_feature_map

METRICS = ("neg_l2", "dot")
SNAPSHOT_MAGIC = b"HIPM"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sI5I")


@dataclass(frozen=True)
class ReadoutConfig:
    metric: str = "neg_l2"
    include_background: bool = True

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"readout metric must be one of {METRICS}, got {self.metric!r}")


class MemoryBank:
    """Prompt key/value tokens with per-token frame provenance.

    Holds at most ``capacity_frames`` distinct frames; when a new frame pushes
    the count over, the oldest frame outside the protected prefix is dropped
    as a whole. The first ``protected_prefix`` stored frames are never evicted
    (capped at ``capacity_frames - 1`` so new frames can always enter).

    Readers see an immutable (keys, values, frame_ids) triple swapped in under
    a lock by :meth:`insert_frame`, so concurrent readouts are safe while a
    writer inserts.
    """

    def __init__(self, c_pk: int, c_p: int, capacity_frames: int = 150, protected_prefix: int = 0):
        if capacity_frames < 1:
            raise ConfigError("memory capacity must be at least one frame")
        if protected_prefix < 0:
            raise ConfigError("protected_prefix must be non-negative")
        self.c_pk = int(c_pk)
        self.c_p = int(c_p)
        self.capacity_frames = int(capacity_frames)
        self.protected_prefix = int(protected_prefix)
        self.tokens_per_frame = 0
        self._lock = threading.Lock()
        self._data = (
            np.zeros((0, self.c_pk), np.float32),
            np.zeros((0, self.c_p), np.float32),
            np.zeros(0, np.int64),
        )

    # -- views ---------------------------------------------------------------

    @property
    def keys(self) -> np.ndarray:
        return self._data[0]

    @property
    def values(self) -> np.ndarray:
        return self._data[1]

    @property
    def frame_ids(self) -> np.ndarray:
        return self._data[2]

    def __len__(self) -> int:
        return self._data[2].size

    @property
    def frames(self) -> list[int]:
        return [int(f) for f in np.unique(self._data[2])]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._data

    # -- mutation ------------------------------------------------------------

    def insert_frame(self, key: np.ndarray, value: np.ndarray, frame_id: int,
                     mask: np.ndarray | None = None) -> None:
        """Append one frame's tokens in row-major spatial order.

        With ``mask`` given, only tokens whose mask bit is set are stored.
        """
        key = as_feature_map(key, self.c_pk, "prompt key")
        value = as_feature_map(value, self.c_p, "prompt value")
        if key.shape[:2] != value.shape[:2]:
            raise DimensionError(f"key grid {key.shape[:2]} != value grid {value.shape[:2]}")
        hp, wp = key.shape[:2]
        k = key.reshape(-1, self.c_pk)
        v = value.reshape(-1, self.c_p)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (hp, wp):
                raise DimensionError(f"mask {mask.shape} does not match grid {(hp, wp)}")
            keep = mask.reshape(-1)
            k, v = k[keep], v[keep]
        with self._lock:
            keys, values, ids = self._data
            if ids.size and frame_id <= ids[-1]:
                raise FrameOrderError(f"frame id {frame_id} is not after stored frame {int(ids[-1])}")
            if self.tokens_per_frame and self.tokens_per_frame != hp * wp:
                raise DimensionError("all frames in one bank must share a token grid")
            self.tokens_per_frame = hp * wp
            if k.shape[0] == 0:
                return
            keys = np.concatenate([keys, k])
            values = np.concatenate([values, v])
            ids = np.concatenate([ids, np.full(k.shape[0], frame_id, np.int64)])
            stored = np.unique(ids)
            if stored.size > self.capacity_frames:
                protected = min(self.protected_prefix, self.capacity_frames - 1)
                drop = stored[protected:stored.size - self.capacity_frames + protected]
                keep_rows = ~np.isin(ids, drop)
                keys, values, ids = keys[keep_rows], values[keep_rows], ids[keep_rows]
            self._data = (keys, values, ids)

    def clear(self) -> None:
        with self._lock:
            self._data = (self._data[0][:0], self._data[1][:0], self._data[2][:0])


# ---------------------------------------------------------------------------
# readout


def _queries(bank: MemoryBank, Q: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    Q = as_feature_map(Q, bank.c_pk, "query")
    return Q.reshape(-1, bank.c_pk), Q.shape[:2]


def readout(bank: MemoryBank, Q: np.ndarray, cfg: ReadoutConfig = ReadoutConfig(), *,
            tile: int = DEFAULT_TILE, backend: str | None = None) -> np.ndarray:
    """Historical prompt for every query position, shaped like Q with C_P channels."""
    keys, values, _ = bank.snapshot()
    if keys.shape[0] == 0:
        raise MemoryEmptyError("memory bank is empty")
    q, grid = _queries(bank, Q)
    out = readout_kernel(keys, values, q, dot=cfg.metric == "dot", tile=tile, backend=backend)
    add_macs(keys.shape[0] * q.shape[0] * (bank.c_pk + bank.c_p), "readout")
    return out.reshape(*grid, bank.c_p)


def similarity(keys: np.ndarray, queries: np.ndarray, metric: str = "neg_l2") -> np.ndarray:
    """Full (N, M) score matrix in float64."""
    k = np.asarray(keys, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    dots = k @ q.T
    if metric == "dot":
        return dots
    return 2.0 * dots - np.einsum("ij,ij->i", k, k)[:, None] - np.einsum("ij,ij->i", q, q)[None, :]


@dataclass
class Attention:
    matrix: np.ndarray  # (N, M), columns sum to one
    frame_ids: np.ndarray  # (N,)
    frames: np.ndarray  # distinct frame ids
    per_frame: np.ndarray  # (n_frames, M) attention mass per stored frame


def readout_attention(bank: MemoryBank, Q: np.ndarray, cfg: ReadoutConfig = ReadoutConfig()) -> Attention:
    keys, _, ids = bank.snapshot()
    if keys.shape[0] == 0:
        raise MemoryEmptyError("memory bank is empty")
    q, _ = _queries(bank, Q)
    s = similarity(keys, q, cfg.metric)
    a = np.exp(s - s.max(axis=0, keepdims=True))
    a /= a.sum(axis=0, keepdims=True)
    frames, inverse = np.unique(ids, return_inverse=True)
    per_frame = np.zeros((frames.size, a.shape[1]))
    np.add.at(per_frame, inverse, a)
    return Attention(a, ids.copy(), frames, per_frame)


def update_due(frame_idx: int, interval: int = 20, warmup_len: int = 10, warmup_stride: int = 5) -> bool:
    """Whether the 1-based ``frame_idx`` is inserted into memory.

    Frame 1 seeds the bank at initialisation and is not covered here.
    """
    if frame_idx <= 1:
        return False
    if frame_idx <= warmup_len:
        return frame_idx % warmup_stride == 0
    return frame_idx % interval == 0


# ---------------------------------------------------------------------------
# snapshots


def save_snapshot(bank: MemoryBank, path) -> None:
    keys, values, ids = bank.snapshot()
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, ids.size, bank.c_pk, bank.c_p,
                          bank.tokens_per_frame, np.unique(ids).size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ids.astype("<u8").tobytes())
        fh.write(keys.astype("<f4").tobytes())
        fh.write(values.astype("<f4").tobytes())


def load_snapshot(path, capacity_frames: int | None = None, protected_prefix: int = 0) -> MemoryBank:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SnapshotError("snapshot is shorter than its header")
    magic, version, n, c_pk, c_p, tpf, n_frames = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    expected = _HEADER.size + 8 * n + 4 * n * (c_pk + c_p)
    if len(data) != expected or c_pk < 1 or c_p < 1:
        raise SnapshotError(f"snapshot has {len(data)} bytes, header implies {expected}")
    off = _HEADER.size
    ids = np.frombuffer(data, "<u8", n, off).astype(np.int64)
    off += 8 * n
    keys = np.frombuffer(data, "<f4", n * c_pk, off).reshape(n, c_pk).astype(np.float32)
    off += 4 * n * c_pk
    values = np.frombuffer(data, "<f4", n * c_p, off).reshape(n, c_p).astype(np.float32)
    if n and np.any(np.diff(ids) < 0):
        raise SnapshotError("snapshot frame ids are not in storage order")
    if np.unique(ids).size != n_frames:
        raise SnapshotError("snapshot frame count disagrees with its frame ids")
    bank = MemoryBank(c_pk, c_p, capacity_frames or max(1, n_frames), protected_prefix)
    bank.tokens_per_frame = tpf
    bank._data = (keys, values, ids)
    return bank
