"""Training clip sampling: a template frame plus search frames at random gaps."""
from __future__ import annotations

import numpy as np


def sample_training_frames(video_len: int, n: int = 6, max_interval: int = 70, rng=None,
                           *, max_retries: int = 100) -> list[int]:
    """``n`` frame indices with adjacent gaps in ``[1, max_interval]``.

    Gaps are redrawn while the walk overruns the video; after ``max_retries``
    the largest gaps are shortened until it fits. Videos shorter than ``n``
    frames repeat indices. A fair coin reverses the order; the first entry
    is the template.
    """
    if video_len < 1:
        raise ValueError("video_len must be >= 1")
    if n < 1 or max_interval < 1:
        raise ValueError("n and max_interval must be >= 1")
    rng = np.random.default_rng(rng)
    last = video_len - 1
    if last < n - 1:
        # not enough distinct frames: spread what there is, duplicating
        idx = np.floor(np.arange(n) * (last / max(n - 1, 1))).astype(np.int64)
    else:
        for _ in range(max_retries):
            gaps = rng.integers(1, max_interval + 1, n - 1)
            if gaps.sum() <= last:
                break
        else:
            while gaps.sum() > last:
                gaps[int(np.argmax(gaps))] -= 1
        start = int(rng.integers(0, last - int(gaps.sum()) + 1))
        idx = start + np.concatenate([[0], np.cumsum(gaps)])
    if rng.random() < 0.5:
        idx = idx[::-1]
    return [int(i) for i in idx]
