"""Boxes, crop windows, patch masks and the candidate-elimination mask algebra."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GeometryError

PATCH = 16

__all__ = [
    "PATCH",
    "BoundingBox",
    "CropWindow",
    "ce_keep_indices",
    "ce_mask",
    "crop_image",
    "iou",
    "make_crop_window",
    "map_box",
    "mask_from_pbm",
    "mask_to_pbm",
    "rasterize_box_mask",
    "refine_mask",
    "upsample_mask_to_pixels",
]

SPACES = ("image", "crop")


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    space: str = "image"

    def __post_init__(self):
        if self.space not in SPACES:
            raise GeometryError(f"unknown coordinate space {self.space!r}")

    @classmethod
    def from_center(cls, cx, cy, w, h, space="image"):
        return cls(cx - w / 2.0, cy - h / 2.0, w, h, space)

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0 and all(map(math.isfinite, (self.x, self.y, self.w, self.h)))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def clip(self, frame_h: int, frame_w: int, min_size: float = 1.0) -> "BoundingBox":
        """Clip to the frame, keeping at least ``min_size`` pixels inside it."""
        x0 = min(max(self.x, 0.0), frame_w - min_size)
        y0 = min(max(self.y, 0.0), frame_h - min_size)
        x1 = max(min(self.x + self.w, float(frame_w)), x0 + min_size)
        y1 = max(min(self.y + self.h, float(frame_h)), y0 + min_size)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0, self.space)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class CropWindow:
    """Square region of a frame resampled to ``out_size`` x ``out_size`` pixels."""

    cx: float
    cy: float
    side: float
    frame_h: int
    frame_w: int
    out_size: int

    def __post_init__(self):
        if not self.side > 0:
            raise GeometryError("crop side must be positive")
        if self.out_size < 1:
            raise GeometryError("crop output size must be positive")

    @property
    def scale(self) -> float:
        """Crop pixels per image pixel."""
        return self.out_size / self.side

    @property
    def x0(self) -> float:
        return self.cx - self.side / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.side / 2.0


def make_crop_window(prev_box: BoundingBox, factor: float, frame_dims, out_size: int) -> CropWindow:
    if not (prev_box.w > 0 and prev_box.h > 0):
        raise GeometryError(f"degenerate box {prev_box}")
    if factor < 1:
        raise GeometryError(f"crop factor must be >= 1, got {factor}")
    side = factor * math.sqrt(prev_box.w * prev_box.h)
    frame_h, frame_w = frame_dims
    return CropWindow(prev_box.cx, prev_box.cy, side, int(frame_h), int(frame_w), int(out_size))


def map_box(box: BoundingBox, src: str, dst: str, window: CropWindow) -> BoundingBox:
    if box.space != src:
        raise GeometryError(f"box is in {box.space!r} space, not {src!r}")
    if dst not in SPACES:
        raise GeometryError(f"unknown coordinate space {dst!r}")
    if src == dst:
        return box
    s = window.scale
    if dst == "crop":
        return BoundingBox((box.x - window.x0) * s, (box.y - window.y0) * s, box.w * s, box.h * s, "crop")
    return BoundingBox(box.x / s + window.x0, box.y / s + window.y0, box.w / s, box.h / s, "image")


def crop_image(frame: np.ndarray, window: CropWindow, fill: float = 0.0) -> np.ndarray:
    """Bilinear resample of the window; samples falling outside the frame get ``fill``."""
    frame = np.asarray(frame, dtype=np.float32)
    h, w = frame.shape[:2]
    n = window.out_size
    coords = (np.arange(n, dtype=np.float64) + 0.5) / window.scale - 0.5
    ys = window.y0 + coords
    xs = window.x0 + coords
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]

    # work on the covered sub-window only, with a one-pixel ring of ``fill``
    ylo, yhi = max(int(y0[0]), -1), min(int(y0[-1]) + 1, h)
    xlo, xhi = max(int(x0[0]), -1), min(int(x0[-1]) + 1, w)
    sub = np.full((max(yhi - ylo + 1, 1), max(xhi - xlo + 1, 1), frame.shape[2]), fill, np.float64)
    ys_in, xs_in = slice(max(ylo, 0), min(yhi + 1, h)), slice(max(xlo, 0), min(xhi + 1, w))
    if ys_in.start < ys_in.stop and xs_in.start < xs_in.stop:
        sub[ys_in.start - ylo: ys_in.stop - ylo, xs_in.start - xlo: xs_in.stop - xlo] = frame[ys_in, xs_in]
    ny, nx = sub.shape[:2]
    iy0 = np.clip(y0 - ylo, 0, ny - 1)
    iy1 = np.clip(y0 + 1 - ylo, 0, ny - 1)
    ix0 = np.clip(x0 - xlo, 0, nx - 1)
    ix1 = np.clip(x0 + 1 - xlo, 0, nx - 1)
    # indices clipped to the sub-window border read ``fill`` whenever they fall outside the frame
    rows = sub[iy0] * (1 - fy) + sub[iy1] * fy
    out = rows[:, ix0] * (1 - fx) + rows[:, ix1] * fx
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# patch masks (boolean (hp, wp) arrays)


def rasterize_box_mask(box: BoundingBox, grid: tuple[int, int], patch_size: int = PATCH) -> np.ndarray:
    """A patch is set iff its centre pixel lies inside the half-open box."""
    if box.space != "crop":
        raise GeometryError("box masks are rasterised in crop space")
    hp, wp = grid
    if hp < 1 or wp < 1:
        raise DimensionError(f"grid must be positive, got {grid}")
    cy = (np.arange(hp) + 0.5) * patch_size
    cx = (np.arange(wp) + 0.5) * patch_size
    in_y = (cy >= box.y) & (cy < box.y + box.h)
    in_x = (cx >= box.x) & (cx < box.x + box.w)
    return in_y[:, None] & in_x[None, :]


def ce_keep_indices(scores, keep_ratio: float) -> np.ndarray:
    """Indices of the ``ceil(keep_ratio * n)`` highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.size
    if n == 0:
        raise DimensionError("no scores to rank")
    if not 0.0 < keep_ratio <= 1.0:
        raise GeometryError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    # guard against 0.7 * 10 == 7.000000000000001
    keep = min(n, math.ceil(keep_ratio * n - 1e-9))
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep])


def ce_mask(kept, grid: tuple[int, int]) -> np.ndarray:
    hp, wp = grid
    bits = np.zeros(hp * wp, dtype=bool)
    bits[np.asarray(kept, dtype=np.int64)] = True
    return bits.reshape(hp, wp)


def refine_mask(box_mask: np.ndarray, ce: np.ndarray) -> np.ndarray:
    box_mask = np.asarray(box_mask, dtype=bool)
    ce = np.asarray(ce, dtype=bool)
    if box_mask.shape != ce.shape:
        raise DimensionError(f"mask shapes differ: {box_mask.shape} vs {ce.shape}")
    return box_mask & ce


def upsample_mask_to_pixels(mask: np.ndarray, patch_size: int = PATCH) -> np.ndarray:
    """Nearest-neighbour expansion to an (H, W, 1) float32 map of zeros and ones."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim != 2:
        raise DimensionError("patch mask must be 2-D")
    block = np.ones((patch_size, patch_size), dtype=np.float32)
    return np.kron(mask, block)[:, :, None]


def mask_to_pbm(mask: np.ndarray, comment: str | None = None) -> str:
    mask = np.asarray(mask, dtype=bool)
    lines = ["P1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{mask.shape[1]} {mask.shape[0]}")
    lines.extend(" ".join("1" if b else "0" for b in row) for row in mask)
    return "\n".join(lines) + "\n"


def mask_from_pbm(text: str) -> np.ndarray:
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P1":
        raise GeometryError("not an ASCII PBM (P1) grid")
    w, h = int(tokens[1]), int(tokens[2])
    body = "".join(tokens[3:])
    if len(body) != w * h or set(body) - {"0", "1"}:
        raise GeometryError("PBM body does not match its header")
    return np.frombuffer(body.encode(), dtype=np.uint8).reshape(h, w) == ord("1")
