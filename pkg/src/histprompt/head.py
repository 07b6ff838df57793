"""Center-style prediction head, box decoding, and forward-only training losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError
from .geometry import PATCH, BoundingBox, CropWindow, map_box
from .nn import ConvSpec, as_feature_map, conv2d, relu, sigmoid

_F32_ONE_MINUS = np.float32(1.0) - np.finfo(np.float32).epsneg
_F32_TINY = np.finfo(np.float32).tiny


@dataclass
class HeadWeights:
    compress_f: ConvSpec  # 1x1, C_F -> C_P
    reduce: ConvSpec  # 1x1, 2 C_P -> C_H, followed by a rectifier
    reduce_skip: ConvSpec  # parallel 1x1 projection added after the rectifier
    cls: list[ConvSpec]
    offset: list[ConvSpec]
    size: list[ConvSpec]

    def named_layers(self):
        yield "head.compress_f", self.compress_f
        yield "head.reduce", self.reduce
        yield "head.reduce_skip", self.reduce_skip
        for branch in ("cls", "offset", "size"):
            for i, spec in enumerate(getattr(self, branch)):
                yield f"head.{branch}.{i}", spec

    def validate(self, c_f: int, c_p: int) -> None:
        if self.compress_f.in_channels != c_f or self.compress_f.out_channels != c_p:
            raise ConfigError("head compressor must map C_F to C_P")
        for spec in (self.reduce, self.reduce_skip):
            if spec.in_channels != 2 * c_p or spec.kernel != 1:
                raise ConfigError("head reduction is a 1x1 conv over 2 C_P channels")
        if self.reduce.out_channels != self.reduce_skip.out_channels:
            raise ConfigError("reduction main and skip paths disagree on width")
        for name, out in (("cls", 1), ("offset", 2), ("size", 2)):
            branch = getattr(self, name)
            if branch[0].in_channels != self.reduce.out_channels or branch[-1].out_channels != out:
                raise ConfigError(f"{name} branch must map C_H channels to {out}")
            if any(s.stride != 1 for s in branch):
                raise ConfigError("head branches keep the patch grid")

    @classmethod
    def random(cls, c_f: int, c_p: int, c_h: int, rng: np.random.Generator,
               branch_kernel: int = 3) -> "HeadWeights":
        def branch(out):
            return [ConvSpec.random(c_h, c_h, branch_kernel, rng),
                    ConvSpec.random(c_h, c_h, branch_kernel, rng),
                    ConvSpec.random(c_h, out, 1, rng, gain=1.0)]

        return cls(
            compress_f=ConvSpec.random(c_f, c_p, 1, rng, gain=1.0),
            reduce=ConvSpec.random(2 * c_p, c_h, 1, rng),
            reduce_skip=ConvSpec.random(2 * c_p, c_h, 1, rng, gain=0.5),
            cls=branch(1), offset=branch(2), size=branch(2),
        )


@dataclass
class ScoreMaps:
    cls: np.ndarray  # (hp, wp) in (0, 1)
    offset: np.ndarray  # (hp, wp, 2) x/y in [0, 1)
    size: np.ndarray  # (hp, wp, 2) w/h in (0, 1]


def _branch(x, layers):
    for spec in layers[:-1]:
        x = relu(conv2d(x, spec))
    return conv2d(x, layers[-1])


def head_inputs(F: np.ndarray, prompt: np.ndarray, weights: HeadWeights) -> np.ndarray:
    """Reduced head trunk: rectified 1x1 reduction plus its parallel projection."""
    F = as_feature_map(F, weights.compress_f.in_channels, "search feature")
    prompt = as_feature_map(prompt, weights.compress_f.out_channels, "historical prompt")
    if F.shape[:2] != prompt.shape[:2]:
        raise DimensionError(f"feature grid {F.shape[:2]} != prompt grid {prompt.shape[:2]}")
    z = np.concatenate([conv2d(F, weights.compress_f), prompt], axis=2)
    return (relu(conv2d(z, weights.reduce)).astype(np.float64) + conv2d(z, weights.reduce_skip)).astype(np.float32)


def head_forward(F: np.ndarray, prompt: np.ndarray, weights: HeadWeights) -> ScoreMaps:
    trunk = head_inputs(F, prompt, weights)
    cls = np.clip(sigmoid(_branch(trunk, weights.cls)[:, :, 0]), _F32_TINY, _F32_ONE_MINUS)
    offset = np.clip(sigmoid(_branch(trunk, weights.offset)), 0.0, _F32_ONE_MINUS)
    size = np.clip(sigmoid(_branch(trunk, weights.size)), _F32_TINY, 1.0)
    return ScoreMaps(cls, offset, size)


def decode_box(maps: ScoreMaps, window: CropWindow, patch: int = PATCH) -> tuple[BoundingBox, float]:
    """Box at the highest-scoring cell (ties: lowest flattened index) in image space."""
    cls = np.asarray(maps.cls)
    idx = int(np.argmax(cls))
    iy, ix = divmod(idx, cls.shape[1])
    ox, oy = (float(v) for v in maps.offset[iy, ix])
    sw, sh = (float(v) for v in maps.size[iy, ix])
    cx = (ix + 0.5 + ox) * patch
    cy = (iy + 0.5 + oy) * patch
    w = sw * window.out_size
    h = sh * window.out_size
    box = BoundingBox.from_center(cx, cy, w, h, "crop")
    return map_box(box, "crop", "image", window), float(cls[iy, ix])


def box_to_targets(box: BoundingBox, grid: tuple[int, int], out_size: int, patch: int = PATCH):
    """Invert :func:`decode_box`: anchor cell (iy, ix), offset (ox, oy), size (sw, sh).

    Centres left of / above the first anchor clamp to offset 0.
    """
    if box.space != "crop":
        raise GeometryError("targets are built from crop-space boxes")
    hp, wp = grid

    def axis(c, n):
        u = c / patch - 0.5
        i = min(max(math.floor(u), 0), n - 1)
        return i, min(max(u - i, 0.0), float(_F32_ONE_MINUS))

    ix, ox = axis(box.cx, wp)
    iy, oy = axis(box.cy, hp)
    return (iy, ix), (ox, oy), (box.w / out_size, box.h / out_size)


def target_maps(box: BoundingBox, grid: tuple[int, int], out_size: int) -> tuple[np.ndarray, ScoreMaps]:
    """One-hot class target at the box's anchor cell plus score maps that decode to the box."""
    (iy, ix), (ox, oy), (sw, sh) = box_to_targets(box, grid, out_size)
    hp, wp = grid
    onehot = np.zeros((hp, wp), np.float32)
    onehot[iy, ix] = 1.0
    offset = np.zeros((hp, wp, 2), np.float64)
    size = np.zeros((hp, wp, 2), np.float64)
    offset[iy, ix] = (ox, oy)
    size[iy, ix] = (sw, sh)
    return onehot, ScoreMaps(onehot.astype(np.float64), offset, size)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    focal: float = 1.0
    giou: float = 5.0
    l1: float = 2.0

    def __post_init__(self):
        if min(self.focal, self.giou, self.l1) < 0:
            raise ConfigError("loss weights must be non-negative")


FOCAL_EPS = 1e-7


def focal_loss(pred, target, alpha: float = 0.25, gamma: float = 2.0, eps: float = FOCAL_EPS) -> float:
    """Mean per-cell focal loss of a probability map against a binary target."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and target {t.shape} differ")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("focal targets must be 0 or 1")
    p = np.clip(p, eps, 1.0 - eps)
    p_t = np.where(t == 1, p, 1.0 - p)
    alpha_t = np.where(t == 1, alpha, 1.0 - alpha)
    return float(np.mean(-alpha_t * (1.0 - p_t) ** gamma * np.log(p_t)))


def _corners(b):
    if isinstance(b, BoundingBox):
        x, y, w, h = b.as_tuple()
    else:
        x, y, w, h = (float(v) for v in b)
    if not (w > 0 and h > 0):
        raise GeometryError(f"degenerate box {(x, y, w, h)}")
    return x, y, x + w, y + h


def giou(pred, gt) -> float:
    ax0, ay0, ax1, ay1 = _corners(pred)
    bx0, by0, bx1, by1 = _corners(gt)
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def giou_loss(pred, gt) -> float:
    return 1.0 - giou(pred, gt)


def l1_box_loss(pred, gt, normalizer: float) -> float:
    """Mean absolute error over (cx, cy, w, h), each divided by ``normalizer``."""
    def cxcywh(b):
        x0, y0, x1, y1 = _corners(b)
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])

    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    return float(np.mean(np.abs(cxcywh(pred) - cxcywh(gt)) / normalizer))


def total_loss(focal: float, giou_term: float, l1: float, weights: LossWeights = LossWeights()) -> float:
    return weights.focal * focal + weights.giou * giou_term + weights.l1 * l1
