"""Frozen surrogate for the transformer backbone.

Each 16x16 patch is summarised by the mean colour of a ``g x g`` grid of
sub-blocks (``3 g^2`` statistics). The search feature is a fixed orthonormal
embedding of those statistics into ``C_F - 1`` channels, followed by one
channel holding the patch's cosine similarity to the template descriptor.
That same cosine is the candidate-elimination score.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..geometry import PATCH, BoundingBox, crop_image, make_crop_window, map_box, rasterize_box_mask
from .config import TrackerConfig


def patch_stats(crop: np.ndarray, grid: int = 2) -> np.ndarray:
    """(H/16, W/16, 3 grid^2) sub-block colour means, float64."""
    h, w, c = crop.shape
    hp, wp = h // PATCH, w // PATCH
    sub = PATCH // grid
    x = np.asarray(crop, dtype=np.float64)[: hp * PATCH, : wp * PATCH]
    x = x.reshape(hp, grid, sub, wp, grid, sub, c).mean(axis=(2, 5))
    return x.transpose(0, 2, 1, 3, 4).reshape(hp, wp, grid * grid * c)


@lru_cache(maxsize=16)
def embedding(seed: int, c_f: int, stat_dim: int) -> np.ndarray:
    """(C_F - 1, stat_dim) matrix with orthonormal columns."""
    rng = np.random.default_rng([seed, 104729])
    q, _ = np.linalg.qr(rng.normal(size=(c_f - 1, stat_dim)))
    q.setflags(write=False)
    return q


@dataclass
class TemplateDescriptor:
    appearance: np.ndarray  # (stat_dim,)
    crop: np.ndarray  # (template_size, template_size, 3)


def extract_template(frame: np.ndarray, box: BoundingBox, cfg: TrackerConfig) -> TemplateDescriptor:
    window = make_crop_window(box, cfg.template_factor, frame.shape[:2], cfg.template_size)
    crop = crop_image(frame, window)
    stats = patch_stats(crop, cfg.stat_grid)
    n = cfg.template_size // PATCH
    inside = rasterize_box_mask(map_box(box, "image", "crop", window), (n, n))
    if not inside.any():
        inside[n // 2, n // 2] = True
    return TemplateDescriptor(stats[inside].mean(axis=0), crop)


def cosine_to(stats: np.ndarray, ref: np.ndarray) -> np.ndarray:
    num = stats @ ref
    den = np.linalg.norm(stats, axis=-1) * np.linalg.norm(ref)
    return np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)


def surrogate_backbone(crop: np.ndarray, template: TemplateDescriptor,
                       cfg: TrackerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Search feature ``(hp, wp, C_F)`` and flattened candidate-elimination scores."""
    stats = patch_stats(crop, cfg.stat_grid)
    emb = embedding(cfg.seed, cfg.c_f, cfg.stat_dim) if cfg.c_f - 1 >= cfg.stat_dim else None
    sim = cosine_to(stats, template.appearance)
    if emb is None:
        # too few channels for a lossless embedding: random projection
        rng = np.random.default_rng([cfg.seed, 104729])
        proj = rng.normal(size=(cfg.c_f - 1, cfg.stat_dim)) / np.sqrt(cfg.stat_dim)
        feat = stats @ proj.T
    else:
        feat = stats @ emb.T
    F = np.concatenate([feat, sim[..., None]], axis=2).astype(np.float32)
    return F, sim.reshape(-1)
