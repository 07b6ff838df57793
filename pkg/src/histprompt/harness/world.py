"""Deterministic synthetic tracking sequences.

The scene is a static field of randomly coloured 16-pixel cells. The target
is a 4x4 grid of cells whose colours are a fixed linear image of an
appearance vector ``a_t`` (unit norm, dimension ``appearance_dim``) plus a
uniform ``contrast`` offset. Appearance drift is a random walk of ``a_t`` on
the unit sphere, so the target's look changes while its brightness offset
stays put. Occlusion replaces the left part of the target with scene pixels.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import GeometryError
from ..geometry import BoundingBox
from .config import WorldConfig

TARGET_CELLS = 4
SCENE_CELL = 16


class SyntheticWorld:
    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 7919])
        self._scene_rng_seed = int(rng.integers(2**63))
        self.background = self._render_background(rng)

        d = cfg.appearance_dim
        basis = rng.normal(0.0, 1.0, (TARGET_CELLS * TARGET_CELLS, 3, d))
        # zero mean over cells so region brightness equals the contrast offset
        self.colour_basis = basis - basis.mean(axis=0, keepdims=True)

        n = cfg.frames
        a = np.empty((n, d))
        a[0] = rng.normal(size=d)
        a[0] /= np.linalg.norm(a[0])
        for t in range(1, n):
            step = a[t - 1] + cfg.drift * rng.normal(size=d) / math.sqrt(d)
            a[t] = step / np.linalg.norm(step)
        self.appearance = a

        self.sizes = np.array([
            cfg.target_size * (1.0 + cfg.scale_amp * math.sin(2 * math.pi * t / 100.0))
            for t in range(n)
        ])
        self.centers = self._path(rng)

    # -- script --------------------------------------------------------------

    def _render_background(self, rng) -> np.ndarray:
        cfg = self.cfg
        gh = -(-cfg.height // SCENE_CELL)
        gw = -(-cfg.width // SCENE_CELL)
        cells = rng.normal(0.0, cfg.clutter, (gh, gw, 3))
        field = np.repeat(np.repeat(cells, SCENE_CELL, 0), SCENE_CELL, 1)[: cfg.height, : cfg.width]
        field = field + rng.normal(0.0, cfg.texture_noise, field.shape)
        return field.astype(np.float32)

    def _path(self, rng) -> np.ndarray:
        cfg = self.cfg
        margin_x = cfg.target_size * max(1.0, cfg.aspect) + 8
        margin_y = cfg.target_size * max(1.0, 1.0 / cfg.aspect) + 8
        lo = np.array([margin_x, margin_y])
        hi = np.array([cfg.width - margin_x, cfg.height - margin_y])
        if np.any(hi <= lo):
            raise GeometryError("frame too small for the target and its margin")
        pos = np.array([cfg.width / 2.0, cfg.height / 2.0])
        vel = np.zeros(2)
        out = np.empty((cfg.frames, 2))
        for t in range(cfg.frames):
            out[t] = pos
            vel = 0.9 * vel + rng.normal(0.0, 0.45 * cfg.speed, 2)
            speed = np.linalg.norm(vel)
            if speed > 2 * cfg.speed > 0:
                vel *= 2 * cfg.speed / speed
            pos = pos + vel
            for i in range(2):
                if pos[i] < lo[i]:
                    pos[i], vel[i] = 2 * lo[i] - pos[i], abs(vel[i])
                elif pos[i] > hi[i]:
                    pos[i], vel[i] = 2 * hi[i] - pos[i], -abs(vel[i])
        return out

    # -- queries -------------------------------------------------------------

    @property
    def frames(self) -> int:
        return self.cfg.frames

    @property
    def dims(self) -> tuple[int, int]:
        return self.cfg.height, self.cfg.width

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.cfg.frames:
            raise IndexError(f"frame {t} outside 1..{self.cfg.frames}")
        return t - 1

    def gt_box(self, t: int) -> BoundingBox:
        i = self._check(t)
        s = self.sizes[i]
        w = s * math.sqrt(self.cfg.aspect)
        h = s / math.sqrt(self.cfg.aspect)
        return BoundingBox.from_center(self.centers[i, 0], self.centers[i, 1], w, h)

    def occlusion(self, t: int) -> float:
        self._check(t)
        frac = 0.0
        for start, end, f in self.cfg.occlusions:
            if start <= t <= end:
                frac = max(frac, f)
        return frac

    def cell_colours(self, t: int) -> np.ndarray:
        """(16, 3) target cell colours at frame ``t``."""
        i = self._check(t)
        return self.colour_basis @ self.appearance[i] + self.cfg.contrast

    def render(self, t: int) -> np.ndarray:
        i = self._check(t)
        cfg = self.cfg
        frame = self.background.copy()
        box = self.gt_box(t)
        ys = np.arange(cfg.height) + 0.5
        xs = np.arange(cfg.width) + 0.5
        inside_y = (ys >= box.y) & (ys < box.y + box.h)
        inside_x = (xs >= box.x) & (xs < box.x + box.w)
        occluded_until = box.x + self.occlusion(t) * box.w
        inside_x &= xs >= occluded_until
        if inside_y.any() and inside_x.any():
            ry = np.flatnonzero(inside_y)
            rx = np.flatnonzero(inside_x)
            cy = np.minimum(((ys[ry] - box.y) / box.h * TARGET_CELLS).astype(int), TARGET_CELLS - 1)
            cx = np.minimum(((xs[rx] - box.x) / box.w * TARGET_CELLS).astype(int), TARGET_CELLS - 1)
            colours = self.cell_colours(t).reshape(TARGET_CELLS, TARGET_CELLS, 3)
            frame[np.ix_(ry, rx)] = colours[cy[:, None], cx[None, :]]
        if cfg.sensor_noise > 0:
            noise_rng = np.random.default_rng([self._scene_rng_seed, i])
            frame += np.float32(cfg.sensor_noise) * noise_rng.standard_normal(frame.shape, dtype=np.float32)
        return frame.astype(np.float32)


def synth_render(world: SyntheticWorld, t: int) -> np.ndarray:
    return world.render(t)
