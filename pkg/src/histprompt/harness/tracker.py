"""Per-frame tracking loop: crop, surrogate backbone, memory readout, head, memory update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoder import compress_key, encode_prompt_value
from ..errors import GeometryError, MemoryEmptyError
from ..geometry import (PATCH, BoundingBox, CropWindow, ce_keep_indices, ce_mask, crop_image,
                        make_crop_window, map_box, rasterize_box_mask, refine_mask)
from ..head import ScoreMaps, decode_box, head_forward
from ..memory import MemoryBank, readout, update_due
from .backbone import TemplateDescriptor, extract_template, surrogate_backbone
from .config import TrackerConfig
from .metrics import Metrics, center_error
from .weights import ModelWeights, build_weights
from .world import SyntheticWorld


@dataclass
class TrackerState:
    template: TemplateDescriptor
    memory: MemoryBank
    last_box: BoundingBox
    frame_idx: int
    frame_dims: tuple[int, int]
    rng: np.random.Generator


@dataclass
class Observation:
    window: CropWindow
    crop: np.ndarray
    F: np.ndarray  # CE-dropped positions zero-filled
    Q: np.ndarray
    ce: np.ndarray  # (hp, wp) bool


@dataclass
class FrameResult:
    frame: int
    box: BoundingBox
    conf: float
    updated: bool
    maps: ScoreMaps
    refined_mask: np.ndarray | None = None


class Tracker:
    def __init__(self, cfg: TrackerConfig, weights: ModelWeights | None = None):
        self.cfg = cfg
        self.weights = weights if weights is not None else build_weights(cfg)

    # -- building blocks -----------------------------------------------------

    def observe(self, frame: np.ndarray, around: BoundingBox, template: TemplateDescriptor) -> Observation:
        cfg = self.cfg
        window = make_crop_window(around, cfg.search_factor, frame.shape[:2], cfg.search_size)
        crop = crop_image(frame, window)
        F, scores = surrogate_backbone(crop, template, cfg)
        grid = cfg.grid
        if cfg.use_ce:
            ce = ce_mask(ce_keep_indices(scores, cfg.keep_ratio), grid)
            F = F * ce[:, :, None].astype(np.float32)
        else:
            ce = np.ones(grid, dtype=bool)
        Q = compress_key(F, self.weights.encoder)
        return Observation(window, crop, F, Q, ce)

    def refined_mask(self, obs: Observation, box: BoundingBox) -> np.ndarray:
        box_mask = rasterize_box_mask(map_box(box, "image", "crop", obs.window), self.cfg.grid)
        return refine_mask(box_mask, obs.ce) if self.cfg.use_ce else box_mask

    def remember(self, state: TrackerState, obs: Observation, mask: np.ndarray, frame_id: int) -> None:
        cfg = self.cfg
        value = encode_prompt_value(
            obs.crop, mask, obs.F, self.weights.encoder,
            use_mask=cfg.use_mask, use_feature=cfg.use_feature,
            channel_attn=cfg.channel_attn, spatial_attn=cfg.spatial_attn,
        )
        state.memory.insert_frame(obs.Q, value, frame_id, None if cfg.include_background else mask)

    def prompt(self, state: TrackerState, Q: np.ndarray) -> np.ndarray:
        try:
            return readout(state.memory, Q, self.cfg.readout)
        except MemoryEmptyError:
            # only reachable when background is excluded and no target token survived
            return np.zeros((*Q.shape[:2], self.cfg.c_p), np.float32)

    # -- protocol ------------------------------------------------------------

    def init(self, frame: np.ndarray, gt_box: BoundingBox) -> TrackerState:
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float32)
        h, w = frame.shape[:2]
        if not gt_box.is_valid() or gt_box.space != "image":
            raise GeometryError(f"invalid initial box {gt_box}")
        if gt_box.x >= w or gt_box.y >= h or gt_box.x + gt_box.w <= 0 or gt_box.y + gt_box.h <= 0:
            raise GeometryError("initial box lies outside the frame")
        template = extract_template(frame, gt_box, cfg)
        state = TrackerState(template, MemoryBank(cfg.c_pk, cfg.c_p, cfg.memory_size, cfg.protected_prefix),
                             gt_box.clip(h, w), 1, (h, w), np.random.default_rng(cfg.seed))
        obs = self.observe(frame, gt_box, template)
        self.remember(state, obs, self.refined_mask(obs, gt_box), 1)
        return state

    def track(self, state: TrackerState, frame: np.ndarray, gt_box: BoundingBox | None = None) -> FrameResult:
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float32)
        t = state.frame_idx + 1
        if cfg.crop_from_gt:
            if gt_box is None:
                raise GeometryError("crop_from_gt needs the ground-truth box of every frame")
            around = gt_box
        else:
            around = state.last_box
        obs = self.observe(frame, around, state.template)
        prompt = self.prompt(state, obs.Q)
        maps = head_forward(obs.F, prompt, self.weights.head)
        box, conf = decode_box(maps, obs.window)
        h, w = state.frame_dims
        box = box.clip(h, w)

        updated = False
        mask = None
        if cfg.update_memory and update_due(t, cfg.update_interval, cfg.warmup_len, cfg.warmup_stride):
            mask = self.refined_mask(obs, box)
            self.remember(state, obs, mask, t)
            updated = True
        n = cfg.template_update_interval
        if n and gt_box is not None and t % n == 0:
            state.template = extract_template(frame, gt_box, cfg)
        state.last_box = box
        state.frame_idx = t
        return FrameResult(t, box, conf, updated, maps, mask)


def init_tracker(first_frame, gt_box, cfg: TrackerConfig, weights=None) -> tuple[Tracker, TrackerState]:
    tracker = Tracker(cfg, weights)
    return tracker, tracker.init(first_frame, gt_box)


def track_frame(tracker: Tracker, state: TrackerState, frame, gt_box=None) -> BoundingBox:
    return tracker.track(state, frame, gt_box).box


# ---------------------------------------------------------------------------
# whole sequences

CSV_COLUMNS = ("frame", "iou", "center_err_px", "conf", "mem_frames", "updated")


@dataclass
class SequenceResult:
    metrics: Metrics
    rows: list[dict] = field(default_factory=list)
    state: TrackerState | None = None
    masks: dict[int, np.ndarray] = field(default_factory=dict)


def run_sequence(world: SyntheticWorld, cfg: TrackerConfig, weights: ModelWeights | None = None,
                 *, keep_masks: bool = False) -> SequenceResult:
    """Track frames 2..F after initialising on frame 1; metrics cover the tracked frames."""
    if world.cfg.frames < 2:
        raise GeometryError("a sequence needs at least two frames")
    tracker = Tracker(cfg, weights)
    state = tracker.init(world.render(1), world.gt_box(1))
    metrics = Metrics()
    result = SequenceResult(metrics, state=state)
    for t in range(2, world.frames + 1):
        gt = world.gt_box(t)
        out = tracker.track(state, world.render(t), gt)
        value = metrics.add(out.box, gt)
        result.rows.append({
            "frame": t,
            "iou": value,
            "center_err_px": center_error(out.box, gt),
            "conf": out.conf,
            "mem_frames": len(state.memory.frames),
            "updated": int(out.updated),
        })
        if keep_masks and out.refined_mask is not None:
            result.masks[t] = out.refined_mask
    return result
