"""Weight sets: seeded random, hand-built "analytic", and the HIPW snapshot format.

Analytic construction
---------------------
The analytic weights turn the network into a training-free, mask-gated
correlation tracker on top of the surrogate backbone:

* ``phi`` carries the mask channel down to the patch grid by centre-tap
  sampling, so ``K[..., 0]`` is the refined mask bit of each patch. The
  single-conv variant averages its 17x17 receptive field instead, which
  blurs the mask across neighbouring patches.
* ``rb1`` writes the prompt value channels: 0 is the mask bit, 1 is the
  template-similarity channel of ``F`` gated by the mask, and the rest are
  mask-gated positive/negative parts of the patch statistics. Gating uses a
  rectifier with a large negative bias that the mask bit cancels.
* CBAM weights are zero, so both gates are 0.5; ``rb2`` divides by the
  resulting ``1 + 0.25`` (or the ablated equivalent) so ``P == F1``.
* ``conv_key`` recovers the patch statistics from ``F`` and scales them by
  ``key_scale``, which sets the readout temperature.
* The head reduces the prompt to ``fg = O[0] + 0.5 * O[1]`` (foreground mass
  retrieved from memory), sums it over a 4x4 window straddling each cell and
  its lower-right neighbours, and predicts the centre on the shared cell
  corner (offset 0.5) with a box as large as the previous one
  (size ``1 / search_factor``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..encoder import EncoderWeights, default_phi
from ..errors import SnapshotError
from ..head import HeadWeights
from ..nn import ConvSpec, MlpSpec
from .backbone import embedding
from .config import TrackerConfig

GATE_BIAS = 50.0
SIM_WEIGHT = 0.5
CLS_GAIN = 8.0
OFFSET_GAIN = 4.0 / 23.0  # 4 / expected fg mass (a 4.8-cell square)
MOMENT_RADIUS = 4


@dataclass
class ModelWeights:
    encoder: EncoderWeights
    head: HeadWeights

    def named_layers(self):
        yield from self.encoder.named_layers()
        yield from self.head.named_layers()

    @property
    def n_params(self) -> int:
        return sum(spec.n_params for _, spec in self.named_layers())


def build_weights(cfg: TrackerConfig) -> ModelWeights:
    if cfg.weights == "analytic":
        return analytic_weights(cfg)
    rng = np.random.default_rng([cfg.seed, 31337])
    enc = EncoderWeights.random(cfg.channels, rng, single_conv_phi=cfg.phi_single_conv,
                                block_norm=cfg.block_norm)
    head = HeadWeights.random(cfg.c_f, cfg.c_p, cfg.c_h, rng)
    weights = ModelWeights(enc, head)
    _validate(weights, cfg)
    return weights


def _validate(weights: ModelWeights, cfg: TrackerConfig) -> None:
    weights.encoder.validate(cfg.channels)
    weights.head.validate(cfg.c_f, cfg.c_p)


def analytic_weights(cfg: TrackerConfig) -> ModelWeights:
    ch = cfg.channels
    m = cfg.stat_dim
    emb = np.asarray(embedding(cfg.seed, cfg.c_f, m))  # (C_F - 1, m)
    sim_channel = cfg.c_f - 1

    # phi: mask bit to K[..., 0]
    phi = default_phi(ch, None, single_conv=cfg.phi_single_conv)
    if cfg.phi_single_conv:
        phi[0].weights[0, 3] = 1.0 / phi[0].kernel ** 2
    else:
        phi[0].weights[0, 3, 1, 1] = 1.0
        for spec in phi[1:]:
            spec.weights[0, 0, 1, 1] = 1.0

    # rb1: prompt value channels
    c_in = ch.c_k + ch.c_f
    w1 = np.zeros((ch.c_p, c_in, 3, 3), np.float32)
    b1 = np.zeros(ch.c_p, np.float32)
    w1[0, 0, 1, 1] = 1.0
    w1[1, 0, 1, 1] = GATE_BIAS
    w1[1, ch.c_k + sim_channel, 1, 1] = 1.0
    b1[1] = -GATE_BIAS
    n_app = min(m, (ch.c_p - 2) // 2)
    for i in range(n_app):
        for sign, row in ((1.0, 2 + 2 * i), (-1.0, 3 + 2 * i)):
            w1[row, ch.c_k: ch.c_k + ch.c_f - 1, 1, 1] = sign * emb[:, i]
            w1[row, 0, 1, 1] = GATE_BIAS
            b1[row] = -GATE_BIAS
    rb1 = (ConvSpec(c_in, ch.c_p, 3, 1, 1, w1, b1),
           ConvSpec.zeros(ch.c_p, ch.c_p, 3, residual=True))

    hidden = max(1, ch.c_p // 16)
    cbam_mlp = MlpSpec(ch.c_p, hidden, ch.c_p)
    cbam_conv = ConvSpec.zeros(2, 1, 7, padding=3)

    gate = (0.5 if cfg.channel_attn else 1.0) * (0.5 if cfg.spatial_attn else 1.0)
    w2 = np.zeros((ch.c_p, ch.c_p, 3, 3), np.float32)
    idx = np.arange(ch.c_p)
    w2[idx, idx, 1, 1] = 1.0 / (1.0 + gate) - 1.0
    rb2 = (ConvSpec(ch.c_p, ch.c_p, 3, 1, 1, w2, None, residual=True),
           ConvSpec.zeros(ch.c_p, ch.c_p, 3, residual=True))

    wk = np.zeros((ch.c_pk, ch.c_f, 1, 1), np.float32)
    wk[:m, : ch.c_f - 1, 0, 0] = cfg.key_scale * emb.T
    conv_key = ConvSpec(ch.c_f, ch.c_pk, 1, 1, 0, wk, None)

    encoder = EncoderWeights(phi, rb1, cbam_mlp, cbam_conv, rb2, conv_key, block_norm=cfg.block_norm)

    # head
    rng = np.random.default_rng([cfg.seed, 271828])
    compress_f = ConvSpec.random(ch.c_f, ch.c_p, 1, rng, gain=1.0)
    reduce_w = np.zeros((cfg.c_h, 2 * ch.c_p, 1, 1), np.float32)
    reduce_w[0, ch.c_p + 0, 0, 0] = 1.0
    reduce_w[0, ch.c_p + 1, 0, 0] = SIM_WEIGHT
    reduce = ConvSpec(2 * ch.c_p, cfg.c_h, 1, 1, 0, reduce_w, None)
    reduce_skip = ConvSpec.zeros(2 * ch.c_p, cfg.c_h, 1)

    c_a = np.zeros((cfg.c_h, cfg.c_h, 3, 3), np.float32)
    c_a[0, 0, 1:, 1:] = 1.0  # taps at offsets {0, +1}
    c_b = np.zeros((cfg.c_h, cfg.c_h, 3, 3), np.float32)
    c_b[0, 0] = 1.0  # taps at {-1, 0, +1}: window {-1..+2} overall
    window = 36.0
    c_out = np.zeros((1, cfg.c_h, 1, 1), np.float32)
    c_out[0, 0] = CLS_GAIN / window
    cls = [ConvSpec(cfg.c_h, cfg.c_h, 3, 1, 1, c_a, None),
           ConvSpec(cfg.c_h, cfg.c_h, 3, 1, 1, c_b, None),
           ConvSpec(cfg.c_h, 1, 1, 1, 0, c_out, np.array([-CLS_GAIN / 2], np.float32))]
    offset = _offset_branch(cfg.c_h)
    size_logit = float(np.log(1.0 / (cfg.search_factor - 1.0))) if cfg.search_factor > 1 else 20.0
    size = [ConvSpec.zeros(cfg.c_h, cfg.c_h, 3), ConvSpec.zeros(cfg.c_h, cfg.c_h, 3),
            ConvSpec(cfg.c_h, 2, 1, 1, 0, None, np.full(2, size_logit, np.float32))]
    head = HeadWeights(compress_f, reduce, reduce_skip, cls, offset, size)
    weights = ModelWeights(encoder, head)
    _validate(weights, cfg)
    return weights


def _offset_branch(c_h: int) -> list[ConvSpec]:
    """Sub-cell offset from the fg centroid around the predicted cell corner.

    Layer one accumulates the fg first moment on each side of the corner
    (cells -3..+4 around cell j along one axis, all rows -3..+4 of the other),
    layer two splits the difference into rectified parts and layer three turns
    it into a logit. Dividing by the expected target mass stands in for the
    centroid normalisation a conv stack cannot do.
    """
    if c_h < 4:
        return [ConvSpec.zeros(c_h, c_h, 9), ConvSpec.zeros(c_h, c_h, 3), ConvSpec.zeros(c_h, 2, 1)]
    r = MOMENT_RADIUS
    k = 2 * r + 1
    pos = np.arange(-r, r + 1) - 0.5  # cell centre relative to the corner
    span = np.abs(pos) <= r - 0.5 + 1e-9  # rows -3..+4 around the corner
    span[0] = False
    w1 = np.zeros((c_h, c_h, k, k), np.float32)
    right = np.where(pos > 0, pos, 0.0) * span
    left = np.where(pos < 0, -pos, 0.0) * span
    w1[0, 0] = np.outer(span, right)
    w1[1, 0] = np.outer(span, left)
    w1[2, 0] = np.outer(right, span)
    w1[3, 0] = np.outer(left, span)
    w2 = np.zeros((c_h, c_h, 3, 3), np.float32)
    for axis in range(2):
        hi, lo = 2 * axis, 2 * axis + 1
        w2[hi, hi, 1, 1] = w2[lo, lo, 1, 1] = 1.0
        w2[hi, lo, 1, 1] = w2[lo, hi, 1, 1] = -1.0
    w3 = np.zeros((2, c_h, 1, 1), np.float32)
    w3[0, 0] = w3[1, 2] = OFFSET_GAIN
    w3[0, 1] = w3[1, 3] = -OFFSET_GAIN
    return [ConvSpec(c_h, c_h, k, 1, r, w1, None), ConvSpec(c_h, c_h, 3, 1, 1, w2, None),
            ConvSpec(c_h, 2, 1, 1, 0, w3, None)]


# ---------------------------------------------------------------------------
# HIPW snapshot: b"HIPW" | version u32 | count u32 | per tensor:
#   name_len u16 | name utf-8 | ndim u32 | dims u32[ndim] | f32[prod(dims)]

WEIGHTS_MAGIC = b"HIPW"
WEIGHTS_VERSION = 1


def _tensors(weights: ModelWeights):
    for name, spec in weights.named_layers():
        if isinstance(spec, MlpSpec):
            for part in ("w1", "b1", "w2", "b2"):
                yield f"{name}.{part}", spec, part
        else:
            yield f"{name}.weight", spec, "weights"
            yield f"{name}.bias", spec, "bias"


def save_weights(weights: ModelWeights, path) -> None:
    items = list(_tensors(weights))
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(items)))
        for name, spec, attr in items:
            arr = np.asarray(getattr(spec, attr), dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path, like: ModelWeights) -> ModelWeights:
    """Fill the structure of ``like`` (same layer layout) from a HIPW file, in place."""
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise SnapshotError("bad weights magic")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != WEIGHTS_VERSION:
            raise SnapshotError(f"unsupported weights version {version}")
        off = 12
        found = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off: off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, "<f4", size, off).reshape(dims)
            off += 4 * size
            found[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise SnapshotError("truncated weights file") from exc
    if off != len(data):
        raise SnapshotError("trailing bytes in weights file")
    for name, spec, attr in _tensors(like):
        if name not in found:
            raise SnapshotError(f"weights file lacks {name}")
        current = getattr(spec, attr)
        if found[name].shape != current.shape:
            raise SnapshotError(f"{name}: shape {found[name].shape} != {current.shape}")
        setattr(spec, attr, found[name])
    return like
