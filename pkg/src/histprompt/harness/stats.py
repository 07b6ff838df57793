"""Parameter and multiply-accumulate counts for the prompt network and head.

The frozen backbone is outside the count. One "forward" is a value encoding,
a key compression, the head, and a readout against a full memory bank of
``memory_size`` frames.
"""
from __future__ import annotations

import numpy as np

from ..encoder import compress_key, encode_prompt_value
from ..head import head_forward
from ..memory import MemoryBank, readout
from ..nn import ConvSpec, MlpSpec, count_macs
from .config import TrackerConfig
from .weights import ModelWeights, build_weights


def conv_params(spec: ConvSpec) -> int:
    return spec.out_channels * spec.in_channels * spec.kernel ** 2 + spec.out_channels


def mlp_params(spec: MlpSpec) -> int:
    return (spec.hidden_dim * (spec.in_dim + 1)) + spec.out_dim * (spec.hidden_dim + 1)


def conv_macs(spec: ConvSpec, h: int, w: int) -> tuple[int, tuple[int, int]]:
    ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
    wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
    return ho * wo * spec.out_channels * spec.in_channels * spec.kernel ** 2, (ho, wo)


def model_stats(cfg: TrackerConfig, weights: ModelWeights | None = None) -> dict:
    weights = weights if weights is not None else build_weights(cfg)
    enc, head = weights.encoder, weights.head
    params = {"encoder": 0, "head": 0}
    for name, spec in weights.named_layers():
        part = "head" if name.startswith("head.") else "encoder"
        params[part] += mlp_params(spec) if isinstance(spec, MlpSpec) else conv_params(spec)

    macs = {"encoder": 0, "key": 0, "head": 0, "readout": 0}
    h = w = cfg.search_size
    for spec in enc.phi:
        n, (h, w) = conv_macs(spec, h, w)
        macs["encoder"] += n
    hp, wp = cfg.grid
    for spec in (*enc.rb1, *enc.rb2):
        macs["encoder"] += conv_macs(spec, hp, wp)[0]
    if cfg.channel_attn:  # shared MLP on the max- and mean-pooled vectors
        m = enc.cbam_mlp
        macs["encoder"] += 2 * (m.in_dim * m.hidden_dim + m.hidden_dim * m.out_dim)
    if cfg.spatial_attn:
        macs["encoder"] += conv_macs(enc.cbam_conv, hp, wp)[0]
    macs["key"] = conv_macs(enc.conv_key, hp, wp)[0]

    for spec in (head.compress_f, head.reduce, head.reduce_skip):
        macs["head"] += conv_macs(spec, hp, wp)[0]
    for branch in (head.cls, head.offset, head.size):
        h2, w2 = hp, wp
        for spec in branch:
            n, (h2, w2) = conv_macs(spec, h2, w2)
            macs["head"] += n
    tokens = hp * wp
    bank_tokens = cfg.memory_size * tokens
    macs["readout"] = bank_tokens * tokens * (cfg.c_pk + cfg.c_p)
    return {
        "params": sum(params.values()),
        "params_by_part": params,
        "macs": sum(macs.values()),
        "macs_by_part": macs,
        "bank_tokens": bank_tokens,
    }


def instrumented_macs(cfg: TrackerConfig, weights: ModelWeights | None = None, seed: int = 0) -> dict:
    """Run one forward on random inputs under the kernel-level MAC counter."""
    weights = weights if weights is not None else build_weights(cfg)
    rng = np.random.default_rng(seed)
    hp, wp = cfg.grid
    image = rng.normal(size=(cfg.search_size, cfg.search_size, 3)).astype(np.float32)
    F = rng.normal(size=(hp, wp, cfg.c_f)).astype(np.float32)
    mask = rng.random((hp, wp)) < 0.3
    bank = MemoryBank(cfg.c_pk, cfg.c_p, cfg.memory_size)
    for frame in range(1, cfg.memory_size + 1):
        bank.insert_frame(rng.normal(size=(hp, wp, cfg.c_pk)), rng.normal(size=(hp, wp, cfg.c_p)), frame)
    parts = {}
    with count_macs() as c:
        encode_prompt_value(image, mask, F, weights.encoder, use_mask=cfg.use_mask,
                            use_feature=cfg.use_feature, channel_attn=cfg.channel_attn,
                            spatial_attn=cfg.spatial_attn)
    parts["encoder"] = c.total
    with count_macs() as c:
        Q = compress_key(F, weights.encoder)
    parts["key"] = c.total
    with count_macs() as c:
        prompt = readout(bank, Q, cfg.readout)
    parts["readout"] = c.total
    with count_macs() as c:
        head_forward(F, prompt, weights.head)
    parts["head"] = c.total
    return {"macs": sum(parts.values()), "macs_by_part": parts}
