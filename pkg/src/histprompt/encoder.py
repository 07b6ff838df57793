"""Prompt encoder: (search image, refined mask, search feature) -> prompt value.

Pipeline::

    [image | mask] --phi--> K          (stride 16, C_K channels)
    [K | F] --rb1--> F1                (C_P channels)
    F1 --cbam--> F2
    F1 + F2 --rb2--> P                 (C_P channels)

and a 1x1 key projection that turns F into both the stored prompt key and the
readout query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .geometry import PATCH, upsample_mask_to_pixels
from .nn import (
    ConvSpec,
    MlpSpec,
    as_feature_map,
    channel_pool,
    conv2d,
    mlp_forward,
    relu,
    residual_block,
    sigmoid,
    spatial_pool,
)


@dataclass(frozen=True)
class ChannelConfig:
    c_f: int = 768
    c_k: int = 256
    c_p: int = 384
    c_pk: int = 64

    def __post_init__(self):
        if min(self.c_f, self.c_k, self.c_p, self.c_pk) < 1:
            raise ConfigError(f"channel counts must be positive: {self}")


@dataclass
class EncoderWeights:
    phi: list[ConvSpec]
    rb1: tuple[ConvSpec, ConvSpec]
    cbam_mlp: MlpSpec
    cbam_conv: ConvSpec
    rb2: tuple[ConvSpec, ConvSpec]
    conv_key: ConvSpec
    block_norm: bool = False
    activation: str = "relu"

    def named_layers(self):
        for i, spec in enumerate(self.phi):
            yield f"phi.{i}", spec
        yield "rb1.0", self.rb1[0]
        yield "rb1.1", self.rb1[1]
        yield "cbam.mlp", self.cbam_mlp
        yield "cbam.conv", self.cbam_conv
        yield "rb2.0", self.rb2[0]
        yield "rb2.1", self.rb2[1]
        yield "conv_key", self.conv_key

    def validate(self, ch: ChannelConfig) -> None:
        factor = int(np.prod([s.stride for s in self.phi]))
        if factor != PATCH:
            raise ConfigError(f"phi downsamples by {factor}, expected {PATCH}")
        if self.phi[0].in_channels != 4:
            raise ConfigError("phi takes a 4-channel image (RGB + mask)")
        if self.phi[-1].out_channels != ch.c_k:
            raise ConfigError("phi must output C_K channels")
        for a, b in zip(self.phi, self.phi[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError("phi layers are not chained consistently")
        if self.rb1[0].in_channels != ch.c_k + ch.c_f or self.rb1[1].out_channels != ch.c_p:
            raise ConfigError("rb1 must map C_K + C_F channels to C_P")
        if self.rb2[0].in_channels != ch.c_p or self.rb2[1].out_channels != ch.c_p:
            raise ConfigError("rb2 must preserve C_P channels")
        if not (self.cbam_mlp.in_dim == self.cbam_mlp.out_dim == ch.c_p):
            raise ConfigError("CBAM channel MLP must map C_P to C_P")
        if self.cbam_conv.in_channels != 2 or self.cbam_conv.out_channels != 1:
            raise ConfigError("CBAM spatial conv maps 2 pooled channels to 1")
        if (self.conv_key.kernel != 1 or self.conv_key.in_channels != ch.c_f
                or self.conv_key.out_channels != ch.c_pk):
            raise ConfigError("conv_key must be a 1x1 C_F -> C_Pk conv")

    @classmethod
    def random(cls, ch: ChannelConfig, rng: np.random.Generator, *, single_conv_phi: bool = False,
               mlp_reduction: int = 16, block_norm: bool = False) -> "EncoderWeights":
        return cls(
            phi=default_phi(ch, rng, single_conv=single_conv_phi),
            rb1=(ConvSpec.random(ch.c_k + ch.c_f, ch.c_p, 3, rng),
                 ConvSpec.random(ch.c_p, ch.c_p, 3, rng, residual=True, gain=0.5)),
            cbam_mlp=MlpSpec.random(ch.c_p, max(1, ch.c_p // mlp_reduction), ch.c_p, rng),
            cbam_conv=ConvSpec.random(2, 1, 7, rng, padding=3, gain=1.0),
            rb2=(ConvSpec.random(ch.c_p, ch.c_p, 3, rng, residual=True, gain=0.5),
                 ConvSpec.random(ch.c_p, ch.c_p, 3, rng, residual=True, gain=0.5)),
            conv_key=ConvSpec.random(ch.c_f, ch.c_pk, 1, rng, gain=1.0),
            block_norm=block_norm,
        )


PHI_WIDTHS = (16, 32, 64)


def default_phi(ch: ChannelConfig, rng: np.random.Generator | None = None, *,
                single_conv: bool = False) -> list[ConvSpec]:
    """Four stride-2 3x3 stages (4 -> 16 -> 32 -> 64 -> C_K), or one stride-16 conv.

    The single conv uses a 17x17 kernel with padding 8 so that an input side
    divisible by 16 maps to exactly side / 16.
    """
    if single_conv:
        if rng is None:
            return [ConvSpec.zeros(4, ch.c_k, 17, stride=16, padding=8)]
        return [ConvSpec.random(4, ch.c_k, 17, rng, stride=16, padding=8)]
    widths = (4, *PHI_WIDTHS, ch.c_k)
    layers = []
    for cin, cout in zip(widths, widths[1:]):
        if rng is None:
            layers.append(ConvSpec.zeros(cin, cout, 3, stride=2, padding=1))
        else:
            layers.append(ConvSpec.random(cin, cout, 3, rng, stride=2, padding=1))
    return layers


def phi_encode(image4: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    x = as_feature_map(image4, 4, "encoder image")
    h, w, _ = x.shape
    if h % PATCH or w % PATCH:
        raise DimensionError(f"encoder input {h}x{w} is not divisible by {PATCH}")
    for spec in weights.phi:
        x = relu(conv2d(x, spec))
    return x


def cbam_gates(x: np.ndarray, weights: EncoderWeights, *, channel_attn: bool = True,
               spatial_attn: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Channel gate (C,) and spatial gate (H, W, 1), both float64 in (0, 1).

    A disabled branch returns a gate of ones.
    """
    h, w, c = x.shape
    if channel_attn:
        w_c = (mlp_forward(spatial_pool(x, "max"), weights.cbam_mlp).astype(np.float64)
               + mlp_forward(spatial_pool(x, "avg"), weights.cbam_mlp))
        g_c = sigmoid(w_c)
    else:
        g_c = np.ones(c)
    if spatial_attn:
        pooled = np.concatenate([channel_pool(x, "max"), channel_pool(x, "avg")], axis=2)
        g_s = sigmoid(conv2d(pooled, weights.cbam_conv).astype(np.float64))
    else:
        g_s = np.ones((h, w, 1))
    return g_c, g_s


def cbam(x: np.ndarray, weights: EncoderWeights, *, channel_attn: bool = True,
         spatial_attn: bool = True) -> np.ndarray:
    x = as_feature_map(x, weights.cbam_mlp.in_dim, "cbam input")
    g_c, g_s = cbam_gates(x, weights, channel_attn=channel_attn, spatial_attn=spatial_attn)
    return ((g_c[None, None, :] * x) * g_s).astype(np.float32)


def compress_key(F: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    F = as_feature_map(F, weights.conv_key.in_channels, "search feature")
    return conv2d(F, weights.conv_key)


def encode_prompt_value(search_image: np.ndarray, refined_mask: np.ndarray, F: np.ndarray,
                        weights: EncoderWeights, *, use_mask: bool = True,
                        use_feature: bool = True, channel_attn: bool = True,
                        spatial_attn: bool = True) -> np.ndarray:
    """Encode one frame's refined mask and features into a prompt value map."""
    image = as_feature_map(search_image, 3, "search image")
    F = as_feature_map(F, weights.rb1[0].in_channels - weights.phi[-1].out_channels, "search feature")
    refined_mask = np.asarray(refined_mask, dtype=bool)
    h, w, _ = image.shape
    if refined_mask.shape != F.shape[:2] or (h // PATCH, w // PATCH) != F.shape[:2]:
        raise DimensionError(
            f"mask {refined_mask.shape}, feature {F.shape[:2]} and image {(h, w)} disagree"
        )
    mask_px = upsample_mask_to_pixels(refined_mask)
    if not use_mask:
        mask_px = np.zeros_like(mask_px)
    if not use_feature:
        F = np.zeros_like(F)
    K = phi_encode(np.concatenate([image, mask_px], axis=2), weights)
    f1 = residual_block(np.concatenate([K, F], axis=2), *weights.rb1,
                        activation=weights.activation, norm=weights.block_norm)
    f2 = cbam(f1, weights, channel_attn=channel_attn, spatial_attn=spatial_attn)
    fused = (f1.astype(np.float64) + f2).astype(np.float32)
    return residual_block(fused, *weights.rb2, activation=weights.activation, norm=weights.block_norm)
