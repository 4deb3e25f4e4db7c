"""Two-stream hierarchical Transformer with gated cross-modal fusion.

Tokens travel as ``[B, N, C]`` with ``N = H_i * W_i`` in row-major grid
order; unbatched ``[C, H, W]`` inputs are accepted everywhere the public
functions take images and get a leading batch axis of 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..core import (
    DimensionError,
    Tensor,
    as_tensor,
    clip,
    concat,
    gather_class,
    gelu,
    log,
    resize_bilinear,
    sigmoid,
    softmax,
)
from .config import PATCH_KERNELS, PATCH_PADDINGS, PATCH_STRIDES, ModelConfig
from .layers import Conv2d, LayerNorm, Linear, Module

PROB_CLAMP = 1e-7


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot form a {h}x{w} grid")
    return x.transpose(0, 2, 1).reshape(b, c, h, w)


def grid_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == rank - 1:
        return x.reshape(1, *x.shape), True
    return x, False


def attention_scale(head_dim: int) -> float:
    """Logit scale of scaled dot-product attention."""
    return 1.0 / math.sqrt(head_dim)


# -- building blocks -----------------------------------------------------------

class PatchEmbed(Module):
    """Overlapping strided convolution followed by layer norm."""

    def __init__(self, c_in: int, dim: int, stage: int, rng=None, eps: float = 1e-6):
        i = stage - 1
        self.proj = Conv2d(c_in, dim, PATCH_KERNELS[i], PATCH_STRIDES[i], PATCH_PADDINGS[i], rng=rng)
        self.norm = LayerNorm(dim, eps)


class EfficientSelfAttention(Module):
    def __init__(self, dim: int, heads: int, reduction: int, rng=None, eps: float = 1e-6):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        if reduction > 1:
            self.sr = Conv2d(dim, dim, reduction, reduction, 0, rng=rng)
            self.sr_norm = LayerNorm(dim, eps)
        self._heads = heads
        self._reduction = reduction

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def reduction(self) -> int:
        return self._reduction


class MixFFN(Module):
    def __init__(self, dim: int, hidden: int, rng=None):
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, 1, 1, groups=hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng)


class Block(Module):
    def __init__(self, dim: int, heads: int, reduction: int, mlp_ratio: int, rng=None, eps: float = 1e-6):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = EfficientSelfAttention(dim, heads, reduction, rng, eps)
        self.ffn = MixFFN(dim, dim * mlp_ratio, rng)


class Stage(Module):
    def __init__(self, cfg: ModelConfig, stage: int, rng=None):
        i = stage - 1
        c_in = cfg.in_channels if i == 0 else cfg.stage_dims[i - 1]
        dim = cfg.stage_dims[i]
        eps = cfg.layer_norm_eps
        self.patch_embed = PatchEmbed(c_in, dim, stage, rng, eps)
        self.blocks = [
            Block(dim, cfg.stage_heads[i], cfg.reduction_ratios[i], cfg.mlp_ratio, rng, eps)
            for _ in range(cfg.stage_depths[i])
        ]
        self.norm = LayerNorm(dim, eps)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        self.stages = [Stage(cfg, s, rng) for s in range(1, cfg.encoder_stages + 1)]


class CrossAttentionFuse(Module):
    def __init__(self, dim: int, rng=None):
        self.mlp = Linear(dim, dim, rng)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        k = cfg.encoder_stages
        d = cfg.decoder_dim
        self.linear_c = [Linear(cfg.stage_dims[i], d, rng) for i in range(k)]
        self.fuse = Linear(k * d, d, rng)
        self.classifier = Linear(d, cfg.num_classes, rng)


class OFFNet(Module):
    """RGB and surface-normal encoders, per-stage fusion, all-MLP decoder.

    ``rng=None`` builds zero-filled parameters, which is enough for counting
    or loading a checkpoint.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self._config = config
        self.enc_rgb = Encoder(config, rng)
        self.enc_sn = Encoder(config, rng)
        if config.fusion_enabled:
            self.fuse = [CrossAttentionFuse(config.stage_dims[i], rng) for i in range(config.encoder_stages)]
        self.decoder = Decoder(config, rng)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def __call__(self, image, normals) -> Tensor:
        return forward(self, image, normals)


def build_model(config: ModelConfig, seed: int = 0) -> OFFNet:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x1217,)))
    return OFFNet(config, rng)


def count_parameters(config: ModelConfig) -> int:
    """Exact number of scalar parameters, without initialising any values."""
    return OFFNet(config, rng=None).num_parameters()


# -- forward pieces --------------------------------------------------------------

def patch_embed(x, embed: PatchEmbed) -> tuple[Tensor, int, int]:
    """Strided conv tokenisation; returns tokens ``[B, N, C]`` and the grid size."""
    x, _ = _batched(x, 4)
    conv = embed.proj
    _, _, h, w = x.shape
    stride = conv._stride
    if h % stride or w % stride:
        raise DimensionError(f"input {h}x{w} is not divisible by patch stride {stride}")
    y = conv(x)
    _, _, ho, wo = y.shape
    return embed.norm(grid_to_tokens(y)), ho, wo


def efficient_self_attention(x, attn: EfficientSelfAttention, spatial: tuple[int, int] | None = None) -> Tensor:
    """Multi-head scaled dot-product attention with spatially reduced keys/values.

    Queries come from every token; keys and values from the token grid
    downsampled by a learned stride-``reduction`` convolution.
    """
    x, unbatched = _batched(x, 3)
    b, n, c = x.shape
    heads = attn.heads
    d = c // heads
    r = attn.reduction
    if c % heads:
        raise DimensionError(f"channels {c} not divisible by {heads} heads")

    q = attn.q(x).reshape(b, n, heads, d).transpose(0, 2, 1, 3)
    if r > 1:
        if spatial is None:
            raise DimensionError("spatial reduction needs the (H, W) grid size")
        h, w = spatial
        if h % r or w % r:
            raise DimensionError(f"grid {h}x{w} is not divisible by reduction {r}")
        kv_src = tokens_to_grid(x, h, w)
        kv_src = attn.sr_norm(grid_to_tokens(attn.sr(kv_src)))
    else:
        kv_src = x
    m = kv_src.shape[1]
    k = attn.k(kv_src).reshape(b, m, heads, d).transpose(0, 2, 3, 1)
    v = attn.v(kv_src).reshape(b, m, heads, d).transpose(0, 2, 1, 3)

    weights = softmax((q @ k) * attention_scale(d), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
    out = attn.proj(out)
    return out.reshape(n, c) if unbatched else out


def mix_ffn(x, spatial: tuple[int, int], ffn: MixFFN) -> Tensor:
    """``fc2(GELU(dwconv3x3(fc1(x)))) + x`` on a token grid."""
    x, unbatched = _batched(x, 3)
    h, w = spatial
    if x.shape[1] != h * w:
        raise DimensionError(f"{x.shape[1]} tokens do not match the {h}x{w} grid")
    y = ffn.fc1(x)
    y = grid_to_tokens(ffn.dwconv(tokens_to_grid(y, h, w)))
    y = ffn.fc2(gelu(y)) + x
    return y.reshape(*y.shape[1:]) if unbatched else y


def transformer_block(x: Tensor, spatial: tuple[int, int], block: Block) -> Tensor:
    x = x + efficient_self_attention(block.norm1(x), block.attn, spatial)
    return mix_ffn(x, spatial, block.ffn)


def run_stage(x, stage: Stage) -> tuple[Tensor, int, int]:
    """One stream through patch embedding, its blocks and the closing norm."""
    tokens, h, w = patch_embed(x, stage.patch_embed)
    for block in stage.blocks:
        tokens = transformer_block(tokens, (h, w), block)
    return stage.norm(tokens), h, w


class FusionOutput(NamedTuple):
    img: Tensor
    sn: Tensor
    fused: Tensor
    gate_img: Tensor
    gate_sn: Tensor


def _gate_streams(gate_img: Tensor, gate_sn: Tensor, x_img: Tensor, x_sn: Tensor) -> tuple[Tensor, Tensor]:
    return gate_img * x_img + x_img, gate_sn * x_sn + x_sn


def cross_attention_fuse(x_img, x_sn, fuse: CrossAttentionFuse) -> FusionOutput:
    """Complementary sigmoid gating of the two streams.

    ``a = sigmoid(MLP(x_img + x_sn))``; the image stream is reweighted by
    ``a`` and the normal stream by ``1 - a``, each with a residual.
    """
    x_img, x_sn = as_tensor(x_img), as_tensor(x_sn)
    if x_img.shape != x_sn.shape:
        raise DimensionError(f"fusion inputs differ in shape: {x_img.shape} vs {x_sn.shape}")
    a = sigmoid(fuse.mlp(x_img + x_sn))
    gate_sn = 1.0 - a
    img_out, sn_out = _gate_streams(a, gate_sn, x_img, x_sn)
    return FusionOutput(img_out, sn_out, img_out + sn_out, a, gate_sn)


@dataclass
class StageFeatures:
    rgb: Tensor  # [B, N, C] tokens
    sn: Tensor
    fused: Tensor
    height: int
    width: int

    def grid(self, which: str = "fused") -> Tensor:
        return tokens_to_grid(getattr(self, which), self.height, self.width)


def encoder_stage(rgb, sn, index: int, model: OFFNet) -> StageFeatures:
    """Run stage ``index`` (1-based) of both streams and fuse them.

    With fusion disabled the streams stay independent and ``fused`` is
    their plain sum; otherwise the gated outputs continue to the next stage.
    """
    stage_rgb = model.enc_rgb.stages[index - 1]
    stage_sn = model.enc_sn.stages[index - 1]
    t_rgb, h, w = run_stage(rgb, stage_rgb)
    t_sn, _, _ = run_stage(sn, stage_sn)
    if model.config.fusion_enabled:
        out = cross_attention_fuse(t_rgb, t_sn, model.fuse[index - 1])
        return StageFeatures(out.img, out.sn, out.fused, h, w)
    return StageFeatures(t_rgb, t_sn, t_rgb + t_sn, h, w)


def encode(image, normals, model: OFFNet) -> list[StageFeatures]:
    rgb, _ = _batched(image, 4)
    sn, _ = _batched(normals, 4)
    feats = []
    for index in range(1, model.config.encoder_stages + 1):
        f = encoder_stage(rgb, sn, index, model)
        feats.append(f)
        rgb, sn = f.grid("rgb"), f.grid("sn")
    return feats


def decode(features: list[StageFeatures], model: OFFNet, out_size: tuple[int, int] | None = None) -> Tensor:
    """All-MLP head: project each scale, upsample to 1/4, concatenate, fuse, classify.

    Returns per-pixel class probabilities ``[B, 2, H, W]``.
    """
    dec = model.decoder
    cfg = model.config
    if len(features) != cfg.encoder_stages:
        raise DimensionError(f"decoder expects {cfg.encoder_stages} stages, got {len(features)}")
    h4, w4 = features[0].height, features[0].width
    scaled = []
    for f, lin in zip(features, dec.linear_c):
        y = tokens_to_grid(lin(f.fused), f.height, f.width)
        scaled.append(resize_bilinear(y, h4, w4))
    y = grid_to_tokens(concat(scaled, axis=1))
    y = dec.classifier(dec.fuse(y))
    logits = tokens_to_grid(y, h4, w4)
    out_h, out_w = out_size or (4 * h4, 4 * w4)
    logits = resize_bilinear(logits, out_h, out_w)
    return softmax(logits, axis=1)


def forward(model: OFFNet, image, normals) -> Tensor:
    """Class probabilities ``[B, 2, H, W]`` (``[2, H, W]`` for unbatched input)."""
    image = as_tensor(image)
    unbatched = image.ndim == 3
    h, w = image.shape[-2:]
    cfg = model.config
    if (h, w) != (cfg.input_h, cfg.input_w):
        raise DimensionError(f"input {h}x{w} does not match config {cfg.input_h}x{cfg.input_w}")
    if as_tensor(normals).shape != image.shape:
        raise DimensionError(f"normals {as_tensor(normals).shape} vs image {image.shape}")
    probs = decode(encode(image, normals, model), model, (h, w))
    return probs.reshape(*probs.shape[1:]) if unbatched else probs


def bce_loss(probs, labels) -> Tensor:
    """Two-class cross-entropy, ``-mean(log p[label])``, averaged over pixels and batch.

    ``labels`` is a boolean/integer traversable mask ``[H, W]`` or ``[B, H, W]``
    (or a ``GroundTruth``).  Probabilities are floored at 1e-7 so the loss
    stays finite under saturation.
    """
    probs = as_tensor(probs)
    labels = np.asarray(getattr(labels, "binary", labels)).astype(np.int64)
    class_axis = probs.ndim - 3
    expected = probs.shape[:class_axis] + probs.shape[class_axis + 1 :]
    if labels.shape != expected:
        raise DimensionError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    picked = gather_class(probs, labels, axis=class_axis)
    return -log(clip(picked, PROB_CLAMP, 1.0)).mean()


def traversable_probability(probs: Tensor | np.ndarray) -> np.ndarray:
    """Channel 1 of the class axis."""
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return arr[..., 1, :, :]
