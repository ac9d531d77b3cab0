"""The region-reasoning segmentation network.

Pipeline: a small convolutional stem produces a W x H x C feature map; x/y
sinusoidal embeddings double it to 2C; a learned concept bank projects every
feature column to K soft region masks via sigmoid dot products; each mask
pools dimension-reduced features into one token (unnormalized weighted sum);
tokens get sinusoidal encodings of their mask centroids, are refined by a
pre-norm transformer encoder, and are redistributed to pixels through the
same masks, mapped back to C channels and added residually to the feature
map before a pointwise classification head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PE_BASE = 10000.0


@dataclass
class ModelConfig:
    width: int = 32
    height: int = 32
    channels: int = 16        # feature channels C
    num_concepts: int = 16    # region/token count K
    max_active: int = 8       # matching budget L per image
    token_dim: int = 16       # token width D
    num_layers: int = 2
    num_heads: int = 4
    num_classes: int = 4

    def __post_init__(self):
        if not self.num_concepts > self.max_active > 0:
            raise ValueError("need num_concepts > max_active > 0")
        if self.channels % 2 != 0:
            raise ValueError("channels must be even for sin/cos pairs")
        if self.token_dim % (2 * self.num_heads) != 0:
            raise ValueError("token_dim must divide into 2 * num_heads")
        if self.token_dim % 4 != 0:
            raise ValueError("token_dim halves must split into sin/cos pairs")


@dataclass
class LayerParams:
    norm1_gain: Tensor
    norm1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


@dataclass
class ModelParams:
    stem_w1: Tensor
    stem_b1: Tensor
    stem_w2: Tensor
    stem_b2: Tensor
    concept_bank: Tensor   # (2C, K), column k is one concept embedding
    reduce_w: Tensor       # (2C, D)
    reduce_b: Tensor
    layers: list[LayerParams]
    output_w: Tensor       # (D, C), bias-free so zero tokens leave X intact
    head_w: Tensor
    head_b: Tensor

    def named(self):
        """(name, tensor) pairs in a stable order."""
        out = [
            ("stem_w1", self.stem_w1), ("stem_b1", self.stem_b1),
            ("stem_w2", self.stem_w2), ("stem_b2", self.stem_b2),
            ("concept_bank", self.concept_bank),
            ("reduce_w", self.reduce_w), ("reduce_b", self.reduce_b),
        ]
        for i, layer in enumerate(self.layers):
            for name in ("norm1_gain", "norm1_bias", "wq", "bq", "wk", "bk",
                         "wv", "bv", "wo", "bo", "norm2_gain", "norm2_bias",
                         "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
                out.append((f"layer{i}.{name}", getattr(layer, name)))
        out += [("output_w", self.output_w), ("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def all(self):
        return [t for _, t in self.named()]


def init_params(config, rng):
    """Random initialization; the concept bank starts small so masks open
    near 0.5 and every region receives gradient."""
    c, d, k = config.channels, config.token_dim, config.num_concepts

    def dense(fan_in, *shape):
        return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    layers = []
    for _ in range(config.num_layers):
        layers.append(LayerParams(
            norm1_gain=ones(d), norm1_bias=zeros(d),
            wq=dense(d, d, d), bq=zeros(d),
            wk=dense(d, d, d), bk=zeros(d),
            wv=dense(d, d, d), bv=zeros(d),
            wo=dense(d, d, d), bo=zeros(d),
            norm2_gain=ones(d), norm2_bias=zeros(d),
            ff_w1=dense(d, d, 4 * d), ff_b1=zeros(4 * d),
            ff_w2=dense(4 * d, 4 * d, d), ff_b2=zeros(d),
        ))
    return ModelParams(
        stem_w1=Tensor(rng.standard_normal((3, 3, 3, c)) * np.sqrt(2.0 / 27), requires_grad=True),
        stem_b1=zeros(c),
        stem_w2=Tensor(rng.standard_normal((3, 3, c, c)) * np.sqrt(2.0 / (9 * c)), requires_grad=True),
        stem_b2=zeros(c),
        concept_bank=Tensor(0.1 * rng.standard_normal((2 * c, k)), requires_grad=True),
        reduce_w=dense(2 * c, 2 * c, d),
        reduce_b=zeros(d),
        layers=layers,
        output_w=dense(d, d, c),
        head_w=dense(c, c, config.num_classes),
        head_b=zeros(config.num_classes),
    )


# ---------------------------------------------------------------------------
# positional embeddings

def sinusoid_table(positions, dim):
    """Constant sin/cos table: row p = [sin(p/f_0), cos(p/f_0), sin(p/f_1), ...]
    with f_i = 10000^(2i/dim)."""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = PE_BASE ** (np.arange(dim // 2) * 2.0 / dim)
    args = positions[:, None] / freqs[None, :]
    table = np.empty((len(positions), dim))
    table[:, 0::2] = np.sin(args)
    table[:, 1::2] = np.cos(args)
    return table


def sinusoid_encode(positions, dim):
    """Differentiable version of `sinusoid_table` for tensor positions (n,)."""
    n = positions.data.shape[0]
    inv_freqs = PE_BASE ** (-np.arange(dim // 2) * 2.0 / dim)
    args = ad.mul(positions.reshape(n, 1), Tensor(inv_freqs[None, :]))
    s = ad.sin(args).reshape(n, dim // 2, 1)
    c = ad.cos(args).reshape(n, dim // 2, 1)
    return ad.concatenate([s, c], axis=2).reshape(n, dim)


def add_positional_embedding(x, width=None, height=None):
    """(W, H, C) -> (W, H, 2C): first C channels add the column-position
    code, last C the row-position code. Positions are 1-based."""
    x = ad.as_tensor(x)
    w_dim, h_dim, c = x.data.shape
    if c % 2 != 0:
        raise ValueError("add_positional_embedding: channel count must be even")
    pe_x = sinusoid_table(np.arange(1, w_dim + 1), c)  # (W, C)
    pe_y = sinusoid_table(np.arange(1, h_dim + 1), c)  # (H, C)
    gx = np.broadcast_to(pe_x[:, None, :], (w_dim, h_dim, c))
    gy = np.broadcast_to(pe_y[None, :, :], (w_dim, h_dim, c))
    return ad.concatenate([x + Tensor(gx.copy()), x + Tensor(gy.copy())], axis=2)


# ---------------------------------------------------------------------------
# region masks, tokens, centroids

def compute_region_masks(x_pos, concept_bank):
    """Soft masks P[w, h, k] = sigmoid(<x_pos[w, h, :], bank[:, k]>)."""
    x_pos = ad.as_tensor(x_pos)
    if x_pos.data.shape[2] != concept_bank.data.shape[0]:
        raise ad.ShapeError(
            f"compute_region_masks: {x_pos.data.shape[2]} channels vs "
            f"bank rows {concept_bank.data.shape[0]}")
    return ad.sigmoid(ad.conv1x1(x_pos, concept_bank))


def aggregate_tokens(p, x_pos, reduce_w, reduce_b):
    """Token k = sum over pixels of P_k * reduced feature (unnormalized)."""
    p, x_pos = ad.as_tensor(p), ad.as_tensor(x_pos)
    w_dim, h_dim, k = p.data.shape
    reduced = ad.conv1x1(x_pos, reduce_w, reduce_b)
    d = reduced.data.shape[2]
    p_flat = p.reshape(w_dim * h_dim, k)
    x_flat = reduced.reshape(w_dim * h_dim, d)
    return ad.matmul(ad.transpose(p_flat), x_flat)


def mask_centroids(p):
    """Soft-mask centroids (K, 2) in 1-based (x, y) grid coordinates."""
    p = ad.as_tensor(p)
    w_dim, h_dim, k = p.data.shape
    assert np.all(p.data.reshape(-1, k).sum(axis=0) > 0), "degenerate all-zero mask"
    xs = np.arange(1, w_dim + 1, dtype=np.float64)[:, None, None]
    ys = np.arange(1, h_dim + 1, dtype=np.float64)[None, :, None]
    mass = p.sum(axis=(0, 1))                       # (K,)
    inv_mass = ad.power(mass, -1.0)
    cx = (p * Tensor(xs)).sum(axis=(0, 1)) * inv_mass
    cy = (p * Tensor(ys)).sum(axis=(0, 1)) * inv_mass
    return ad.concatenate([cx.reshape(k, 1), cy.reshape(k, 1)], axis=1)


def encode_token_positions(tokens, p):
    """Add sinusoidal encodings of each mask's centroid to its token: the
    first D/2 channels encode the x-centroid, the rest the y-centroid.
    Returns (encoded tokens, centroids)."""
    tokens = ad.as_tensor(tokens)
    k, d = tokens.data.shape
    cents = mask_centroids(p)
    # column picks via matmul keep the centroid path on the tape
    ex = ad.matmul(cents, Tensor([[1.0], [0.0]])).reshape(k)
    ey = ad.matmul(cents, Tensor([[0.0], [1.0]])).reshape(k)
    pe = ad.concatenate([sinusoid_encode(ex, d // 2), sinusoid_encode(ey, d // 2)], axis=1)
    return tokens + pe, cents


# ---------------------------------------------------------------------------
# transformer refinement

def _attention(tokens, layer, num_heads):
    k_tokens, d = tokens.data.shape
    head_dim = d // num_heads
    scale = 1.0 / np.sqrt(head_dim)

    def heads(x):  # (K, D) -> (heads, K, head_dim)
        return ad.transpose(x.reshape(k_tokens, num_heads, head_dim), (1, 0, 2))

    q = heads(ad.matmul(tokens, layer.wq) + layer.bq)
    k = heads(ad.matmul(tokens, layer.wk) + layer.bk)
    v = heads(ad.matmul(tokens, layer.wv) + layer.bv)
    att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 2, 1))) * scale, axis=-1)
    mixed = ad.transpose(ad.matmul(att, v), (1, 0, 2)).reshape(k_tokens, d)
    return ad.matmul(mixed, layer.wo) + layer.bo


def transformer_encode(tokens, layers, num_heads):
    """Pre-norm encoder stack: self-attention and a 4x feed-forward block,
    each with a residual add."""
    tokens = ad.as_tensor(tokens)
    for layer in layers:
        normed = ad.layer_norm(tokens, layer.norm1_gain, layer.norm1_bias)
        tokens = tokens + _attention(normed, layer, num_heads)
        normed = ad.layer_norm(tokens, layer.norm2_gain, layer.norm2_bias)
        hidden = ad.silu(ad.matmul(normed, layer.ff_w1) + layer.ff_b1)
        tokens = tokens + (ad.matmul(hidden, layer.ff_w2) + layer.ff_b2)
    return tokens


def back_project_fuse(tokens_out, p, x, output_w):
    """Redistribute tokens to pixels through the masks, map D -> C and add
    residually onto the original features."""
    p, x = ad.as_tensor(p), ad.as_tensor(x)
    w_dim, h_dim, k = p.data.shape
    c = x.data.shape[2]
    projected = ad.matmul(p.reshape(w_dim * h_dim, k), tokens_out)  # (WH, D)
    mapped = ad.matmul(projected, output_w).reshape(w_dim, h_dim, c)
    return mapped + x


# ---------------------------------------------------------------------------
# full forward pass

class ForwardResult(NamedTuple):
    logits: Tensor     # (W, H, num_classes)
    masks: Tensor      # (W, H, K) in (0, 1)
    tokens: Tensor     # (K, D) transformer output
    centroids: Tensor  # (K, 2)


def stem_features(image, params):
    """Two 3x3 convolutions with a smooth nonlinearity: (W, H, 3) -> (W, H, C)."""
    image = ad.as_tensor(image)
    h = ad.silu(ad.conv2d_3x3(image, params.stem_w1, params.stem_b1))
    return ad.silu(ad.conv2d_3x3(h, params.stem_w2, params.stem_b2))


def sgr_forward(image, params, config):
    """Run the whole pipeline on one image; returns logits plus the masks,
    refined tokens and centroids needed by the losses and metrics."""
    x = stem_features(image, params)
    x_pos = add_positional_embedding(x)
    masks = compute_region_masks(x_pos, params.concept_bank)
    tokens = aggregate_tokens(masks, x_pos, params.reduce_w, params.reduce_b)
    tokens_pos, cents = encode_token_positions(tokens, masks)
    tokens_out = transformer_encode(tokens_pos, params.layers, config.num_heads)
    fused = back_project_fuse(tokens_out, masks, x, params.output_w)
    logits = ad.conv1x1(fused, params.head_w, params.head_b)
    return ForwardResult(logits, masks, tokens_out, cents)
