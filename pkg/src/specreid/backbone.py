"""Shared-parameter transformer encoder over spectrum image stacks.

All three spectra of a batch share one patch embedding, class token,
positional table and trunk blocks; they ride through the trunk stacked
along the batch axis as (3b, n_tokens, d). The final block is the one
place spectra diverge: each spectrum (and the enhancement stage) gets
its own copy, applied by `finalize_spectrum` after tokens have been
reordered and enhanced.

Blocks are pre-norm: x + attn(ln(x)), then x + mlp(ln(x)).
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .initializers import trunc_normal

SPECTRA = ("rgb", "nir", "tir")


@dataclass
class ModelConfig:
    image_hw: tuple = (32, 64)
    patch: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    dropout: float = 0.0

    def validate(self) -> None:
        h, w = self.image_hw
        if h < 1 or w < 1 or h % self.patch or w % self.patch:
            raise ConfigError(
                f"image {h}x{w} is not divisible into {self.patch}x{self.patch} patches"
            )
        if self.embed_dim < 1 or self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must divide into {self.heads} heads"
            )
        if self.depth < 2:
            raise ConfigError(f"depth must be at least 2 (trunk plus final), got {self.depth}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_patches(self) -> int:
        h, w = self.image_hw
        return (h // self.patch) * (w // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(b, c, h, w) images to (b, n_patches, c*p*p) rows.

    Patches scan the grid row-major; within a patch the layout is
    channel-major, matching the weight layout of the patch embedding.
    """
    images = np.asarray(images, dtype=np.float64)
    h, w = cfg.image_hw
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, h, w):
        raise ShapeError(
            f"expected images (b, {cfg.channels}, {h}, {w}), got {images.shape}"
        )
    b = images.shape[0]
    p = cfg.patch
    gh, gw = h // p, w // p
    x = images.reshape(b, cfg.channels, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (b, gh, gw, c, p, p)
    return np.ascontiguousarray(x).reshape(b, gh * gw, cfg.patch_dim)


def _block_param_names(prefix: str, cfg: ModelConfig):
    d, m = cfg.embed_dim, cfg.mlp_dim
    return [
        (f"{prefix}.ln1.gain", (d,)),
        (f"{prefix}.ln1.bias", (d,)),
        (f"{prefix}.attn.wqkv", (d, 3 * d)),
        (f"{prefix}.attn.bqkv", (3 * d,)),
        (f"{prefix}.attn.wo", (d, d)),
        (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.gain", (d,)),
        (f"{prefix}.ln2.bias", (d,)),
        (f"{prefix}.mlp.w1", (d, m)),
        (f"{prefix}.mlp.b1", (m,)),
        (f"{prefix}.mlp.w2", (m, d)),
        (f"{prefix}.mlp.b2", (d,)),
    ]


def init_vit_params(cfg: ModelConfig, rng: np.random.Generator) -> OrderedDict:
    cfg.validate()
    params = OrderedDict()
    params["vit.patch.w"] = trunc_normal(rng, (cfg.patch_dim, cfg.embed_dim))
    params["vit.patch.b"] = np.zeros(cfg.embed_dim)
    params["vit.cls"] = trunc_normal(rng, (cfg.embed_dim,))
    params["vit.pos"] = trunc_normal(rng, (cfg.n_patches + 1, cfg.embed_dim))
    prefixes = [f"vit.block{i}" for i in range(cfg.depth - 1)]
    prefixes += [f"vit.final.{s}" for s in SPECTRA]
    for prefix in prefixes:
        for name, shape in _block_param_names(prefix, cfg):
            if name.endswith((".gain",)):
                params[name] = np.ones(shape)
            elif name.endswith((".bias", ".bqkv", ".bo", ".b1", ".b2")):
                params[name] = np.zeros(shape)
            else:
                params[name] = trunc_normal(rng, shape)
    # class features are residual-stream rows, whose scale at a fresh
    # init is far too small to drive the heads; normalize them before
    # any head or distance sees them (mid = trunk exit, out = final)
    params["vit.mid_norm.gain"] = np.ones(cfg.embed_dim)
    params["vit.mid_norm.bias"] = np.zeros(cfg.embed_dim)
    params["vit.out_norm.gain"] = np.ones(cfg.embed_dim)
    params["vit.out_norm.bias"] = np.zeros(cfg.embed_dim)
    return params


def _attention(params, prefix, x, cfg, training, rng):
    b, n, d = x.shape
    nh = cfg.heads
    dh = d // nh
    qkv = ad.linear(x, params[f"{prefix}.attn.wqkv"], params[f"{prefix}.attn.bqkv"])
    heads = []
    for part in range(3):
        t = ad.narrow(qkv, 2, part * d, d)
        t = ad.reshape(t, (b, n, nh, dh))
        heads.append(ad.transpose(t, (0, 2, 1, 3)))  # (b, nh, n, dh)
    q, k, v = heads
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax_rows(scores)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
    out = ad.linear(out, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])
    return ad.dropout(out, cfg.dropout, training=training, rng=rng)


def _mlp(params, prefix, x, cfg, training, rng):
    h = ad.gelu(ad.linear(x, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    h = ad.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return ad.dropout(h, cfg.dropout, training=training, rng=rng)


def block_forward(params, prefix, x, cfg: ModelConfig, training=False, rng=None):
    """One pre-norm transformer block on tokens (b, n, d)."""
    h = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = ad.add(x, _attention(params, prefix, h, cfg, training, rng))
    h = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    return ad.add(x, _mlp(params, prefix, h, cfg, training, rng))


def encode_shared(params, cfg: ModelConfig, images_by_spectrum, training=False, rng=None):
    """Run the shared trunk over all three spectra at once.

    images_by_spectrum: 3 arrays (b, c, h, w) in rgb/nir/tir order.
    Returns 3 token tensors (b, n_patches + 1, d), class token first,
    after depth - 1 trunk blocks.
    """
    if len(images_by_spectrum) != 3:
        raise ShapeError(f"expected 3 spectrum image stacks, got {len(images_by_spectrum)}")
    b = images_by_spectrum[0].shape[0]
    rows = np.concatenate([patchify(img, cfg) for img in images_by_spectrum], axis=0)
    tokens = ad.linear(ad.Tensor(rows), params["vit.patch.w"], params["vit.patch.b"])
    cls = ad.reshape(params["vit.cls"], (1, 1, cfg.embed_dim))
    cls = ad.broadcast_to(cls, (3 * b, 1, cfg.embed_dim))
    tokens = ad.concat([cls, tokens], axis=1)
    tokens = ad.add(tokens, params["vit.pos"])
    for i in range(cfg.depth - 1):
        tokens = block_forward(params, f"vit.block{i}", tokens, cfg, training, rng)
    return [ad.narrow(tokens, 0, s * b, b) for s in range(3)]


def finalize_spectrum(params, cfg: ModelConfig, spectrum: str, patch_tokens, cls_token,
                      training=False, rng=None):
    """Per-spectrum final block; returns the refined class embedding.

    patch_tokens (b, n_patches, d) are the possibly-enhanced tokens;
    cls_token (b, d) is re-attached in front before the block runs.
    The returned class row is layer-normalized so heads and retrieval
    distances see unit-scale features.
    """
    if spectrum not in SPECTRA:
        raise ConfigError(f"unknown spectrum '{spectrum}', expected one of {SPECTRA}")
    b, _, d = patch_tokens.shape
    head = ad.reshape(cls_token, (b, 1, d))
    tokens = ad.concat([head, patch_tokens], axis=1)
    tokens = block_forward(params, f"vit.final.{spectrum}", tokens, cfg, training, rng)
    cls_row = ad.reshape(ad.narrow(tokens, 1, 0, 1), (b, d))
    return ad.layer_norm(cls_row, params["vit.out_norm.gain"], params["vit.out_norm.bias"])
