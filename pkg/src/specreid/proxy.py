"""Fusing per-spectrum patch tokens into one proxy token matrix.

The proxy aggregates all three spectra of a sample, token position by
token position. It anchors the quality ranking, feeds the enhancement
stage as an extra attention source, and trains under its own identity
loss through a pooled class-level feature. Three fusion modes:

progressive  concat -> affine -> gelu -> layernorm, twice (3d -> mid -> d)
direct       one affine map from the concatenation (3d -> d)
sum          parameter-free mean of the three token stacks
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .initializers import trunc_normal

FUSION_MODES = ("progressive", "direct", "sum")


@dataclass
class ProxyConfig:
    enabled: bool = True
    mode: str = "progressive"
    mid_dim: int = 128

    def validate(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"proxy.mode must be one of {FUSION_MODES}, got '{self.mode}'")
        if self.mid_dim < 1:
            raise ConfigError(f"proxy.mid_dim must be positive, got {self.mid_dim}")


def _averaging_blocks(embed_dim: int, out_dim: int) -> np.ndarray:
    """(3*embed_dim, out_dim) map that averages the three spectrum slices.

    Each spectrum's slice carries a tiled identity, so output column j
    reads input coordinate j % embed_dim from every spectrum.
    """
    reps = -(-out_dim // embed_dim)
    tile = np.tile(np.eye(embed_dim), (1, reps))[:, :out_dim]
    return np.tile(tile, (3, 1)) / 3.0


def _folding_identity(in_dim: int, embed_dim: int) -> np.ndarray:
    """(in_dim, embed_dim) map folding tiled coordinates back to their mean."""
    reps = -(-in_dim // embed_dim)
    tile = np.tile(np.eye(embed_dim), (reps, 1))[:in_dim, :]
    counts = tile.sum(axis=0)
    return tile / counts


def init_proxy_params(cfg: ProxyConfig, embed_dim: int, rng: np.random.Generator):
    """Initialize fusion weights at a noisy spectral average.

    The projections start as averaging maps (identity blocks scaled by
    1/3, plus small noise) rather than pure random matrices. A random
    projection would place the fused tokens in a subspace with no
    directional relationship to the per-spectrum tokens, and the quality
    ranking reads exactly that relationship through per-token cosines.
    Starting at the average keeps the fused tokens comparable to their
    sources from step one; training then reweights the spectra.
    """
    cfg.validate()
    params = OrderedDict()
    if not cfg.enabled or cfg.mode == "sum":
        return params
    if cfg.mode == "direct":
        w = trunc_normal(rng, (3 * embed_dim, embed_dim))
        w += _averaging_blocks(embed_dim, embed_dim)
        params["proxy.w"] = w
        params["proxy.b"] = np.zeros(embed_dim)
        return params
    # the two-step reduction must actually sit between the concat width and
    # the embed width, otherwise it is no reduction at all
    if not embed_dim < cfg.mid_dim < 3 * embed_dim:
        raise ConfigError(
            f"proxy.mid_dim must lie strictly between embed_dim ({embed_dim}) "
            f"and 3*embed_dim ({3 * embed_dim}), got {cfg.mid_dim}"
        )
    params["proxy.w1"] = trunc_normal(rng, (3 * embed_dim, cfg.mid_dim))
    params["proxy.w1"] += _averaging_blocks(embed_dim, cfg.mid_dim)
    params["proxy.b1"] = np.zeros(cfg.mid_dim)
    params["proxy.ln1.gain"] = np.ones(cfg.mid_dim)
    params["proxy.ln1.bias"] = np.zeros(cfg.mid_dim)
    params["proxy.w2"] = trunc_normal(rng, (cfg.mid_dim, embed_dim))
    params["proxy.w2"] += _folding_identity(cfg.mid_dim, embed_dim)
    params["proxy.b2"] = np.zeros(embed_dim)
    params["proxy.ln2.gain"] = np.ones(embed_dim)
    params["proxy.ln2.bias"] = np.zeros(embed_dim)
    return params


def fuse(params, cfg: ProxyConfig, rgb, nir, tir):
    """Combine three (b, n, d) patch-token stacks into (b, n, d) proxy tokens.

    Unbatched (n, d) inputs work too; the fusion acts on the last axis.
    """
    for name, t in (("rgb", rgb), ("nir", nir), ("tir", tir)):
        if t.ndim not in (2, 3):
            raise ShapeError(f"{name} tokens must be (n, d) or (batch, n, d), got {t.shape}")
    if rgb.shape != nir.shape or rgb.shape != tir.shape:
        raise ShapeError(
            f"spectrum token shapes disagree: {rgb.shape} / {nir.shape} / {tir.shape}"
        )
    if cfg.mode == "sum":
        return ad.add(ad.add(rgb, nir), tir) * (1.0 / 3.0)
    stacked = ad.concat([rgb, nir, tir], axis=-1)
    if cfg.mode == "direct":
        return ad.linear(stacked, params["proxy.w"], params["proxy.b"])
    h = ad.gelu(ad.linear(stacked, params["proxy.w1"], params["proxy.b1"]))
    h = ad.layer_norm(h, params["proxy.ln1.gain"], params["proxy.ln1.bias"])
    h = ad.gelu(ad.linear(h, params["proxy.w2"], params["proxy.b2"]))
    return ad.layer_norm(h, params["proxy.ln2.gain"], params["proxy.ln2.bias"])


def proxy_class_feature(proxy_tokens):
    """Pool proxy tokens over the token axis into a class-level descriptor.

    (b, n, d) -> (b, d); unbatched (n, d) -> (d,).
    """
    if proxy_tokens.ndim == 3:
        return ad.reduce_mean(proxy_tokens, axis=1)
    if proxy_tokens.ndim == 2:
        return ad.reduce_mean(proxy_tokens, axis=0)
    raise ShapeError(f"proxy tokens must be 2d or 3d, got {proxy_tokens.shape}")
