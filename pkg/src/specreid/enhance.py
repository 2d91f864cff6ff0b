"""Quality-ordered cross-attention enhancement.

Spectra are processed in ranked order: the most reliable spectrum
("primary") lends its tokens to the weaker two, and the proxy tokens
lend themselves to all three. Each enhancement is single-head cross
attention where one matrix projects query, key and value, and its
output is added residually:

    ranked1' = ranked1 + attn(ranked1 <- proxy)
    ranked2' = ranked2 + attn(ranked2 <- proxy) + attn(ranked2 <- ranked1)
    ranked3' = ranked3 + attn(ranked3 <- proxy) + attn(ranked3 <- ranked1)

A disabled path contributes exact zero tensors, so with both paths off
the stage is an identity. Outputs are returned in fixed rgb/nir/tir
order (the ranking is undone at the end).

Whether each path reuses one weight matrix for every rank position or
keeps a matrix per position is not observable from the equations alone;
both readings exist behind ``shared_weights`` (shared is the default).
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .initializers import trunc_normal
from .quality import QualityRanking, apply_sort, inverse_sort


@dataclass
class CemConfig:
    primary_enabled: bool = True
    proxy_enabled: bool = True
    dropout: float = 0.5
    shared_weights: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"cem.dropout must be in [0, 1), got {self.dropout}")


# per-position weight names, keyed by (path, rank position of the enhanced spectrum)
_POSITIONAL = {
    ("proxy", 1): "cem.w_proxy1",
    ("proxy", 2): "cem.w_proxy2",
    ("proxy", 3): "cem.w_proxy3",
    ("primary", 2): "cem.w_prim2",
    ("primary", 3): "cem.w_prim3",
}
_SHARED = {"proxy": "cem.w_proxy", "primary": "cem.w_primary"}


def _weight_name(cfg: CemConfig, path: str, pos: int) -> str:
    if cfg.shared_weights:
        return _SHARED[path]
    return _POSITIONAL[(path, pos)]


def init_cem_params(cfg: CemConfig, embed_dim: int, rng: np.random.Generator):
    cfg.validate()
    params = OrderedDict()
    names = []
    if cfg.shared_weights:
        if cfg.primary_enabled:
            names.append(_SHARED["primary"])
        if cfg.proxy_enabled:
            names.append(_SHARED["proxy"])
    else:
        for (path, _), name in _POSITIONAL.items():
            enabled = cfg.proxy_enabled if path == "proxy" else cfg.primary_enabled
            if enabled:
                names.append(name)
    for name in sorted(names):
        params[name] = trunc_normal(rng, (embed_dim, embed_dim))
    return params


def cross_enhance(target, source, weight, dropout_rate=0.0, training=False, rng=None):
    """Enhance target tokens (b, n, d) by attending into source tokens.

    One weight matrix produces the query (from target) and both key and
    value (from source). Scores are scaled by 1/sqrt(d).
    """
    if target.ndim != 3 or source.ndim != 3:
        raise ShapeError(f"expected (b, n, d) token stacks, got {target.shape} and {source.shape}")
    if target.shape[0] != source.shape[0] or target.shape[2] != source.shape[2]:
        raise ShapeError(f"target {target.shape} and source {source.shape} are incompatible")
    d = target.shape[2]
    q = ad.matmul(target, weight)
    k = ad.matmul(source, weight)
    v = k
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d))
    attn = ad.softmax_rows(scores)
    out = ad.matmul(attn, v)
    return ad.dropout(out, dropout_rate, training=training, rng=rng)


def _zeros_like(t):
    return ad.Tensor(np.zeros(t.shape))


def primary_enhance(params, cfg: CemConfig, f1, f2, f3, training=False, rng=None):
    """Best-ranked spectrum enhances the other two; zeros when disabled."""
    if not cfg.primary_enabled:
        return _zeros_like(f2), _zeros_like(f3)
    out = []
    for pos, target in ((2, f2), (3, f3)):
        w = params[_weight_name(cfg, "primary", pos)]
        out.append(cross_enhance(target, f1, w, cfg.dropout, training, rng))
    return tuple(out)


def proxy_enhance(params, cfg: CemConfig, f1, f2, f3, proxy_tokens, training=False, rng=None):
    """Proxy tokens enhance all three ranked spectra; zeros when disabled."""
    if not cfg.proxy_enabled:
        return _zeros_like(f1), _zeros_like(f2), _zeros_like(f3)
    if proxy_tokens is None:
        raise ConfigError("proxy path enabled but no proxy tokens supplied")
    out = []
    for pos, target in ((1, f1), (2, f2), (3, f3)):
        w = params[_weight_name(cfg, "proxy", pos)]
        out.append(cross_enhance(target, proxy_tokens, w, cfg.dropout, training, rng))
    return tuple(out)


def aggregate(f1, f2, f3, p1, p2, p3, from1_2, from1_3):
    """Residual join: the best-ranked spectrum takes no primary-based term."""
    e1 = ad.add(f1, p1)
    e2 = ad.add(ad.add(f2, p2), from1_2)
    e3 = ad.add(ad.add(f3, p3), from1_3)
    return e1, e2, e3


def cem_forward(params, cfg: CemConfig, spectrum_tokens, proxy_tokens, ranking: QualityRanking,
                training=False, rng=None):
    """Run both enhancement paths; returns tokens in rgb/nir/tir order.

    spectrum_tokens: 3 tensors (b, n, d) in fixed spectrum order.
    proxy_tokens: (b, n, d) fused proxy stack; pass None when the proxy
    path is disabled.
    """
    cfg.validate()
    f1, f2, f3 = apply_sort(spectrum_tokens, ranking.order)
    p1, p2, p3 = proxy_enhance(params, cfg, f1, f2, f3, proxy_tokens, training, rng)
    from1_2, from1_3 = primary_enhance(params, cfg, f1, f2, f3, training, rng)
    enhanced = aggregate(f1, f2, f3, p1, p2, p3, from1_2, from1_3)
    return inverse_sort(enhanced, ranking.inverse)
