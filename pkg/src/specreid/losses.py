"""Identity classification and batch-hard triplet objectives.

Every branch (three trunk features, three enhanced features, proxy)
trains under the same pair: label-smoothed cross entropy on its
classifier logits plus a batch-hard triplet term on its raw feature.
The stage losses combine as

    total = (1 - lam) * vit_stage + lam * enhanced_stage + proxy

where each stage sums its branches' pairs.

Hardest positives and negatives are chosen on detached distances;
gradient flows only through the selected pairs.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeError


@dataclass
class LossConfig:
    lam: float = 0.5
    margin: float = 0.3
    smoothing: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss.lam must be in [0, 1], got {self.lam}")
        if self.margin < 0.0:
            raise ConfigError(f"loss.margin must be nonnegative, got {self.margin}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"loss.smoothing must be in [0, 1), got {self.smoothing}")


def id_loss(logits, labels: np.ndarray, smoothing: float = 0.1):
    """Cross entropy against smoothed one-hot targets, averaged over rows."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    targets = np.full((b, c), smoothing / c)
    targets[np.arange(b), labels] += 1.0 - smoothing
    logp = ad.log_softmax(logits)
    return ad.mul(logp, ad.Tensor(targets)).sum() * (-1.0 / b)


def pairwise_distances(features):
    """Differentiable euclidean distance matrix of feature rows (b, d)."""
    b, d = features.shape
    diff = ad.sub(ad.reshape(features, (b, 1, d)), ad.reshape(features, (1, b, d)))
    sq = ad.reduce_sum(ad.mul(diff, diff), axis=2)
    # floor keeps sqrt differentiable at self-distances
    return ad.sqrt(ad.clip_min(sq, 1e-24))


def triplet_loss(features, labels: np.ndarray, margin: float = 0.3):
    """Batch-hard triplet: hinge on hardest positive vs hardest negative.

    Every label in the batch needs at least two samples, and the batch
    needs at least two labels; otherwise some anchor has no positive or
    no negative to mine.
    """
    labels = np.asarray(labels)
    b = features.shape[0]
    if labels.shape != (b,):
        raise ShapeError(f"labels {labels.shape} do not match features {features.shape}")
    same = labels[None, :] == labels[:, None]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        lonely = labels[~pos_mask.any(axis=1)]
        raise DataError(f"identity {lonely[0]} has a single sample; triplet mining needs pairs")
    if not neg_mask.any(axis=1).all():
        raise DataError("batch contains a single identity; triplet mining needs negatives")

    dist = pairwise_distances(features)
    detached = dist.data
    rows = np.arange(b)
    pos_idx = np.where(pos_mask, detached, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, detached, np.inf).argmin(axis=1)
    d_pos = ad.gather_pairs(dist, rows, pos_idx)
    d_neg = ad.gather_pairs(dist, rows, neg_idx)
    hinge = ad.relu(ad.add(ad.sub(d_pos, d_neg), ad.Tensor(np.full(b, margin))))
    return hinge.mean()


def branch_loss(features, logits, labels, cfg: LossConfig):
    """id + triplet pair for one branch; returns (loss, id_val, tri_val)."""
    lid = id_loss(logits, labels, cfg.smoothing)
    ltri = triplet_loss(features, labels, cfg.margin)
    return ad.add(lid, ltri), float(lid.data), float(ltri.data)


def total_loss(vit_branches, enhanced_branches, proxy_branch, labels, cfg: LossConfig):
    """Weighted stage combination; see module docstring.

    vit_branches / enhanced_branches: dict name -> (features, logits).
    proxy_branch: (features, logits) or None when the proxy is disabled.
    Returns (scalar tensor, breakdown dict of floats).
    """
    cfg.validate()
    breakdown = {}

    def stage(branches, tag):
        if not branches:
            raise ConfigError(f"{tag} stage has no branches to train")
        acc = None
        for name, (feat, logits) in branches.items():
            term, lid, ltri = branch_loss(feat, logits, labels, cfg)
            breakdown[f"{tag}.{name}.id"] = lid
            breakdown[f"{tag}.{name}.triplet"] = ltri
            acc = term if acc is None else ad.add(acc, term)
        return acc

    vit_total = stage(vit_branches, "vit")
    enh_total = stage(enhanced_branches, "enh")
    total = ad.add(vit_total * (1.0 - cfg.lam), enh_total * cfg.lam)
    if proxy_branch is not None:
        feat, logits = proxy_branch
        term, lid, ltri = branch_loss(feat, logits, labels, cfg)
        breakdown["proxy.id"] = lid
        breakdown["proxy.triplet"] = ltri
        total = ad.add(total, term)
    breakdown["total"] = float(total.data)
    return total, breakdown


class SGD:
    """Momentum SGD; L2 decay joins the gradient before the velocity update.

        v <- mu * v + g + wd * w
        w <- w - lr * v
    """

    def __init__(self, params, lr: float = 3e-3, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        return {f"opt.{name}": v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name in self.velocity:
            key = f"opt.{name}"
            if key not in arrays:
                raise DataError(f"checkpoint is missing optimizer state '{key}'")
            if arrays[key].shape != self.velocity[name].shape:
                raise DataError(
                    f"optimizer state '{key}' has shape {arrays[key].shape}, "
                    f"expected {self.velocity[name].shape}"
                )
            self.velocity[name] = arrays[key].astype(np.float64).copy()
