"""The full model: trunk, proxy fusion, ranking, enhancement, heads.

Parameter ownership lives here as one ordered name -> tensor registry;
submodules only know how to initialize and apply their slice of it.
Checkpoints are .npz archives holding every parameter under its
registry name, optimizer velocities under ``opt.<name>``, and a JSON
metadata blob under ``_meta``.

Branch vocabulary used for losses and evaluation:
    vit.rgb/nir/tir   class embedding after the shared trunk
    enh.rgb/nir/tir   class embedding after enhancement + final block
    proxy             fused proxy vector
Retrieval features come from the enh.* branches plus the proxy.
"""

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone, enhance, proxy, quality
from .backbone import SPECTRA, ModelConfig
from .enhance import CemConfig
from .errors import ConfigError, DataError
from .initializers import trunc_normal
from .proxy import ProxyConfig

CHECKPOINT_FORMAT = 1


def validate_component_flags(proxy_cfg: ProxyConfig, cem_cfg: CemConfig) -> None:
    """Enhancement ranks spectra against the proxy, so it needs one."""
    if not proxy_cfg.enabled and (cem_cfg.primary_enabled or cem_cfg.proxy_enabled):
        raise ConfigError(
            "enhancement paths need proxy.enabled=true; disable cem paths or enable the proxy"
        )


@dataclass
class ForwardOutput:
    vit: dict  # spectrum -> (b, d) tensor
    enhanced: dict  # spectrum -> (b, d) tensor
    proxy_feature: object  # (b, d) tensor or None
    ranking: object  # QualityRanking or None
    logits: dict  # branch name -> (b, n_classes) tensor

    def branches(self):
        """(features, logits) keyed the way the loss wants them."""
        vit = {s: (self.vit[s], self.logits[f"vit.{s}"]) for s in SPECTRA}
        enh = {s: (self.enhanced[s], self.logits[f"enh.{s}"]) for s in SPECTRA}
        pxy = None
        if self.proxy_feature is not None:
            pxy = (self.proxy_feature, self.logits["proxy"])
        return vit, enh, pxy


def model_from_meta(meta: dict) -> "ReidModel":
    """Rebuild the architecture a checkpoint was trained with."""
    try:
        c = meta["config"]
        model_kw = dict(c["model"])
        model_kw["image_hw"] = tuple(model_kw["image_hw"])
        return ReidModel(
            ModelConfig(**model_kw),
            ProxyConfig(**c["proxy"]),
            CemConfig(**c["cem"]),
            n_classes=c["n_classes"],
            seed=c["seed"],
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"checkpoint metadata is incomplete: {exc}") from exc


def peek_checkpoint_meta(path) -> dict:
    """Read a checkpoint's metadata without touching any model."""
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if "_meta" not in archive:
        raise DataError(f"checkpoint {path} has no metadata entry")
    return json.loads(bytes(archive["_meta"]).decode())


class ReidModel:
    def __init__(self, model_cfg: ModelConfig, proxy_cfg: ProxyConfig, cem_cfg: CemConfig,
                 n_classes: int, seed: int = 0):
        model_cfg.validate()
        proxy_cfg.validate()
        cem_cfg.validate()
        validate_component_flags(proxy_cfg, cem_cfg)
        if n_classes < 2:
            raise ConfigError(f"need at least 2 identity classes, got {n_classes}")
        self.cfg = model_cfg
        self.proxy_cfg = proxy_cfg
        self.cem_cfg = cem_cfg
        self.n_classes = n_classes
        self.seed = seed

        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        raw = OrderedDict()
        raw.update(backbone.init_vit_params(model_cfg, rng))
        raw.update(proxy.init_proxy_params(proxy_cfg, model_cfg.embed_dim, rng))
        raw.update(enhance.init_cem_params(cem_cfg, model_cfg.embed_dim, rng))
        for branch in self.branch_names():
            raw[f"head.{branch}.w"] = trunc_normal(rng, (model_cfg.embed_dim, n_classes))
            raw[f"head.{branch}.b"] = np.zeros(n_classes)
        self.params = OrderedDict(
            (name, ad.Tensor(arr, requires_grad=True)) for name, arr in raw.items()
        )

    def branch_names(self):
        names = [f"vit.{s}" for s in SPECTRA] + [f"enh.{s}" for s in SPECTRA]
        if self.proxy_cfg.enabled:
            names.append("proxy")
        return names

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def step_rng(self, step: int) -> np.random.Generator:
        """Dropout stream for one optimization step; pure f(seed, step)."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, 2, step]))

    # -- forward ------------------------------------------------------

    def forward(self, images_by_spectrum, training: bool = False,
                rng: np.random.Generator = None) -> ForwardOutput:
        cfg = self.cfg
        p = self.params
        b = images_by_spectrum[0].shape[0]
        n_patch = cfg.n_patches

        tokens3 = backbone.encode_shared(p, cfg, images_by_spectrum, training, rng)
        raw_cls = {}
        vit_cls = {}
        patches = []
        for s, toks in zip(SPECTRA, tokens3):
            raw_cls[s] = ad.reshape(ad.narrow(toks, 1, 0, 1), (b, cfg.embed_dim))
            # heads and triplet distances need unit-scale features; the
            # raw residual-stream row stays with the final block
            vit_cls[s] = ad.layer_norm(raw_cls[s], p["vit.mid_norm.gain"],
                                       p["vit.mid_norm.bias"])
            patches.append(ad.narrow(toks, 1, 1, n_patch))

        proxy_tokens = None
        ranking = None
        if self.proxy_cfg.enabled:
            proxy_tokens = proxy.fuse(p, self.proxy_cfg, patches[0], patches[1], patches[2])
            # ranking is a selection, not a differentiable quantity
            ranking = quality.quality_scores([t.data for t in patches], proxy_tokens.data)

        if self.cem_cfg.primary_enabled or self.cem_cfg.proxy_enabled:
            enhanced_patches = enhance.cem_forward(
                p, self.cem_cfg, patches, proxy_tokens, ranking, training, rng
            )
        else:
            enhanced_patches = patches

        enhanced_cls = {}
        for s, toks in zip(SPECTRA, enhanced_patches):
            enhanced_cls[s] = backbone.finalize_spectrum(
                p, cfg, s, toks, raw_cls[s], training, rng
            )

        logits = {}
        for s in SPECTRA:
            logits[f"vit.{s}"] = ad.linear(vit_cls[s], p["head.vit." + s + ".w"],
                                           p["head.vit." + s + ".b"])
            logits[f"enh.{s}"] = ad.linear(enhanced_cls[s], p["head.enh." + s + ".w"],
                                           p["head.enh." + s + ".b"])
        proxy_feature = None
        if self.proxy_cfg.enabled:
            proxy_feature = proxy.proxy_class_feature(proxy_tokens)
            logits["proxy"] = ad.linear(proxy_feature, p["head.proxy.w"], p["head.proxy.b"])

        return ForwardOutput(vit=vit_cls, enhanced=enhanced_cls,
                             proxy_feature=proxy_feature, ranking=ranking, logits=logits)

    def extract(self, images_by_spectrum, batch_size: int = 64):
        """Retrieval descriptors per branch, as plain arrays.

        Returns (parts, rankings): parts maps rgb/nir/tir (and proxy
        when enabled) to (n, d) arrays; rankings is the (n, 3) spectrum
        order per sample, or None without a proxy.
        """
        n = images_by_spectrum[0].shape[0]
        parts = {s: [] for s in SPECTRA}
        if self.proxy_cfg.enabled:
            parts["proxy"] = []
        orders = []
        with ad.no_grad():
            for lo in range(0, n, batch_size):
                chunk = [img[lo:lo + batch_size] for img in images_by_spectrum]
                out = self.forward(chunk, training=False)
                for s in SPECTRA:
                    parts[s].append(out.enhanced[s].data)
                if out.proxy_feature is not None:
                    parts["proxy"].append(out.proxy_feature.data)
                if out.ranking is not None:
                    orders.append(out.ranking.order)
        parts = {k: np.concatenate(v) for k, v in parts.items()}
        rankings = np.concatenate(orders) if orders else None
        return parts, rankings

    # -- checkpointing ------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "model": vars(self.cfg) | {"image_hw": list(self.cfg.image_hw)},
            "proxy": vars(self.proxy_cfg),
            "cem": vars(self.cem_cfg),
            "n_classes": self.n_classes,
            "seed": self.seed,
        }

    def save_checkpoint(self, path, optimizer=None, step: int = 0) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        if optimizer is not None:
            arrays.update(optimizer.state_arrays())
        meta = {
            "format": CHECKPOINT_FORMAT,
            "step": step,
            "param_names": list(self.params),
            "config": self.config_dict(),
        }
        arrays["_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    def load_checkpoint(self, path, optimizer=None) -> dict:
        """Restore parameters (and optimizer state); returns metadata."""
        try:
            archive = np.load(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        if "_meta" not in archive:
            raise DataError(f"checkpoint {path} has no metadata entry")
        meta = json.loads(bytes(archive["_meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(
                f"checkpoint format {meta.get('format')} unsupported (expected {CHECKPOINT_FORMAT})"
            )
        for name, tensor in self.params.items():
            if name not in archive:
                raise DataError(f"checkpoint {path} is missing parameter '{name}'")
            arr = archive[name]
            if arr.shape != tensor.data.shape:
                raise DataError(
                    f"parameter '{name}' has shape {arr.shape}, expected {tensor.data.shape}"
                )
            tensor.data = arr.astype(np.float64).copy()
        if optimizer is not None:
            optimizer.load_state_arrays({k: archive[k] for k in archive.files
                                         if k.startswith("opt.")})
        return meta
