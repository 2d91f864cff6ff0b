"""Synthetic multi-spectral vehicle imagery, storage layout, batching.

Each identity owns a procedural signature (body color, accent shapes,
heat profile) drawn from its own seeded stream. A sample renders that
signature with per-sample pose jitter and camera shading into three
aligned spectra:

rgb   color reflectance render
nir   single-channel weighted reflectance response, gamma-compressed
tir   smoothed heat silhouette, independent of illumination

Degradations model capture failure, not scene change: ``flare``
washes rgb and nir toward a bright veil and leaves tir untouched
bit for bit; ``low_light`` darkens and noises rgb only. Every random
latent is drawn before any degradation is applied, so one seed yields
the same underlying scene at every severity.

On disk: <root>/<split>/<spectrum>/<id>_c<cam>_<seq>.png plus one
meta.json per split echoing the config and per-sample severities.
"""

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError

SPECTRA = ("rgb", "nir", "tir")
SCENARIOS = ("normal", "flare", "low_light", "mixed")

_NIR_WEIGHTS = np.array([0.3, 0.5, 0.2])
_NIR_GAMMA = 0.8
_FILE_RE = re.compile(r"^(\d+)_c(\d+)_(\d+)\.png$")


@dataclass
class SynthConfig:
    n_identities: int = 8
    samples_per_identity: int = 8
    n_cams: int = 2
    image_hw: tuple = (32, 64)
    scenario: str = "normal"
    severity_lo: float = 0.4
    severity_hi: float = 0.9
    seed: int = 0
    # shifts sample numbering so a second split captures the same
    # identities in fresh poses (seq feeds the per-sample latent stream)
    seq_offset: int = 0

    def validate(self) -> None:
        if self.n_identities < 1 or self.samples_per_identity < 1:
            raise ConfigError("need at least one identity and one sample per identity")
        if self.n_cams < 1:
            raise ConfigError(f"n_cams must be positive, got {self.n_cams}")
        if self.seq_offset < 0:
            raise ConfigError(f"seq_offset must be nonnegative, got {self.seq_offset}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got '{self.scenario}'")
        if not 0.0 <= self.severity_lo <= self.severity_hi <= 1.0:
            raise ConfigError(
                f"severity range [{self.severity_lo}, {self.severity_hi}] must be ordered in [0, 1]"
            )
        h, w = self.image_hw
        if h < 16 or w < 16:
            raise ConfigError(f"images below 16x16 lose the vehicle entirely, got {h}x{w}")


# ---------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------

def _identity_signature(seed: int, identity: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11, identity]))
    n_accents = int(rng.integers(2, 5))
    return {
        "body_color": rng.uniform(0.15, 0.95, size=3),
        "cabin_color": rng.uniform(0.1, 0.85, size=3),
        "body_hw": rng.uniform(0.27, 0.37),
        "body_hh": rng.uniform(0.12, 0.2),
        "cabin_cx": rng.uniform(0.4, 0.55),
        "cabin_hw": rng.uniform(0.12, 0.2),
        "wheel_r": rng.uniform(0.05, 0.09),
        "body_heat": rng.uniform(0.3, 0.65),
        "engine_heat": rng.uniform(0.7, 1.0),
        "accents": [
            {
                "cx": rng.uniform(0.25, 0.75),
                "cy": rng.uniform(0.45, 0.7),
                "rx": rng.uniform(0.05, 0.13),
                "ry": rng.uniform(0.04, 0.1),
                "color": rng.uniform(0.05, 1.0, size=3),
                "heat": rng.uniform(0.25, 0.95),
                "round": bool(rng.integers(0, 2)),
            }
            for _ in range(n_accents)
        ],
    }


def _sample_latents(cfg: SynthConfig, identity: int, seq: int) -> dict:
    """Every draw happens here, in one fixed order, degraded or not."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13, identity, seq]))
    h, w = cfg.image_hw
    return {
        "dx": rng.uniform(-0.03, 0.03),
        "dy": rng.uniform(-0.025, 0.025),
        "scale": rng.uniform(0.93, 1.04),
        "severity": rng.uniform(cfg.severity_lo, cfg.severity_hi),
        "mixed_pick": "flare" if rng.integers(0, 2) == 0 else "low_light",
        "flare_cx": rng.uniform(0.25, 0.75),
        "flare_cy": rng.uniform(0.1, 0.4),
        "noise_rgb": rng.normal(size=(3, h, w)) * 0.01,
        "noise_nir": rng.normal(size=(h, w)) * 0.01,
        "noise_tir": rng.normal(size=(h, w)) * 0.005,
        "lowlight_noise": rng.normal(size=(3, h, w)),
    }


def _render_scene(cfg: SynthConfig, sig: dict, lat: dict):
    """Reflectance (3, h, w) and heat (h, w) fields in [0, 1]."""
    h, w = cfg.image_hw
    yy, xx = np.mgrid[0:h, 0:w]
    fx = (xx / w - 0.5 - lat["dx"]) / lat["scale"] + 0.5
    fy = (yy / h - 0.5 - lat["dy"]) / lat["scale"] + 0.5

    reflectance = np.full((3, h, w), 0.12)
    reflectance += 0.03 * (fy[None] < 0.3)  # faint horizon band
    heat = np.full((h, w), 0.05)

    def rect(cx, cy, hw_, hh):
        return (np.abs(fx - cx) <= hw_) & (np.abs(fy - cy) <= hh)

    def ellipse(cx, cy, rx, ry):
        return ((fx - cx) / rx) ** 2 + ((fy - cy) / ry) ** 2 <= 1.0

    body = rect(0.5, 0.58, sig["body_hw"], sig["body_hh"])
    cabin = rect(sig["cabin_cx"], 0.38, sig["cabin_hw"], 0.1)
    windows = rect(sig["cabin_cx"], 0.37, sig["cabin_hw"] * 0.7, 0.06)
    wheel_l = ellipse(0.27, 0.76, sig["wheel_r"], sig["wheel_r"] * 1.4)
    wheel_r = ellipse(0.73, 0.76, sig["wheel_r"], sig["wheel_r"] * 1.4)
    engine = rect(0.72, 0.56, 0.1, 0.1)

    for c in range(3):
        ch = reflectance[c]
        ch[body] = sig["body_color"][c]
        ch[cabin] = sig["cabin_color"][c]
        ch[windows] = 0.08
        ch[wheel_l | wheel_r] = 0.06
    heat[body] = sig["body_heat"]
    heat[wheel_l | wheel_r] = 0.55
    heat[engine & body] = sig["engine_heat"]

    for acc in sig["accents"]:
        mask = (ellipse if acc["round"] else rect)(acc["cx"], acc["cy"], acc["rx"], acc["ry"])
        mask &= body
        for c in range(3):
            reflectance[c][mask] = acc["color"][c]
        heat[mask] = acc["heat"]
    return reflectance, heat


def _cam_gains(cam: int) -> np.ndarray:
    # fixed per-camera shading so cameras are tellable apart
    return np.array([1.0 - 0.07 * cam, 1.0 - 0.035 * cam, 1.0 - 0.01 * cam])


def _apply_flare(rgb, nir, lat, severity, hw):
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((xx / w - lat["flare_cx"]) ** 2 + (yy / h - lat["flare_cy"]) ** 2)
    sigma2 = (0.12 + 0.3 * severity) ** 2
    blob = np.exp(-r2 / (2.0 * sigma2))
    veil = np.clip(0.95 * severity * blob + 0.55 * severity, 0.0, 1.0)
    rgb = rgb * (1.0 - veil[None]) + 0.96 * veil[None]
    nir = nir * (1.0 - 0.9 * veil) + 0.93 * (0.9 * veil)
    return rgb, nir


def _apply_low_light(rgb, lat, severity):
    dark = rgb * (1.0 - 0.85 * severity)
    return dark + lat["lowlight_noise"] * (0.02 + 0.06 * severity)


def render_sample(cfg: SynthConfig, identity: int, cam: int, seq: int):
    """All three spectra for one sample; returns (arrays dict, record)."""
    sig = _identity_signature(cfg.seed, identity)
    lat = _sample_latents(cfg, identity, seq)
    reflectance, heat = _render_scene(cfg, sig, lat)

    rgb = reflectance * _cam_gains(cam)[:, None, None] + lat["noise_rgb"]
    nir_flat = np.einsum("c,chw->hw", _NIR_WEIGHTS, reflectance)
    nir = np.clip(nir_flat, 0.0, 1.0) ** _NIR_GAMMA + lat["noise_nir"]
    tir = gaussian_filter(heat, sigma=1.2) + lat["noise_tir"]

    applied = cfg.scenario
    if applied == "mixed":
        applied = lat["mixed_pick"]
    severity = lat["severity"] if applied != "normal" else 0.0
    if applied == "flare":
        rgb, nir = _apply_flare(rgb, nir, lat, severity, cfg.image_hw)
    elif applied == "low_light":
        rgb = _apply_low_light(rgb, lat, severity)

    arrays = {
        "rgb": np.clip(rgb, 0.0, 1.0),
        "nir": np.clip(np.broadcast_to(nir, (3,) + nir.shape), 0.0, 1.0),
        "tir": np.clip(np.broadcast_to(tir, (3,) + tir.shape), 0.0, 1.0),
    }
    record = {"identity": identity, "cam": cam, "seq": seq,
              "severity": float(severity), "applied": applied}
    return arrays, record


def _to_png(arr: np.ndarray, path: Path) -> None:
    u8 = np.round(arr * 255.0).astype(np.uint8)  # (3, h, w)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


def generate(cfg: SynthConfig, out_root, split: str = "train"):
    """Render and write one split; returns the per-sample records."""
    cfg.validate()
    root = Path(out_root) / split
    for s in SPECTRA:
        (root / s).mkdir(parents=True, exist_ok=True)
    records = []
    for identity in range(cfg.n_identities):
        for j in range(cfg.samples_per_identity):
            seq = cfg.seq_offset + j
            cam = seq % cfg.n_cams
            arrays, record = render_sample(cfg, identity, cam, seq)
            stem = f"{identity:04d}_c{cam}_{seq:03d}.png"
            for s in SPECTRA:
                _to_png(arrays[s], root / s / stem)
            records.append(record)
    meta = {"config": asdict(cfg), "samples": records}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return records


# ---------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------

@dataclass
class Dataset:
    images: dict  # spectrum -> (n, 3, h, w) float64 in [0, 1]
    ids: np.ndarray
    cams: np.ndarray
    seqs: np.ndarray
    labels: np.ndarray  # ids remapped to 0..n_classes-1
    severities: np.ndarray
    applied: list
    n_classes: int
    label_of: dict = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.ids)


def _load_png(path: Path, image_hw) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if image_hw is not None and (img.height, img.width) != tuple(image_hw):
        img = img.resize((image_hw[1], image_hw[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_dataset(root, split: str, image_hw=None) -> Dataset:
    """Read one split back; fails loudly on anything missing or torn."""
    base = Path(root) / split
    rgb_dir = base / "rgb"
    if not rgb_dir.is_dir():
        raise DataError(f"no rgb directory at {rgb_dir}")
    entries = []
    for p in sorted(rgb_dir.iterdir()):
        m = _FILE_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2)), int(m.group(3)), p.name))
    if not entries:
        raise DataError(f"no samples matching <id>_c<cam>_<seq>.png under {rgb_dir}")
    entries.sort()

    severity_by_key, applied_by_key = {}, {}
    meta_path = base / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        for rec in meta.get("samples", []):
            key = (rec["identity"], rec["seq"])
            severity_by_key[key] = rec.get("severity", 0.0)
            applied_by_key[key] = rec.get("applied", "normal")

    stacks = {s: [] for s in SPECTRA}
    ids, cams, seqs, sevs, applied = [], [], [], [], []
    for identity, cam, seq, name in entries:
        for s in SPECTRA:
            path = base / s / name
            if not path.exists():
                raise DataError(f"sample {name} is missing its {s} image: {path}")
            stacks[s].append(_load_png(path, image_hw))
        ids.append(identity)
        cams.append(cam)
        seqs.append(seq)
        sevs.append(severity_by_key.get((identity, seq), 0.0))
        applied.append(applied_by_key.get((identity, seq), "normal"))

    ids = np.array(ids)
    uniq = np.unique(ids)
    label_of = {int(raw): dense for dense, raw in enumerate(uniq)}
    labels = np.array([label_of[int(i)] for i in ids])
    return Dataset(
        images={s: np.stack(stacks[s]) for s in SPECTRA},
        ids=ids,
        cams=np.array(cams),
        seqs=np.array(seqs),
        labels=labels,
        severities=np.array(sevs),
        applied=applied,
        n_classes=len(uniq),
        label_of=label_of,
    )


def query_gallery_split(ds: Dataset):
    """Deterministic split: per identity, the first sample seen on each
    camera is a query; everything else is gallery. Guarantees every
    query keeps at least one cross-camera gallery match when its
    identity appears on two or more cameras."""
    query, gallery = [], []
    seen = set()
    for i in np.argsort(ds.seqs, kind="stable"):
        key = (int(ds.ids[i]), int(ds.cams[i]))
        if key not in seen:
            seen.add(key)
            query.append(i)
        else:
            gallery.append(i)
    if not gallery:
        raise DataError("every sample became a query; need repeated (identity, camera) pairs")
    return np.array(sorted(query)), np.array(sorted(gallery))


# ---------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------

def pk_batches(labels: np.ndarray, p: int, k: int, rng: np.random.Generator):
    """One epoch of identity-balanced batches: p identities, k samples each.

    Identities are shuffled once per call; each contributes its samples
    shuffled, topped up with replacement when it owns fewer than k.
    Identities left over after the last full group of p are dropped.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if p < 2 or k < 2:
        raise ConfigError(f"need p >= 2 and k >= 2 for triplet mining, got p={p} k={k}")
    if len(uniq) < p:
        raise ConfigError(f"dataset has {len(uniq)} identities but batches need p={p}")
    order = rng.permutation(uniq)
    batches = []
    for start in range(0, len(order) - p + 1, p):
        chosen = order[start:start + p]
        idx = []
        for label in chosen:
            pool = np.flatnonzero(labels == label)
            take = rng.permutation(pool)[:k]
            if len(take) < k:
                extra = rng.choice(pool, size=k - len(take), replace=True)
                take = np.concatenate([take, extra])
            idx.append(take)
        batches.append(np.concatenate(idx))
    return batches
