"""Run configuration: one flat key = value namespace over the dataclasses.

Files look like

    # comments and blank lines are fine
    model.embed_dim = 64
    proxy.mode = progressive
    train.steps = 400

Every key maps onto a field of one of the section dataclasses; unknown
keys and unparseable values fail before any compute starts. The same
schema drives --set overrides and the canonical echo written into each
run directory, so a run can always be reproduced from its echo file.
"""

from dataclasses import dataclass, field, fields

from .backbone import ModelConfig
from .data import SynthConfig
from .enhance import CemConfig
from .errors import ConfigError
from .losses import LossConfig
from .proxy import ProxyConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class OptimConfig:
    lr: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class TrainConfig:
    steps: int = 400
    p: int = 4
    k: int = 8
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 means final checkpoint only

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"train.steps must be positive, got {self.steps}")
        if self.log_every < 1:
            raise ConfigError(f"train.log_every must be positive, got {self.log_every}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"train.checkpoint_every must be nonnegative")


@dataclass
class EvalConfig:
    metric: str = "euclidean"
    max_rank: int = 20
    modes: str = "rgb,nir,tir,proxy,rgb+nir+tir,rgb+nir+tir+proxy"

    def validate(self) -> None:
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"eval.metric must be euclidean or cosine, got '{self.metric}'")
        if self.max_rank < 1:
            raise ConfigError(f"eval.max_rank must be positive, got {self.max_rank}")
        parse_modes(self.modes)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.proxy.validate()
        self.cem.validate()
        self.loss.validate()
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        if self.optim.lr <= 0:
            raise ConfigError(f"optim.lr must be positive, got {self.optim.lr}")
        if not 0.0 <= self.optim.momentum < 1.0:
            raise ConfigError(f"optim.momentum must be in [0, 1), got {self.optim.momentum}")
        if self.optim.weight_decay < 0:
            raise ConfigError(f"optim.weight_decay must be nonnegative")


def parse_modes(spec: str):
    """'rgb,rgb+nir+tir' -> [('rgb',), ('rgb', 'nir', 'tir')]."""
    modes = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            raise ConfigError(f"empty mode in eval.modes '{spec}'")
        parts = tuple(p.strip() for p in chunk.split("+"))
        for p in parts:
            if p not in ("rgb", "nir", "tir", "proxy"):
                raise ConfigError(f"unknown branch '{p}' in eval mode '{chunk}'")
        if len(set(parts)) != len(parts):
            raise ConfigError(f"duplicate branch in eval mode '{chunk}'")
        modes.append(parts)
    return modes


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            sep = "x" if "x" in raw else ","
            parts = [int(p) for p in raw.split(sep)]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} integers")
            return tuple(parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str) -> dict:
    """key = value lines to a flat string dict; duplicates are an error."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.rstrip()}'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def build_run_config(overrides: dict = None) -> RunConfig:
    """Defaults plus overrides; every key is checked against the schema."""
    cfg = RunConfig()
    for key, raw in (overrides or {}).items():
        if key.count(".") < 1:
            raise ConfigError(f"key '{key}' is not of the form section.field")
        section_name, field_name = key.split(".", 1)
        if not hasattr(cfg, section_name) or section_name == "validate":
            raise ConfigError(f"unknown config section '{section_name}' in '{key}'")
        section = getattr(cfg, section_name)
        names = {f.name for f in fields(section)}
        if field_name not in names:
            raise ConfigError(
                f"unknown key '{key}'; section {section_name} has {sorted(names)}"
            )
        default = getattr(section, field_name)
        setattr(section, field_name, _coerce(key, raw, default))
    cfg.validate()
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Canonical echo; parsing it back reproduces cfg exactly."""
    lines = []
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = "x".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{section_field.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
