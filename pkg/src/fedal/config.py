"""Run configuration and its INI-style file format.

Sections map onto the nested dataclasses::

    [run]        RunConfig scalars (rounds, lam, alpha, ...)
    [ablations]  dbe, gbe_correction, gbe_coreset, bias_alignment
    [data]       DataConfig
    [model]      BackboneConfig minus n_tokens (derived from length / patch_len)

Every key must name a field; anything else is a :class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from fedal import data as D
from fedal.errors import ConfigError
from fedal.model import BackboneConfig

ABLATIONS = ("dbe", "gbe_correction", "gbe_coreset", "bias_alignment")


@dataclass(frozen=True)
class Ablations:
    dbe: bool = True
    gbe_correction: bool = True
    gbe_coreset: bool = True
    bias_alignment: bool = True

    @classmethod
    def fedavg(cls) -> "Ablations":
        return cls(False, False, False, False)

    @property
    def fedavg_mode(self) -> bool:
        return not any(getattr(self, a) for a in ABLATIONS)


@dataclass(frozen=True)
class DataConfig:
    preset: str = "di2"
    n_clients: int = 4
    seqs_per_client: int = 32
    length: int = 256
    eval_seqs_per_domain: int = 32

    def __post_init__(self):
        D.preset_domains(self.preset)
        for name in ("n_clients", "seqs_per_client", "length", "eval_seqs_per_domain"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")

    def domains(self):
        return D.preset_domains(self.preset)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    patch_len: int = 16
    dropout: float = 0.0
    ff_mult: int = 4


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 30
    local_epochs: int = 2
    join_ratio: float = 1.0
    lam: float = 0.1
    alpha: float = 0.7
    beta: float = 0.1
    epsilon: float = 0.5
    mu: float = 0.5
    tau: int = 4
    K: int = 16
    mask_ratio: float = 0.75
    lr: float = 0.05
    seed: int = 0
    batch_size: int = 8
    coreset_steps: int = 25
    coreset_eta: float = 0.05
    server_epochs: int | None = None  # None: same as local_epochs
    server_lr: float | None = None  # None: same as lr
    warmup_lr: float = 0.0
    drift_norm: str = "clients"  # "sum": plain summed drift; "clients": divided by n_clients
    freeze_global_bias: bool = False
    loss_on_all_tokens: bool = False
    workers: int = 1
    ablations: Ablations = field(default_factory=Ablations)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        checks = [
            (self.rounds >= 0, "rounds must be >= 0"),
            (self.local_epochs >= 0, "local_epochs must be >= 0"),
            (0.0 < self.join_ratio <= 1.0, "join_ratio must lie in (0, 1]"),
            (self.lam >= 0, "lam must be >= 0"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (self.beta > 0, "beta must be > 0"),
            (self.epsilon >= 0, "epsilon must be >= 0"),
            (0.0 <= self.mu <= 1.0, "mu must lie in [0, 1]"),
            (self.tau >= 1, "tau must be >= 1"),
            (self.K >= 1, "K must be >= 1"),
            (0.0 <= self.mask_ratio <= 1.0, "mask_ratio must lie in [0, 1]"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.coreset_steps >= 0, "coreset_steps must be >= 0"),
            (self.coreset_eta >= 0, "coreset_eta must be >= 0"),
            (self.server_epochs is None or self.server_epochs >= 0, "server_epochs must be >= 0"),
            (self.server_lr is None or self.server_lr >= 0, "server_lr must be >= 0"),
            (self.warmup_lr >= 0, "warmup_lr must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        checks.append((self.drift_norm in ("sum", "clients"), "drift_norm must be 'sum' or 'clients'"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.data.length % self.model.patch_len:
            raise ConfigError(f"data.length {self.data.length} not divisible by model.patch_len")
        n_tokens = self.data.length // self.model.patch_len
        if self.tau > n_tokens:
            raise ConfigError(f"tau={self.tau} exceeds the {n_tokens} tokens per sequence")
        if self.ablations.gbe_coreset and self.K > self.data.seqs_per_client:
            raise ConfigError(f"K={self.K} exceeds seqs_per_client={self.data.seqs_per_client}")
        self.backbone  # validates the model section

    @property
    def backbone(self) -> BackboneConfig:
        m = self.model
        return BackboneConfig(m.n_layers, m.d_model, m.n_heads, m.patch_len,
                              self.data.length // m.patch_len, m.dropout, m.ff_mult)

    @property
    def fine_tune_epochs(self) -> int:
        return self.local_epochs if self.server_epochs is None else self.server_epochs

    @property
    def fine_tune_lr(self) -> float:
        return self.lr if self.server_lr is None else self.server_lr

    @property
    def effective_lam(self) -> float:
        return self.lam if (self.ablations.dbe and self.ablations.bias_alignment) else 0.0

    def with_ablations(self, **toggles) -> "RunConfig":
        return replace(self, ablations=replace(self.ablations, **toggles))

    def fedavg(self) -> "RunConfig":
        return replace(self, ablations=Ablations.fedavg())

    def toggled(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        return self.with_ablations(**{name: not getattr(self.ablations, name)})

    def with_data(self, **kw) -> "RunConfig":
        return replace(self, data=replace(self.data, **kw))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sub = {"ablations": Ablations, "data": DataConfig, "model": ModelConfig}
        for key, typ in sub.items():
            if key in d:
                d[key] = typ(**d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# INI reading and writing

_SECTIONS = {"run": RunConfig, "ablations": Ablations, "data": DataConfig, "model": ModelConfig}
_NESTED = ("ablations", "data", "model")


def _field_types(cls) -> dict[str, object]:
    defaults = cls()
    return {f.name: getattr(defaults, f.name) for f in fields(cls) if f.name not in _NESTED}


def _coerce(section: str, key: str, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if default is None:
            if text.lower() in ("", "none"):
                return None
            return float(text) if any(c in text for c in ".eE") else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    parts: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = _field_types(_SECTIONS[section])
        values = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(section, key, raw, known[key])
        parts[section] = values
    try:
        nested = {s: _SECTIONS[s](**parts.get(s, {})) for s in _NESTED}
        return RunConfig(**parts.get("run", {}), **nested)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(config: RunConfig) -> str:
    """Serialise every field, so the snapshot re-parses to an equal config."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    objs = {"run": config, "ablations": config.ablations, "data": config.data, "model": config.model}
    for section, obj in objs.items():
        cp[section] = {
            f.name: "none" if getattr(obj, f.name) is None else str(getattr(obj, f.name))
            for f in fields(obj) if f.name not in _NESTED
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
