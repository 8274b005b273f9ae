"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


ABLATIONS = ("dis", "m", "em", "same")


@dataclass
class Ablation:
    disable_dis: bool = False
    disable_m: bool = False
    disable_em: bool = False
    same_classifier_variant: bool = False
    # Steps B and C replaced by Step A: the source-only baseline.
    source_only: bool = False

    @classmethod
    def from_names(cls, names) -> "Ablation":
        ab = cls()
        for name in names:
            key = {"dis": "disable_dis", "m": "disable_m", "em": "disable_em",
                   "same": "same_classifier_variant", "source": "source_only"}.get(name)
            if key is None:
                raise ConfigError(f"unknown ablation {name!r}; expected one of dis, m, em, same, source")
            setattr(ab, key, True)
        return ab


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    sigma: float = 0.03
    lr: float = 0.001
    pretrain_lr: float = 0.001
    pretrain_iters: int = 2000
    train_iters: int = 2000
    batch_size: int = 64
    num_projections: int = 128
    proto_max_steps: int = 3
    temperature: float = 1.0
    d_hidden: int = 1024
    d_embed: int = 512
    dropout_retain: float = 0.5
    eval_every: int = 50
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.pretrain_iters < 0 or self.train_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        for name in ("batch_size", "num_projections", "proto_max_steps", "d_hidden", "d_embed", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 < self.dropout_retain <= 1.0:
            raise ConfigError("dropout_retain must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        ab = d.pop("ablation", {}) or {}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(ablation=Ablation(**ab), **d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        if "ablation" in kw and isinstance(kw["ablation"], Ablation):
            kw["ablation"] = asdict(kw["ablation"])
        d.update(kw)
        return TrainConfig.from_dict(d)


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines. ``[section]`` headers are allowed and ignored,
    except ``[ablation]``, whose keys set the ablation switches."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    try:
        cp.read_string("[DEFAULT_TOP]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    types = {f.name: f.type for f in fields(TrainConfig)}
    kinds = {"float": float, "int": int, "bool": bool}
    vals: dict = {}
    ab: dict = {}
    ab_fields = {f.name for f in fields(Ablation)}
    for section in cp.sections():
        for key, raw in cp.items(section, raw=True):
            if section == "ablation" or key in ab_fields:
                if key not in ab_fields:
                    raise ConfigError(f"{source}: unknown ablation switch {key!r}")
                ab[key] = _coerce(key, raw, bool)
            elif key in types and key != "ablation":
                vals[key] = _coerce(key, raw, kinds[types[key]])
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")
    try:
        return TrainConfig(ablation=Ablation(**ab), **vals)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config_text(text, source=str(path))


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "ablation":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    lines.append("")
    lines.append("[ablation]")
    for f in fields(Ablation):
        lines.append(f"{f.name} = {str(getattr(cfg.ablation, f.name)).lower()}")
    return "\n".join(lines) + "\n"
