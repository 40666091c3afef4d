"""Sectioned key-value run configuration (INI syntax) with command-line overrides.

Sections map onto the config dataclasses::

    [model]    ModelConfig fields (votes, frontend, use_fgfm, ...)
    [encoder]  EncoderConfig fields
    [data]     DataConfig fields
    [train]    TrainConfig fields
    [ablate]   votes, variants, seeds (comma lists)

Overrides use ``section.key=value`` and always win over file values.
"""
import configparser
import dataclasses
from dataclasses import dataclass, field

from .encoder import EncoderConfig
from .errors import ConfigError, UsageError
from .model import ModelConfig
from .training import DataConfig, TrainConfig

ABLATION_VARIANTS = ("full", "no_enhancement", "no_daff", "baseline")


@dataclass
class AblateConfig:
    votes: tuple = (2, 4)
    variants: tuple = ("full", "no_enhancement", "no_daff")
    seeds: tuple = (0, 1, 2)


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def model_config(self, **changes):
        values = dict(self.model)
        values.update(changes)
        return ModelConfig(encoder=dataclasses.replace(self.encoder), **values)


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "encoder"}
_SECTIONS = {
    "encoder": EncoderConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "ablate": AblateConfig,
}


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(s) for s in items)
    return raw


def _defaults(section):
    if section == "model":
        base = ModelConfig()
        return {name: getattr(base, name) for name in _MODEL_FIELDS}
    cls = _SECTIONS[section]
    base = cls()
    return {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}


def valid_keys():
    return {f"{s}.{k}" for s in ("model", *_SECTIONS) for k in _defaults(s)}


def parse_overrides(pairs):
    """``["section.key=value", ...]`` -> ``{(section, key): raw}``; unknown keys are usage errors."""
    keys = valid_keys()
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not of the form section.key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in keys:
            raise UsageError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        out[(section, name)] = raw
    return out


def load_config(path=None, overrides=None):
    values = {s: {} for s in ("model", *_SECTIONS)}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            for name, raw in parser.items(section):
                values[section][name] = raw
    for (section, name), raw in (overrides or {}).items():
        values[section][name] = raw

    parsed = {}
    for section, items in values.items():
        defaults = _defaults(section)
        kwargs = {}
        for name, raw in items.items():
            if name not in defaults:
                raise ConfigError(f"unknown config key {section}.{name}")
            try:
                kwargs[name] = _parse_value(raw, defaults[name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{name}: {exc}") from exc
        parsed[section] = kwargs

    cfg = RunConfig(
        model=parsed["model"],
        encoder=EncoderConfig(**parsed["encoder"]),
        data=DataConfig(**parsed["data"]),
        train=TrainConfig(**parsed["train"]),
        ablate=AblateConfig(**parsed["ablate"]),
    )
    cfg.model_config()  # validate eagerly
    bad = [v for v in cfg.ablate.variants if v not in ABLATION_VARIANTS]
    if bad:
        raise ConfigError(f"unknown ablation variants {bad}")
    return cfg


def dump_config(cfg, path):
    parser = configparser.ConfigParser()
    sections = {"model": cfg.model_config().to_dict()}
    sections["model"].pop("encoder")
    sections["encoder"] = dataclasses.asdict(cfg.encoder)
    sections["data"] = dataclasses.asdict(cfg.data)
    sections["train"] = dataclasses.asdict(cfg.train)
    sections["ablate"] = dataclasses.asdict(cfg.ablate)
    for name, items in sections.items():
        parser[name] = {k: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
                        for k, v in items.items()}
    with open(path, "w") as fh:
        parser.write(fh)
