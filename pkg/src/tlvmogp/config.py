"""Training configuration and its INI-style file format.

Keys live in ``[model]``, ``[train]``, ``[likelihood]`` and ``[eval]``
sections and map one-to-one onto :class:`TrainConfig` fields (``model.variant``
is ``variant`` under ``[model]``). A ``[split]`` section may sit in the same
file and is read by :func:`load_split_spec`. Synthetic generator specs use a
single ``[synth]`` section. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from typing import Any


class ConfigError(ValueError):
    pass


# (section, key) -> TrainConfig attribute
SCHEMA = {
    ("model", "variant"): "variant",
    ("model", "n_blocks"): "n_blocks",
    ("model", "embed_dim"): "embed_dim",
    ("model", "spectral_norm"): "spectral_norm",
    ("model", "sn_bound"): "sn_bound",
    ("model", "entry_bound"): "entry_bound",
    ("model", "power_iters"): "power_iters",
    ("model", "activation"): "activation",
    ("model", "latent_dim"): "latent_dim",
    ("model", "n_inducing"): "n_inducing",
    ("model", "jitter"): "jitter",
    ("model", "dense_latent"): "dense_latent",
    ("model", "prior_scale"): "prior_scale",
    ("model", "whiten"): "whiten",
    ("model", "init_lengthscale"): "init_lengthscale",
    ("model", "init_outputscale"): "init_outputscale",
    ("train", "batch_inputs"): "batch_inputs",
    ("train", "batch_outputs"): "batch_outputs",
    ("train", "epochs"): "epochs",
    ("train", "lr"): "lr",
    ("train", "beta1"): "beta1",
    ("train", "beta2"): "beta2",
    ("train", "adam_eps"): "adam_eps",
    ("train", "seed"): "seed",
    ("train", "bound"): "bound",
    ("train", "mc_samples"): "mc_samples",
    ("train", "spherical_v"): "spherical_v",
    ("likelihood", "kind"): "likelihood",
    ("likelihood", "noise"): "noise",
    ("likelihood", "dispersion"): "dispersion",
    ("likelihood", "km"): "km",
    ("likelihood", "scale"): "scale",
    ("likelihood", "quad_nodes"): "quad_nodes",
    ("likelihood", "train_dispersion"): "train_dispersion",
    ("eval", "samples"): "eval_samples",
}
ATTR_TO_KEY = {attr: f"{sec}.{key}" for (sec, key), attr in SCHEMA.items()}


@dataclass
class TrainConfig:
    # model
    variant: str = "rcnn"
    n_blocks: int = 3
    embed_dim: int = 0
    spectral_norm: bool = True
    sn_bound: float = 1.0
    entry_bound: float = 1.0
    power_iters: int = 1
    activation: str = "tanh"
    latent_dim: int = 2
    n_inducing: int = 50
    jitter: float = 1e-6
    dense_latent: bool = False
    prior_scale: float = 1.0
    whiten: bool = True
    init_lengthscale: float = 1.0
    init_outputscale: float = 1.0
    # train; batch sizes of 0 mean "all inputs" / "all outputs"
    batch_inputs: int = 0
    batch_outputs: int = 0
    epochs: int = 100
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    bound: str = "standard"
    mc_samples: int = 1
    spherical_v: float = 1.0
    # likelihood
    likelihood: str = "gaussian"
    noise: float = 0.1
    dispersion: float = 1.0
    km: float = 0.1
    scale: float = 1.0
    quad_nodes: int = 20
    train_dispersion: bool = True
    # eval
    eval_samples: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("train.lr must be non-negative")
        if self.batch_inputs < 0 or self.batch_outputs < 0:
            raise ConfigError("batch sizes must be positive (0 selects the full set)")
        if self.bound not in ("standard", "tighter"):
            raise ConfigError(f"train.bound must be standard or tighter, got {self.bound!r}")
        if self.likelihood not in ("gaussian", "zinb"):
            raise ConfigError(f"likelihood.kind must be gaussian or zinb, got {self.likelihood!r}")
        if self.variant not in ("rcnn", "identity", "blockwise"):
            raise ConfigError(f"model.variant must be rcnn, identity or blockwise, got {self.variant!r}")
        if self.n_inducing < 1 or self.mc_samples < 1 or self.eval_samples < 1:
            raise ConfigError("n_inducing, mc_samples and eval.samples must be >= 1")
        if self.sn_bound <= 0 or self.power_iters < 1:
            raise ConfigError("model.sn_bound must be positive and model.power_iters >= 1")

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(attr: str, raw: str, where: str):
    return _coerce_field(_TYPES[attr], raw, where)


def parse_section_items(section: str, items, where: str) -> dict[str, Any]:
    out = {}
    for key, raw in items:
        attr = SCHEMA.get((section, key))
        if attr is None:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        out[attr] = _coerce(attr, raw, f"{where}: {section}.{key}")
    return out


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    return cp


def parse_config_text(text: str, where: str = "<config>") -> TrainConfig:
    cp = _parser()
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from None
    values: dict[str, Any] = {}
    for section in cp.sections():
        if section == "split":
            parse_dataclass_section(cp, "split", _split_cls(), where)
            continue
        if section not in {s for s, _ in SCHEMA}:
            raise ConfigError(f"{where}: unknown section [{section}]")
        values.update(parse_section_items(section, cp.items(section), where))
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), where=path)


def dump_config(cfg: TrainConfig) -> str:
    sections: dict[str, list[str]] = {}
    values = asdict(cfg)
    for (section, key), attr in SCHEMA.items():
        v = values[attr]
        v = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        sections.setdefault(section, []).append(f"{key} = {v}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())


def _split_cls():
    from .data import SplitSpec
    return SplitSpec


def _coerce_field(kind: str, raw: str, where: str):
    raw = raw.strip()
    if kind.startswith("tuple"):
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    try:
        if kind == "bool":
            if raw.lower() in ("true", "yes", "on", "1"):
                return True
            if raw.lower() in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_dataclass_section(cp: configparser.ConfigParser, section: str, cls, where: str):
    """Build ``cls`` from the keys of ``[section]``; keys must be field names of ``cls``."""
    kinds = {f.name: str(f.type) for f in fields(cls)}
    values = {}
    if cp.has_section(section):
        for key, raw in cp.items(section):
            if key not in kinds:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            values[key] = _coerce_field(kinds[key], raw, f"{where}: {section}.{key}")
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(f"{where}: [{section}] {exc}") from None


def _read_sections(path: str, allowed: set[str]) -> configparser.ConfigParser:
    cp = _parser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_string(fh.read(), source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"{path}: unknown section [{section}]")
    return cp


def load_split_spec(path: str):
    """``SplitSpec`` from the ``[split]`` section of a config file (defaults if absent)."""
    cp = _read_sections(path, {s for s, _ in SCHEMA} | {"split"})
    return parse_dataclass_section(cp, "split", _split_cls(), path)


def load_synth_spec(path: str):
    from .data import SynthSpec
    cp = _read_sections(path, {"synth"})
    return parse_dataclass_section(cp, "synth", SynthSpec, path)
