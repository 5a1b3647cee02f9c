"""Run configuration: one sectioned key-value file plus command-line overrides.

Grammar (``configparser`` INI dialect, interpolation disabled)::

    # comment            ; comment
    [section]            one of: run, data, model, train, eval, sweep
    key = value          keys are the field names listed below

Lists are comma-separated (``hidden_dims = 64, 32``). ``none`` (any case) or
an empty value sets an optional field to unset. Unknown sections or keys are
errors. Overrides use ``--section.key=value`` and win over the file.

All randomness derives from ``run.seed`` unless a section's own ``seed`` is
given explicitly.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import SyntheticSpec
from .errors import ConfigError
from .trainer import ModelConfig, TrainConfig

PROTOCOLS = ("verification", "roc", "cmc", "histogram")


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    num_classes: int = 20
    input_dim: int = 16
    class_centre_scale: float = 3.0
    noise_sigma: float = 1.0
    tail_exponent: float = 1.5
    min_per_class: int = 10
    total_samples: int = 2000
    heldout_fraction: float = 0.3
    seed: typing.Optional[int] = None


@dataclass
class ModelSection:
    hidden_dims: typing.Tuple[int, ...] = (32,)
    embedding_dim: int = 8
    activation: str = "relu"
    init_scale: float = 1.0


@dataclass
class TrainSection:
    scheme: str = "II"
    alpha: float = 0.01
    beta: float = 0.1
    gamma: float = 0.5
    margin: float = 0.0
    coupling_mode: str = "coupled"
    pair_scope: str = "batch_classes"
    batch_size: int = 64
    iterations: int = 1500
    base_lr: float = 0.05
    lr_decay_every: int = 1000
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.0
    centre_init: str = "zeros"
    seed: typing.Optional[int] = None
    warm_start: typing.Optional[str] = None
    trace_every: int = 1


@dataclass
class EvalSection:
    protocols: typing.Tuple[str, ...] = ("verification", "roc", "cmc")
    split: str = "heldout"
    num_pos: int = 1000
    num_neg: int = 1000
    folds: int = 10
    metric: str = "sqeuclidean"
    far_levels: typing.Tuple[float, ...] = (0.001, 0.01, 0.1)
    probe_ids: int = 10
    distractors: int = 100
    hist_bins: typing.Optional[int] = None
    hist_lo: typing.Optional[float] = None
    hist_hi: typing.Optional[float] = None
    hist_split: str = "train"
    seed: typing.Optional[int] = None


@dataclass
class SweepSection:
    parameter: str = "M"
    values: typing.Tuple[float, ...] = (0.0,)
    seeds: typing.Tuple[int, ...] = (0,)


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "sweep": SweepSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # resolved views -----------------------------------------------------

    def data_seed(self) -> int:
        return self.run.seed if self.data.seed is None else self.data.seed

    def train_seed(self) -> int:
        return self.run.seed if self.train.seed is None else self.train.seed

    def eval_seed(self) -> int:
        return self.run.seed if self.eval.seed is None else self.eval.seed

    def synthetic_spec(self) -> SyntheticSpec:
        d = dataclasses.asdict(self.data)
        d["seed"] = self.data_seed()
        return SyntheticSpec(**d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**dataclasses.asdict(self.model))

    def train_config(self) -> TrainConfig:
        d = dataclasses.asdict(self.train)
        d["seed"] = self.train_seed()
        return TrainConfig(**d)

    def resolved(self) -> "RunConfig":
        """Copy with every derived seed filled in explicitly."""
        out = dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, seed=self.data_seed()),
            train=dataclasses.replace(self.train, seed=self.train_seed()),
            eval=dataclasses.replace(self.eval, seed=self.eval_seed()),
        )
        return out

    def validate(self):
        for p in self.eval.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"eval.protocols: unknown protocol {p!r}; choose from {PROTOCOLS}")
        if "histogram" in self.eval.protocols and None in (
            self.eval.hist_bins, self.eval.hist_lo, self.eval.hist_hi
        ):
            raise ConfigError("histogram protocol requires eval.hist_bins, eval.hist_lo and eval.hist_hi")
        if self.eval.metric not in ("sqeuclidean", "cosine"):
            raise ConfigError("eval.metric must be sqeuclidean or cosine")
        self.model_config()
        self.train_config()
        return self


def _coerce(raw: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    text = raw.strip()
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(text, inner, where)
    if origin is tuple:
        inner = args[0]
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        return tuple(_coerce(t, inner, where) for t in items)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _apply(cfg: RunConfig, section: str, key: str, raw: str, origin: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    if key not in hints:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    value = _coerce(raw, hints[key], f"{origin}: {section}.{key}")
    sub = dataclasses.replace(getattr(cfg, section), **{key: value})
    return dataclasses.replace(cfg, **{section: sub})


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg = _apply(cfg, section, key, raw, origin)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config_text(text, str(path))
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg.validate()


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    """Apply one ``--section.key=value`` (leading dashes optional)."""
    body = item[2:] if item.startswith("--") else item
    if "=" not in body or "." not in body.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} must look like --section.key=value")
    lhs, raw = body.split("=", 1)
    section, key = lhs.split(".", 1)
    return _apply(cfg, section, key, raw, "override")


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file grammar; ``parse_config_text`` reads it back."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            if v is None:
                text = "none"
            elif isinstance(v, (tuple, list)):
                text = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{k} = {text}")
        lines.append("")
    return "\n".join(lines)
