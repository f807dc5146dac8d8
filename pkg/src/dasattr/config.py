"""Run configuration: dataclasses persisted as `key = value` text with section headers."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from . import ddpm
from .errors import ConfigurationError
from .pipeline import METHODS, FeatureConfig

DEFAULT_LAMBDA_GRID = tuple(10.0 ** e for e in range(-6, 7))


@dataclass
class DataConfig:
    name: str = "gauss2"
    seed: int = 0
    n: int = 200
    val_targets: int = 50
    gen_targets: int = 50
    holdout_targets: int = 10


@dataclass
class MethodConfig:
    methods: tuple = ("das", "trak", "dtrak:simple_loss", "dtrak:square_norm", "raw_dot", "raw_cos", "random")
    lam: str = "sweep"                       # a number or "sweep"
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID

    def fixed_lambda(self):
        return None if self.lam == "sweep" else float(self.lam)


@dataclass
class LdsConfig:
    subsets: int = 32
    fraction: float = 0.5
    seeds_per_subset: int = 3
    master_seed: int = 0
    gt_timesteps: int = 100
    gt_draws: int = 3


@dataclass
class CounterfactualConfig:
    top_k: int = 20
    targets: int = 10
    sample_steps: int = 50
    methods: tuple = ("das", "dtrak:square_norm")


@dataclass
class ToyExpConfig:
    pairs: int = 60
    removal_fraction: float = 0.2
    sample_steps: int = 50


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: ddpm.TrainConfig = field(default_factory=ddpm.TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    methods: MethodConfig = field(default_factory=MethodConfig)
    lds: LdsConfig = field(default_factory=LdsConfig)
    counterfactual: CounterfactualConfig = field(default_factory=CounterfactualConfig)
    toyexp: ToyExpConfig = field(default_factory=ToyExpConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def for_dataset(cls, name: str, seed: int = 0) -> "RunConfig":
        """Tuned defaults for each bundled dataset."""
        cfg = cls(data=DataConfig(name=name))
        if name == "gauss2":
            cfg.train = ddpm.TrainConfig(epochs=3000, lr=0.05, hidden=(32, 32))
            cfg.features = FeatureConfig(k=0)
        elif name == "blobs8":
            cfg.train = ddpm.TrainConfig(epochs=3000, lr=0.01, hidden=(24, 24), skip_variance=0.01)
            cfg.features = FeatureConfig(k=128)
        else:
            raise ConfigurationError(f"no defaults for dataset {name!r}")
        return cfg.with_seed(seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with one master seed driving data, training and subset sampling."""
        out = from_text(to_text(self))
        out.data.seed = seed
        out.train.seed = seed
        out.lds.master_seed = seed
        out.output.dir = f"runs/{out.data.name}-{seed}"
        return out

    def validate(self):
        self.train.validate()
        unknown = [m for m in self.methods.methods if m not in METHODS]
        unknown += [m for m in self.counterfactual.methods if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown methods: {', '.join(unknown)}")
        if self.methods.lam != "sweep":
            try:
                if float(self.methods.lam) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigurationError("lambda must be 'sweep' or a non-negative number") from None
        if self.features.timesteps > self.train.num_timesteps:
            raise ConfigurationError("feature timesteps exceed the number of diffusion steps")
        return self

    def hash(self) -> str:
        return hashlib.sha256(to_text(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# text format

_SECTIONS = ("data", "train", "features", "methods", "lds", "counterfactual", "toyexp", "output")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def _parse(text: str, default, name: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            sample = default[0] if default else ""
            return tuple(_parse(s, sample, name) for s in items)
        if default is None:
            return None if text.lower() == "none" else text
        return text
    except ValueError:
        raise ConfigurationError(f"cannot parse {name} = {text!r}") from None


def to_text(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                           if f.name != "mask"}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        defaults = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
        updates = {}
        for key, text_value in parser[section].items():
            if key not in defaults or key == "mask":
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            updates[key] = _parse(text_value, defaults[key], f"{section}.{key}")
        setattr(cfg, section, dataclasses.replace(obj, **updates))
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return from_text(path.read_text()).validate()


def save(path, cfg: RunConfig):
    Path(path).write_text(to_text(cfg))
