"""Run configuration: one INI document with a section per module."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .codec import CodecConfig
from .errors import ConfigError
from .model import ModelConfig

__version__ = "0.1.0"


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"


@dataclass
class DataSection:
    root: str = "data/train"
    clips: int = 16
    frames: int = 17
    height: int = 64
    width: int = 64
    max_stride: int = 4
    eval_root: str = "data/eval"
    eval_clips: int = 8


@dataclass
class ModelSection:
    profile: str = "mini"
    schedule: str = "auto"


@dataclass
class TrainSection:
    stage1_steps: int = 500
    stage2_steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    depth_weight: float = 1.0
    checkpoint_every: int = 0
    rgb_only: bool = False


@dataclass
class SampleSection:
    steps: int = 50
    base_steps: int = 0
    delta: int = 0
    delta_stage: str = "none"
    descriptor: str = ""


@dataclass
class AnalysisSection:
    probe_clips: int = 4
    base_steps: int = 15
    deltas: str = "0,5,10"
    stages: str = "early,mid,late"
    seeds: str = "0,1,2"
    pose_fit_evals: int = 250
    plot: bool = False


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "codec": CodecConfig,
    "model": ModelSection,
    "train": TrainSection,
    "sample": SampleSection,
    "analysis": AnalysisSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelSection = field(default_factory=ModelSection)
    model_overrides: dict = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def model_config(self) -> ModelConfig:
        return ModelConfig.profile(self.model.profile, **self.model_overrides)

    def with_values(self, section: str, **values) -> "RunConfig":
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = section_items(getattr(self, name))
        mc = self.model_config()
        for f in fields(ModelConfig):
            cp["model"][f.name] = _fmt(getattr(mc, f.name))
        buf = io.StringIO()
        buf.write(f"# dualcam {__version__}\n")
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def section_items(obj) -> dict:
    return {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}


def _coerce(cls, name, raw: str):
    ftype = {f.name: f for f in fields(cls)}[name]
    default = getattr(cls(), name) if cls is not CodecConfig else getattr(CodecConfig(), name)
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {ftype.name}: {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    model_fields = set(ModelConfig.field_names())
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = SECTIONS[sec]
        known = {f.name for f in fields(cls)}
        values, overrides = {}, {}
        for key, raw in cp[sec].items():
            if key in known:
                values[key] = _coerce(cls, key, raw)
            elif sec == "model" and key in model_fields:
                overrides[key] = _coerce(ModelConfig, key, raw)
            else:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
        try:
            cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **values)})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if overrides:
            cfg.model_overrides.update(overrides)
    cfg.model_config()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def str_list(text: str) -> list[str]:
    return [x for x in text.replace(" ", "").split(",") if x]
