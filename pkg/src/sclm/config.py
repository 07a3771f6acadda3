"""Run configuration with a canonical ``key = value`` text form.

The canonical text is what gets hashed for provenance and embedded in
checkpoints, so formatting is fixed: sections in a set order, keys in
dataclass field order, floats via ``repr``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .model import DecoderConfig, EncoderConfig, ModalityConfig, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class SpanConfig:
    ratio: float = 0.25
    min_len: int = 8
    max_len: int = 16


@dataclass
class ScheduleConfig:
    peak_lr: float = 6e-4
    warmup: int = 100
    total: int = 5000


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0


@dataclass
class TrainConfig:
    batch_size: int = 8
    seq_len: int = 256
    policy: str = "pretrain"
    checkpoint_every: int = 1000
    fixed_batch: bool = False
    finetune_epochs: int = 3


@dataclass
class EvalConfig:
    max_new: int = 16
    beam_size: int = 4
    alpha: float = 0.6


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    spans: SpanConfig = field(default_factory=SpanConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def canonical(self) -> str:
        return dumps(self)

    def checksum(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def desk_config() -> RunConfig:
    """Desk-scale defaults: n=256, span cap 64, d_dec=128, d_enc=64, 4/4 layers."""
    return RunConfig()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section(lines: list[str], name: str, obj) -> None:
    lines.append(f"[{name}]")
    for f in dataclasses.fields(obj):
        if f.name == "modalities":
            continue
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            continue
        lines.append(f"{f.name} = {_fmt(val)}")
    lines.append("")


def dumps(cfg: RunConfig) -> str:
    lines: list[str] = []
    _section(lines, "run", cfg)
    _section(lines, "model", cfg.model)
    _section(lines, "decoder", cfg.model.decoder)
    for name, mc in cfg.model.modalities.items():
        lines.append(f"[modality.{name}]")
        lines.append(f"connector = {mc.connector}")
        for f in dataclasses.fields(mc.encoder):
            lines.append(f"{f.name} = {_fmt(getattr(mc.encoder, f.name))}")
        lines.append("")
    for sec in ("spans", "schedule", "optim", "train", "eval"):
        _section(lines, sec, getattr(cfg, sec))
    return "\n".join(lines)


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    t = str(typ)
    try:
        if raw.lower() == "none" and "None" in t:
            return None
        if "bool" in t:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "int" in t:
            return int(raw)
        if "float" in t:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {t}") from None


def _fill(cls, section: configparser.SectionProxy | None, name: str, base=None):
    obj = base if base is not None else cls()
    if section is None:
        return obj
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in known or dataclasses.is_dataclass(getattr(obj, key, None)):
            raise ConfigError(f"unknown key [{name}] {key}")
        kwargs[key] = _coerce(raw, known[key].type, f"[{name}] {key}")
    try:
        return dataclasses.replace(obj, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    get = lambda s: cp[s] if cp.has_section(s) else None  # noqa: E731
    known = {"run", "model", "decoder", "spans", "schedule", "optim", "train", "eval"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("modality."):
            raise ConfigError(f"unknown section [{sec}]")
    base = RunConfig()
    mods = {}
    for sec in cp.sections():
        if sec.startswith("modality."):
            items = dict(cp[sec])
            connector = items.pop("connector", "linear")
            enc_fields = {f.name: f for f in dataclasses.fields(EncoderConfig)}
            kw = {}
            for k, v in items.items():
                if k not in enc_fields:
                    raise ConfigError(f"unknown key [{sec}] {k}")
                kw[k] = _coerce(v, enc_fields[k].type, f"[{sec}] {k}")
            try:
                mods[sec.split(".", 1)[1]] = ModalityConfig(EncoderConfig(**kw), connector)
            except ValueError as exc:
                raise ConfigError(f"[{sec}]: {exc}") from None
    model = _fill(ModelConfig, get("model"), "model", base.model)
    model = dataclasses.replace(
        model, decoder=_fill(DecoderConfig, get("decoder"), "decoder"),
        modalities=mods or base.model.modalities)
    run = _fill(RunConfig, get("run"), "run", base)
    return dataclasses.replace(
        run, model=model,
        spans=_fill(SpanConfig, get("spans"), "spans"),
        schedule=_fill(ScheduleConfig, get("schedule"), "schedule"),
        optim=_fill(OptimConfig, get("optim"), "optim"),
        train=_fill(TrainConfig, get("train"), "train"),
        eval=_fill(EvalConfig, get("eval"), "eval"),
    )


def load(path: str | os.PathLike, env: bool = True) -> RunConfig:
    """Read a config file; ``SCLM_SEED`` in the environment overrides the seed."""
    cfg = loads(Path(path).read_text(encoding="utf-8"))
    if env and os.environ.get("SCLM_SEED"):
        try:
            cfg = cfg.replace(seed=int(os.environ["SCLM_SEED"]))
        except ValueError:
            raise ConfigError("SCLM_SEED must be an integer") from None
    return cfg
