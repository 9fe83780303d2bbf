"""Run configuration: every tunable of the pipeline in one serialisable record.

A :class:`RunConfig` is assembled from a preset, an optional JSON file,
``REVRIR_`` environment variables and command-line flags, in that order of
increasing precedence. ``REVRIR_SECTION__KEY=value`` sets ``section.key``;
``REVRIR_SEED`` sets the top-level seed. Values are parsed as JSON when
possible and kept as strings otherwise.

Hashes are SHA-256 digests of canonical JSON. Each pipeline stage has its own
hash covering only the sections it depends on, so changing a fine-tuning
learning rate does not invalidate a generated RIR bank.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .catalog import DESK_RANGES, PAPER110_EXCLUDE, PAPER_RANGES, Catalog, enumerate_rooms, ranges_from_dict, ranges_to_dict
from .contrastive import PAPER_ENCODER, EncoderConfig, PretrainConfig
from .corpus import SplitPolicy, SynthConfig
from .errors import ConfigError, ValidationError
from .simulate import AcousticConfig
from .tasks import BaselineConfig

ENV_PREFIX = "REVRIR_"
PRESETS = ("paper", "desk")


@dataclass(frozen=True)
class CatalogConfig:
    """Per-type ``[min, max, hop]`` grids plus grid points to leave out."""

    ranges: dict = field(default_factory=lambda: ranges_to_dict(PAPER_RANGES))
    exclude: tuple = ()

    def build(self) -> Catalog:
        return enumerate_rooms(ranges_from_dict(self.ranges), exclude=self.exclude)


@dataclass(frozen=True)
class DataConfig:
    per_class_count: int = 5000
    pool_size: int = 1000
    utterance_duration: float = 10.0
    pairs_per_class: int = 5000
    split: SplitPolicy = SplitPolicy()
    synth: SynthConfig = SynthConfig()

    def __post_init__(self):
        if self.per_class_count < 1 or self.pool_size < 2 or self.pairs_per_class < 1:
            raise ConfigError("per_class_count, pairs_per_class must be >= 1 and pool_size >= 2")


@dataclass(frozen=True)
class HeadConfig:
    """Fine-tuning settings shared by the speech and RIR heads."""

    freeze_encoder: bool = True
    epochs: int = 50
    batch_size: int = 100
    lr: float = 1e-4
    power: float = 0.1
    weight_decay: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    catalog: CatalogConfig = CatalogConfig()
    acoustic: AcousticConfig = AcousticConfig()
    data: DataConfig = DataConfig()
    encoder: EncoderConfig = EncoderConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: HeadConfig = HeadConfig()
    baseline: BaselineConfig = BaselineConfig()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        return digest(self.to_dict())

    def stage_hash(self, stage: str) -> str:
        if stage not in STAGE_SECTIONS:
            raise ValidationError(f"unknown stage {stage!r}")
        d = self.to_dict()
        d["data.per_class_count"] = d["data"]["per_class_count"]
        return digest({"stage": stage, **{k: d[k] for k in STAGE_SECTIONS[stage]}})


# cumulative: a stage's hash covers everything upstream of it
STAGE_SECTIONS = {
    "catalog": ("catalog",),
    "rirs": ("catalog", "acoustic", "seed", "data.per_class_count"),
    "data": ("catalog", "acoustic", "seed", "data"),
    "pretrain": ("catalog", "acoustic", "seed", "data", "encoder", "pretrain"),
    "finetune": ("catalog", "acoustic", "seed", "data", "encoder", "pretrain", "finetune"),
    "baseline": ("catalog", "acoustic", "seed", "data", "baseline"),
}


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def preset(name: str) -> RunConfig:
    """``paper``: published scale and hyperparameters; ``desk``: a six-room run for one CPU core."""
    if name == "paper":
        return RunConfig(
            catalog=CatalogConfig(ranges_to_dict(PAPER_RANGES)),
            encoder=PAPER_ENCODER,
        )
    if name == "desk":
        return RunConfig(
            catalog=CatalogConfig(ranges_to_dict(DESK_RANGES)),
            data=DataConfig(per_class_count=200, pool_size=100, utterance_duration=2.0, pairs_per_class=640),
            encoder=EncoderConfig(speech_encoder="frame-stats"),
            pretrain=PretrainConfig(epochs=10, lr=3e-3),
            finetune=HeadConfig(lr=1e-2),
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


PAPER110_CATALOG = CatalogConfig(ranges_to_dict(PAPER_RANGES), tuple(tuple(e) for e in PAPER110_EXCLUDE))


# --- building from nested dictionaries --------------------------------------------


def _build(cls, raw: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = _default_of(fields[name])
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple) or (name == "beta" and isinstance(value, list)):
            kwargs[name] = _tuplify(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def merge(base: Mapping, override: Mapping) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping) and k != "ranges":
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(raw: Mapping) -> RunConfig:
    return _build(RunConfig, raw, "")


def load_config_file(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested override dict from ``REVRIR_SECTION__KEY`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX) :].split("__") if p]
        if not path:
            continue
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_value(environ[key])
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(
    preset_name: str = "desk",
    config_path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    flags: Mapping | None = None,
) -> tuple[RunConfig, dict]:
    """Effective config and a record of where each layer came from."""
    layers = {"preset": preset_name}
    raw = preset(preset_name).to_dict()
    if config_path is not None:
        file_raw = load_config_file(config_path)
        raw = merge(raw, file_raw)
        layers["file"] = str(config_path)
    env = env_overrides(environ)
    if env:
        raw = merge(raw, env)
        layers["env"] = env
    if flags:
        raw = merge(raw, flags)
        layers["flags"] = dict(flags)
    try:
        return from_dict(raw), layers
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
