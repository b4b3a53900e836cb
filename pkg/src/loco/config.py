"""Run configuration: strict JSON schema, defaults, and round-trip serialization.

A minimal file such as ``{"arch": "toy3", "topology": "loco"}`` is valid;
every omitted field takes its default. Unknown keys are rejected with a
closest-match suggestion. ``LOCO_SEED`` in the environment overrides
``seed``.
"""
from __future__ import annotations

import difflib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .blocks import arch_from_dict, preset_arch
from .contrastive import AugmentConfig, DecoderSpec
from .optim import OptimizerConfig, ScheduleConfig
from .topology import build_units, parse_mode
from .training import ProbeConfig, TrainConfig, config_fingerprint

__all__ = ["ConfigError", "DatasetSource", "RunConfig", "load_config", "parse_config",
           "serialize", "SEED_ENV"]

SEED_ENV = "LOCO_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class DatasetSource:
    """Either a synthetic generator (``seed``, ``size``) or a raw LCIM file (``path``)."""

    kind: str = "synthetic"
    seed: int = 0
    size: int = 2048
    path: str | None = None
    hw: tuple = (32, 32)
    n_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hw", tuple(int(v) for v in self.hw))
        if self.kind not in ("synthetic", "raw"):
            raise ValueError("kind must be 'synthetic' or 'raw'")
        if self.kind == "raw" and not self.path:
            raise ValueError("a raw dataset needs a path")
        if self.kind == "synthetic" and self.path:
            raise ValueError("give either a synthetic generator or a raw path, not both")
        if self.size < 1:
            raise ValueError("size must be >= 1")

    def load(self):
        from .data import make_synthetic, read_raw
        if self.kind == "raw":
            return read_raw(self.path)
        return make_synthetic(self.size, self.seed, self.hw, self.n_classes)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    metrics_every: int = 1
    dataset: DatasetSource = field(default_factory=DatasetSource)
    probe_dataset: DatasetSource = field(default_factory=lambda: DatasetSource(seed=1, size=2000))
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def fingerprint(self) -> bytes:
        return config_fingerprint(self.train)


_NESTED = {"decoder": DecoderSpec, "augment": AugmentConfig, "optimizer": OptimizerConfig,
           "schedule": ScheduleConfig}
_RUN_KEYS = {"output_dir", "metrics_every", "dataset", "probe_dataset", "probe"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            hint = difflib.get_close_matches(key, sorted(allowed), n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"{where}: unknown key {key!r}{extra}")


def _build(typ, obj, where):
    allowed = {f.name for f in fields(typ)}
    _check_keys(obj, allowed, where)
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return typ(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _dataset(obj, where, default):
    if obj is None:
        return default
    _check_keys(obj, {"synthetic", "raw", "hw", "n_classes"}, where)
    has_syn, has_raw = "synthetic" in obj, "raw" in obj
    if has_syn == has_raw:
        raise ConfigError(f"{where}: give exactly one of 'synthetic' or 'raw'")
    extra = {k: obj[k] for k in ("hw", "n_classes") if k in obj}
    if has_raw:
        if not isinstance(obj["raw"], str):
            raise ConfigError(f"{where}.raw: expected a file path")
        return _build(DatasetSource, {"kind": "raw", "path": obj["raw"], **extra}, where)
    syn = obj["synthetic"]
    _check_keys(syn, {"seed", "size"}, f"{where}.synthetic")
    return _build(DatasetSource, {"kind": "synthetic", **syn, **extra}, where)


def parse_config(obj: dict, env=None) -> RunConfig:
    """Validate a decoded JSON object and apply defaults."""
    env = os.environ if env is None else env
    _check_keys(obj, _TRAIN_KEYS | _RUN_KEYS, "config")
    kw = {}
    for key in _TRAIN_KEYS:
        if key not in obj:
            continue
        v = obj[key]
        if key in _NESTED:
            v = _build(_NESTED[key], v, key)
        kw[key] = v
    arch = kw.get("arch", "toy3")
    try:
        if isinstance(arch, dict):
            arch_spec = arch_from_dict(arch)
        elif isinstance(arch, str):
            size = kw["augment"].output_size if "augment" in kw else AugmentConfig().output_size
            arch_spec = preset_arch(arch, size)
        else:
            raise ValueError("expected a preset name or an architecture object")
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"arch: {e}") from None
    topology = kw.get("topology", "loco")
    try:
        if not isinstance(topology, str):
            raise ValueError("expected a mode string such as 'loco' or 'share_blocks(1)'")
        parse_mode(topology)
        build_units(arch_spec.n_stages, topology, block_counts=[len(s.blocks) for s in arch_spec.stages])
    except ValueError as e:
        raise ConfigError(f"topology: {e}") from None
    if SEED_ENV in env:
        try:
            kw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {env[SEED_ENV]!r}") from None
    for key in ("batch_size", "seed", "checkpoint_every"):
        if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
            raise ConfigError(f"{key}: expected an integer")
    try:
        train = TrainConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config: {e}") from None
    run = {}
    if "output_dir" in obj:
        if not isinstance(obj["output_dir"], str):
            raise ConfigError("output_dir: expected a path string")
        run["output_dir"] = obj["output_dir"]
    if "metrics_every" in obj:
        m = obj["metrics_every"]
        if not isinstance(m, int) or m < 1:
            raise ConfigError("metrics_every: expected an integer >= 1")
        run["metrics_every"] = m
    run["dataset"] = _dataset(obj.get("dataset"), "dataset", RunConfig().dataset)
    run["probe_dataset"] = _dataset(obj.get("probe_dataset"), "probe_dataset", RunConfig().probe_dataset)
    if "probe" in obj:
        run["probe"] = _build(ProbeConfig, obj["probe"], "probe")
    return RunConfig(train=train, **run)


def load_config(path, env=None) -> RunConfig:
    """Read and validate a JSON run config; parse errors report line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return parse_config(obj, env)


def _dataset_dict(ds: DatasetSource) -> dict:
    d = {"raw": ds.path} if ds.kind == "raw" else {"synthetic": {"seed": ds.seed, "size": ds.size}}
    d["hw"] = list(ds.hw)
    d["n_classes"] = ds.n_classes
    return d


def to_dict(config: RunConfig) -> dict:
    d = config.train.to_dict()
    d["output_dir"] = config.output_dir
    d["metrics_every"] = config.metrics_every
    d["dataset"] = _dataset_dict(config.dataset)
    d["probe_dataset"] = _dataset_dict(config.probe_dataset)
    d["probe"] = json.loads(json.dumps(config.probe.__dict__))
    return d


def serialize(config: RunConfig, indent=2) -> str:
    """JSON text that :func:`parse_config` maps back to an equal config."""
    return json.dumps(to_dict(config), indent=indent, sort_keys=True)
