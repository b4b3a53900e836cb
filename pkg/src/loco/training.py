"""Contrastive pretraining over any topology, checkpoints, and linear probing.

Checkpoint files are little-endian::

    magic "LOCO" | version u32 | config fingerprint (32 bytes, sha256)
    tensor count u32
    per tensor: name length u32 | name (utf-8) | rank u32 | extents u64 * rank
                | elements as float64
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .autograd import ParamStore
from .blocks import ArchitectureSpec, arch_from_dict, arch_to_dict, preset_arch
from .contrastive import AugmentConfig, DecoderSpec, augment_batch
from .data import ImageDataset
from .optim import Optimizer, OptimizerConfig, ScheduleConfig, lr_at, sgd_step
from .topology import LocalNetwork, RouteReport, build_units

__all__ = [
    "TrainConfig",
    "ProbeConfig",
    "Checkpoint",
    "TrainResult",
    "MetricsWriter",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "config_fingerprint",
    "linear_probe",
    "LinearProbe",
    "LocalContrastiveEncoder",
    "check_images",
]

CKPT_MAGIC = b"LOCO"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    arch: object = "toy3"
    topology: str = "loco"
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 128
    temperature: float = 0.1
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4 so InfoNCE has negatives")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def architecture(self) -> ArchitectureSpec:
        if isinstance(self.arch, ArchitectureSpec):
            return self.arch
        if isinstance(self.arch, dict):
            return arch_from_dict(self.arch)
        return preset_arch(self.arch, self.augment.output_size)

    def topology_spec(self, arch: ArchitectureSpec | None = None):
        arch = arch or self.architecture()
        return build_units(arch.n_stages, self.topology, block_counts=[len(s.blocks) for s in arch.stages])

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ArchitectureSpec):
                v = arch_to_dict(v)
            elif hasattr(v, "__dataclass_fields__"):
                v = json.loads(json.dumps(asdict(v)))
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"decoder": DecoderSpec, "augment": AugmentConfig,
                  "optimizer": OptimizerConfig, "schedule": ScheduleConfig}
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        return cls(**d)


def config_fingerprint(config) -> bytes:
    payload = config.to_dict() if hasattr(config, "to_dict") else config
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    tensors: dict
    step: int
    fingerprint: bytes

    def encoder_tensors(self):
        return {k: v for k, v in self.tensors.items()
                if k.startswith("stage") or k.startswith("buffer:stage")}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if len(ckpt.fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(ckpt.fingerprint)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    buf.write(struct.pack("<Q", ckpt.step))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, config=None, dtype=None) -> Checkpoint:
    """Read a checkpoint; with ``config`` the stored fingerprint must match."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a LOCO checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    fingerprint = data[8:40]
    if config is not None and fingerprint != config_fingerprint(config):
        raise ValueError("checkpoint fingerprint does not match the configuration")
    (count,) = struct.unpack_from("<I", data, 40)
    (step,) = struct.unpack_from("<Q", data, 44)
    off = 52
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        tensors[name] = arr.astype(dtype) if dtype is not None else arr.copy()
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return Checkpoint(tensors, int(step), fingerprint)


# --------------------------------------------------------------------------
# metrics


class MetricsWriter:
    """Append-only CSV; the header is fixed by the first record."""

    def __init__(self, stream, flush_every: int = 1):
        self.stream = stream
        self.flush_every = max(int(flush_every), 1)
        self.columns = None
        self._writer = None
        self._count = 0

    def write(self, record: dict):
        if self.columns is None:
            self.columns = list(record)
            self._writer = csv.writer(self.stream, lineterminator="\n")
            self._writer.writerow(self.columns)
        elif list(record) != self.columns:
            raise ValueError(f"record columns {list(record)} differ from header {self.columns}")
        self._writer.writerow([_fmt(record[c]) for c in self.columns])
        self._count += 1
        if self._count % self.flush_every == 0:
            self.stream.flush()

    def close(self):
        self.stream.flush()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def metrics_columns(n_units: int):
    return ["step", "epoch", "lr"] + [f"unit_{i}_loss" for i in range(n_units)] + ["penalty", "wall_ms"]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    network: LocalNetwork
    route: RouteReport


def _sample_seeds(seed, step, n):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(step), 0xA06])
    return ss.generate_state(n, dtype=np.uint32)


def _batches(n_items, batch, seed, total_steps):
    """Deterministic epoch-wise permutations cut into full batches."""
    per_epoch = n_items // batch
    epoch = 0
    step = 0
    while step < total_steps:
        order = np.random.default_rng([int(seed) & 0xFFFFFFFF, epoch, 0xBA7]).permutation(n_items)
        for b in range(per_epoch):
            if step >= total_steps:
                return
            yield order[b * batch:(b + 1) * batch]
            step += 1
        epoch += 1


def train(config: TrainConfig, dataset, metrics_sink: Callable | None = None,
          checkpoint_sink: Callable | None = None, network: LocalNetwork | None = None) -> TrainResult:
    """Contrastive pretraining.

    Each step augments ``batch_size`` source images into ``2 * batch_size``
    views, runs the encoder once, backpropagates every unit's InfoNCE loss to
    its own span and applies one optimizer step under the warmup/cosine
    schedule. ``metrics_sink`` receives one record per step.
    """
    if not isinstance(dataset, ImageDataset):
        dataset = ImageDataset(check_images(dataset))
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset has {len(dataset)} images, fewer than batch_size={config.batch_size}")
    arch = config.architecture()
    topo = config.topology_spec(arch)
    if network is None:
        network = LocalNetwork(arch, topo, config.decoder, config.temperature,
                               ParamStore(config.seed, config.dtype))
    sched = config.schedule
    total = sched.total_steps
    opt = Optimizer(config.optimizer)
    store = network.store
    fingerprint = config_fingerprint(config)
    metrics = []
    report = None
    n_units = len(topo.units)
    t0 = time.perf_counter()
    for step, idx in enumerate(_batches(len(dataset), config.batch_size, config.seed, total)):
        images = dataset.as_float(idx)
        views = augment_batch(images, config.augment, _sample_seeds(config.seed, step, len(idx)))
        views = views.astype(config.dtype)
        report = network.forward_once(views)
        for i, loss in enumerate(report.unit_losses):
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss} in unit {i} at step {step}")
        grads, _ = network.local_backward()
        lr = lr_at(sched, step)
        params = {name: store[name] for name in grads}
        for name, value in opt.step(params, grads, lr).items():
            store[name] = value
        record = {"step": step, "epoch": step // sched.steps_per_epoch, "lr": float(lr)}
        for i in range(n_units):
            record[f"unit_{i}_loss"] = float(report.unit_losses[i])
        record["penalty"] = float(report.penalty)
        record["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        metrics.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
        if checkpoint_sink is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint_sink(Checkpoint(store.state_dict(), step + 1, fingerprint))
    ckpt = Checkpoint({k: np.array(v) for k, v in store.state_dict().items()}, total, fingerprint)
    if checkpoint_sink is not None:
        checkpoint_sink(ckpt)
    return TrainResult(ckpt, metrics, network, report)


def network_from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> LocalNetwork:
    arch = config.architecture()
    net = LocalNetwork(arch, config.topology_spec(arch), config.decoder, config.temperature,
                       ParamStore(config.seed, config.dtype))
    views = (2 * config.batch_size, arch.in_channels) + tuple(config.augment.output_size)
    net.build(views)
    net.store.load_state_dict({k: v.astype(config.dtype) for k, v in ckpt.tensors.items()})
    return net


# --------------------------------------------------------------------------
# linear probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 60
    lr_grid: tuple = (1.0, 3.0, 10.0, 30.0)
    batch_size: int = 128
    test_fraction: float = 0.3
    val_fraction: float = 0.2
    decay_at: tuple = (0.3, 0.6, 0.9)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("split fractions must lie in (0, 1)")
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression trained by plain SGD with step decay.

    Features are standardized with training statistics and scaled to unit
    expected norm. The rate drops tenfold at each fraction of ``epochs`` in
    ``decay_at``.
    """

    def __init__(self, lr=1.0, epochs=60, batch_size=128, decay_at=(0.3, 0.6, 0.9), seed=0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.decay_at = decay_at
        self.seed = seed

    def _scale(self, X):
        return (X - self.mean_) / self.std_ / np.sqrt(X.shape[1])

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("linear probe needs at least two classes")
        self.mean_ = X.mean(axis=0)
        self.std_ = X.std(axis=0) + 1e-8
        Z = self._scale(X)
        n, d = Z.shape
        k = len(self.classes_)
        params = {"W": np.zeros((d, k)), "b": np.zeros(k)}
        rng = np.random.default_rng(self.seed)
        onehot = np.eye(k)[yi]
        milestones = [int(round(f * self.epochs)) for f in self.decay_at]
        for epoch in range(self.epochs):
            lr = self.lr * 0.1 ** sum(epoch >= m for m in milestones)
            order = rng.permutation(n)
            for s in range(0, n, self.batch_size):
                b = order[s:s + self.batch_size]
                logits = Z[b] @ params["W"] + params["b"]
                logits -= logits.max(axis=1, keepdims=True)
                p = np.exp(logits)
                p /= p.sum(axis=1, keepdims=True)
                d_logits = (p - onehot[b]) / len(b)
                grads = {"W": Z[b].T @ d_logits, "b": d_logits.sum(axis=0)}
                params = sgd_step(params, grads, lr)
        self.coef_ = params["W"]
        self.intercept_ = params["b"]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return self._scale(X) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def probe_features(features, labels, config: ProbeConfig | None = None):
    """Grid-search the probe rate on a validation split, refit, report test accuracy.

    Returns ``(accuracy, chosen_lr)``.
    """
    config = config or ProbeConfig()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("linear probe needs at least two classes")
    rng = np.random.default_rng([config.seed, 0x9B])
    order = rng.permutation(len(labels))
    n_test = int(round(len(labels) * config.test_fraction))
    test, trainval = order[:n_test], order[n_test:]
    n_val = int(round(len(trainval) * config.val_fraction))
    val, tr = trainval[:n_val], trainval[n_val:]
    kw = dict(epochs=config.epochs, batch_size=config.batch_size, decay_at=config.decay_at,
              seed=config.seed)
    best_lr = config.lr_grid[0]
    if len(config.lr_grid) > 1 and n_val > 0:
        scores = [LinearProbe(lr=lr, **kw).fit(features[tr], labels[tr]).score(features[val], labels[val])
                  for lr in config.lr_grid]
        best_lr = config.lr_grid[int(np.argmax(scores))]
    probe = LinearProbe(lr=best_lr, **kw).fit(features[trainval], labels[trainval])
    return float(probe.score(features[test], labels[test])), best_lr


def linear_probe(source, dataset: ImageDataset, config: ProbeConfig | None = None,
                 train_config: TrainConfig | None = None) -> float:
    """Top-1 accuracy of a linear classifier on frozen encoder features.

    ``source`` is a trained :class:`LocalNetwork`, a :class:`TrainResult`, or
    a :class:`Checkpoint` together with ``train_config``. Encoder parameters
    are only read.
    """
    if dataset.labels is None:
        raise ValueError("linear probe needs labels")
    if isinstance(source, TrainResult):
        source = source.network
    if isinstance(source, Checkpoint):
        if train_config is None:
            raise ValueError("a checkpoint needs its TrainConfig")
        source = network_from_checkpoint(train_config, source)
    feats = source.features(dataset.as_float().astype(source.store.dtype))
    acc, _ = probe_features(feats, dataset.labels, config)
    return acc


# --------------------------------------------------------------------------
# estimator surface


def check_images(X, dtype=None) -> np.ndarray:
    """Validate an ``(N, C, H, W)`` image batch; uint8 input is scaled to [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_2d=False)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float64) / 255.0
    X = X.astype(dtype or np.float64, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


class LocalContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised encoder trained with local contrastive units.

    ``fit`` pretrains on unlabeled images ``(N, C, H, W)``; ``transform``
    returns the global-average-pooled output of the frozen encoder.

    Examples
    --------
    >>> from loco import LocalContrastiveEncoder, make_synthetic
    >>> data = make_synthetic(64, seed=0, hw=(16, 16))
    >>> enc = LocalContrastiveEncoder(arch="toy2", batch_size=8, steps=2,
    ...                               augment={"output_size": (16, 16)})
    >>> enc.fit(data.images).transform(data.images[:4]).shape
    (4, 16)
    """

    def __init__(self, arch="toy3", topology="loco", decoder=None, augment=None, optimizer=None,
                 base_lr=0.3, warmup_steps=20, steps=200, batch_size=64, temperature=0.1,
                 seed=0, precision="float32"):
        self.arch = arch
        self.topology = topology
        self.decoder = decoder
        self.augment = augment
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.steps = steps
        self.batch_size = batch_size
        self.temperature = temperature
        self.seed = seed
        self.precision = precision

    def _config(self) -> TrainConfig:
        def build(v, typ):
            if v is None:
                return typ()
            return v if isinstance(v, typ) else typ(**v)
        sched = ScheduleConfig(self.base_lr, self.warmup_steps, self.steps, 1)
        return TrainConfig(arch=self.arch, topology=self.topology,
                           decoder=build(self.decoder, DecoderSpec),
                           augment=build(self.augment, AugmentConfig),
                           optimizer=build(self.optimizer, OptimizerConfig),
                           schedule=sched, batch_size=self.batch_size,
                           temperature=self.temperature, seed=self.seed, precision=self.precision)

    def fit(self, X, y=None):
        X = check_images(X)
        config = self._config()
        result = train(config, ImageDataset(X))
        self.config_ = config
        self.network_ = result.network
        self.checkpoint_ = result.checkpoint
        self.metrics_ = result.metrics
        self.route_report_ = result.route
        self.n_features_out_ = self.network_.arch.stages[-1].out_channels
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.config_.dtype)
        return self.network_.features(X)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "network_")
        return np.array([f"encoder{i}" for i in range(self.n_features_out_)], dtype=object)
