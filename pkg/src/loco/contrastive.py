"""Paired-view augmentation, projection decoders and the InfoNCE objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, ParamStore, ShapeError, bilinear_matrix
from .blocks import ArchitectureSpec, BlockSpec, ConvSpec, apply_block, batch_norm

__all__ = [
    "AugmentConfig",
    "DecoderSpec",
    "ContrastiveBatch",
    "Decoder",
    "augment",
    "augment_batch",
    "build_decoder",
    "project",
    "info_nce",
]


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.3, 1.0)
    output_size: tuple = (32, 32)
    color_strength: float = 0.5
    blur_prob: float = 0.5
    flip_prob: float = 0.5
    gray_prob: float = 0.2
    ratio: tuple = (3 / 4, 4 / 3)

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(float(v) for v in self.crop_scale))
        object.__setattr__(self, "output_size", tuple(int(v) for v in self.output_size))
        object.__setattr__(self, "ratio", tuple(float(v) for v in self.ratio))
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if min(self.output_size) < 1:
            raise ValueError("output_size must be positive")
        if self.color_strength < 0:
            raise ValueError("color_strength must be non-negative")
        for name in ("blur_prob", "flip_prob", "gray_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ValueError("ratio must be a positive interval")


_BLUR = np.array([1.0, 2.0, 1.0]) / 4.0


def _resize(img, size):
    c, h, w = img.shape
    if (h, w) == tuple(size):
        return img.copy()
    return bilinear_matrix(h, size[0]) @ img @ bilinear_matrix(w, size[1]).T


def _crop_box(rng, h, w, cfg):
    area = h * w
    log_ratio = np.log(cfg.ratio)
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        aspect = np.exp(rng.uniform(*log_ratio))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _blur(img):
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    p = _BLUR[0] * p[:, :-2] + _BLUR[1] * p[:, 1:-1] + _BLUR[2] * p[:, 2:]
    return _BLUR[0] * p[:, :, :-2] + _BLUR[1] * p[:, :, 1:-1] + _BLUR[2] * p[:, :, 2:]


def _one_view(img, cfg, rng):
    c, h, w = img.shape
    top, left, ch, cw = _crop_box(rng, h, w, cfg)
    view = _resize(img[:, top:top + ch, left:left + cw], cfg.output_size)
    if rng.random() < cfg.flip_prob:
        view = view[:, :, ::-1]
    s = cfg.color_strength
    if s > 0:
        gain = rng.uniform(1 - 0.8 * s, 1 + 0.8 * s, size=(c, 1, 1))
        shift = rng.uniform(-0.2 * s, 0.2 * s, size=(c, 1, 1))
        mean = view.mean(axis=(1, 2), keepdims=True)
        view = (view - mean) * gain + mean + shift
        if rng.random() < cfg.gray_prob:
            view = np.broadcast_to(view.mean(axis=0, keepdims=True), view.shape)
        view = np.clip(view, 0.0, 1.0)
    if rng.random() < cfg.blur_prob:
        view = _blur(view)
    return np.ascontiguousarray(view)


def augment(image, cfg: AugmentConfig, seed: int):
    """Two independently sampled views of a CHW image with values in [0, 1].

    Views are a pure function of ``(image, cfg, seed)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected a CHW image, got shape {image.shape}")
    h, w = image.shape[1:]
    if cfg.crop_scale[0] * h * w < 1:
        raise ValueError(f"crop scale {cfg.crop_scale[0]} leaves less than one pixel of a {h}x{w} image")
    rng = np.random.default_rng(seed)
    return _one_view(image, cfg, rng), _one_view(image, cfg, rng)


def augment_batch(images, cfg: AugmentConfig, seeds) -> np.ndarray:
    """Interleaved views ``(2N, C, H, W)``: rows ``2k`` and ``2k+1`` share a source."""
    out = []
    for img, seed in zip(images, seeds):
        out.extend(augment(img, cfg, int(seed)))
    return np.stack(out)


# --------------------------------------------------------------------------
# decoders


@dataclass(frozen=True)
class DecoderSpec:
    """Projection head: conv blocks, global average pooling, then an MLP
    whose hidden layers are linear, batch norm, relu.

    ``depth_preset`` (``"one_stage"`` or ``"full_network"``) overrides
    ``conv_blocks`` with the block count of the next encoder stage or of all
    stages above the unit.
    """

    conv_blocks: int = 1
    downsample: bool = True
    mlp_layers: int = 2
    projection_dim: int = 128
    depth_preset: str = "none"

    def __post_init__(self):
        if self.conv_blocks < 0:
            raise ValueError("conv_blocks must be >= 0")
        if self.mlp_layers < 2:
            raise ValueError("mlp_layers must be >= 2")
        if self.projection_dim < 1:
            raise ValueError("projection_dim must be >= 1")
        if self.depth_preset not in ("none", "one_stage", "full_network"):
            raise ValueError(f"unknown depth preset {self.depth_preset!r}")

    def resolve_blocks(self, arch: ArchitectureSpec | None = None, top_stage: int | None = None) -> int:
        if self.depth_preset == "none" or arch is None or top_stage is None:
            return self.conv_blocks
        n = arch.n_stages
        if self.depth_preset == "one_stage":
            return len(arch.stages[min(top_stage + 1, n - 1)].blocks)
        return max(1, sum(len(s.blocks) for s in arch.stages[top_stage + 1:]))


@dataclass
class Decoder:
    spec: DecoderSpec
    in_channels: int
    in_hw: tuple
    block_kind: str = "basic"
    n_blocks: int = 1
    blocks: list = field(default_factory=list)

    def apply(self, g: Graph, x: int, name: str) -> int:
        """Append the decoder on feature map ``x``; returns the unit-norm projection."""
        if g.shape(x)[1] != self.in_channels:
            raise ShapeError(f"{name}: expects {self.in_channels} channels, got {g.shape(x)[1]}")
        h = x
        with g.scoped(name):
            for j, b in enumerate(self.blocks):
                h = apply_block(g, h, b, f"{name}.block{j}")
            h = g.global_avg_pool(h)
            width = g.shape(h)[1]
            for i in range(self.spec.mlp_layers):
                out = self.spec.projection_dim if i == self.spec.mlp_layers - 1 else width
                w = g.param(f"{name}.fc{i}.w", (out, g.shape(h)[1]))
                if i < self.spec.mlp_layers - 1:
                    # batch-centred hidden units (pooled features are all positive);
                    # the norm makes a bias redundant
                    h = batch_norm(g, g.linear(h, w), f"{name}.fc{i}.bn")
                    h = g.relu(h)
                else:
                    # a random bias keeps a sample with no active hidden unit off the origin
                    h = g.linear(h, w, g.param(f"{name}.fc{i}.b", (out,), kind="bias",
                                               fan_in=g.shape(h)[1]))
            return g.l2_normalize(h)

    def param_count(self) -> int:
        g = Graph(ParamStore())
        x = g.input("x", (2, self.in_channels) + tuple(self.in_hw))
        self.apply(g, x, "d")
        return g.store.n_elements()

    def output_hw(self):
        hw = tuple(self.in_hw)
        for b in self.blocks:
            hw = b.output_hw(hw)
        return hw


def _decoder_block(kind, channels, stride):
    if kind == "bottleneck":
        width = max(channels // 4, 1)
        convs = (ConvSpec(channels, width, 1, 1, 0), ConvSpec(width, width, 3, stride, 1),
                 ConvSpec(width, channels, 1, 1, 0))
    else:
        convs = (ConvSpec(channels, channels, 3, stride, 1), ConvSpec(channels, channels, 3, 1, 1))
    return BlockSpec(kind, convs, downsample="stride" if stride > 1 else "none")


def build_decoder(spec: DecoderSpec, in_channels: int, in_hw, block_kind: str = "basic",
                  arch: ArchitectureSpec | None = None, top_stage: int | None = None) -> Decoder:
    """Decoder for a feature map of ``in_channels`` x ``in_hw``.

    Conv blocks keep the channel count and match ``block_kind``; with
    ``spec.downsample`` the first one has stride 2.
    """
    n_blocks = spec.resolve_blocks(arch, top_stage)
    hw = tuple(int(v) for v in in_hw)
    blocks = []
    for j in range(n_blocks):
        stride = 2 if (spec.downsample and j == 0) else 1
        if stride > 1 and min(hw) < 2:
            raise ShapeError(f"cannot downsample a {hw[0]}x{hw[1]} map")
        b = _decoder_block(block_kind, in_channels, stride)
        hw = b.output_hw(hw)
        blocks.append(b)
    return Decoder(spec, in_channels, tuple(int(v) for v in in_hw), block_kind, n_blocks, blocks)


def project(decoder: Decoder, features, store: ParamStore | None = None, name: str = "decoder"):
    """Evaluate ``decoder`` on a feature batch; returns unit-norm rows."""
    features = np.asarray(features)
    if features.ndim == 3:
        features = features[None]
    store = store if store is not None else ParamStore(dtype=features.dtype if features.dtype.kind == "f"
                                                       else np.float64)
    g = Graph(store)
    x = g.input("x", features.shape)
    z = decoder.apply(g, x, name)
    return g.forward({"x": features}, training=False)[z]


# --------------------------------------------------------------------------
# objective


@dataclass
class ContrastiveBatch:
    """``2N`` unit-norm projections; rows ``2k`` and ``2k+1`` are positives."""

    projections: np.ndarray
    temperature: float = 0.1

    def __post_init__(self):
        z = np.asarray(self.projections)
        if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] < 4:
            raise ShapeError(f"need (2N, D) projections with N >= 2, got {z.shape}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        norms = np.linalg.norm(z, axis=1)
        if np.any(np.abs(norms - 1) > 1e-5):
            raise ValueError("projections must be unit norm (tolerance 1e-5)")
        self.projections = z

    @property
    def n_sources(self):
        return self.projections.shape[0] // 2


def info_nce(batch: ContrastiveBatch) -> float:
    """Mean over all ``2N`` anchors of the temperature-scaled cross entropy of
    picking the paired view among the other ``2N - 1`` vectors."""
    z = batch.projections.astype(np.float64)
    m = z.shape[0]
    s = z @ z.T / batch.temperature
    np.fill_diagonal(s, -np.inf)
    top = s.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(s - top).sum(axis=1))
    pos = s[np.arange(m), np.arange(m) ^ 1]
    return float(np.mean(lse - pos))
