"""Declarative encoder architectures and their graph construction.

Specs are frozen dataclasses that round-trip through JSON. :func:`build_encoder`
turns an :class:`ArchitectureSpec` into a list of :class:`Stage` evaluators;
each stage appends its layers to a :class:`~loco.autograd.Graph` and exposes its
output as a named boundary.

Downsampling either strides a convolution (ResNet) or resizes bilinearly
(Progressive ResNet). In the bilinear case the block's first 3x3 convolution
runs at stride 1 on the input resolution and its activation is resized to the
block's target size; the shortcut is resized before its projection.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .autograd import Graph, ShapeError

__all__ = [
    "ConvSpec",
    "PoolSpec",
    "BlockSpec",
    "StageSpec",
    "ArchitectureSpec",
    "Stage",
    "Encoder",
    "preset_arch",
    "build_encoder",
    "apply_block",
    "conv2d",
    "batch_norm",
    "bilinear_resize",
    "global_avg_pool",
    "arch_to_json",
    "arch_from_json",
]


def _pair(v):
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    return (int(v[0]), int(v[1]))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple | None = None
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        pad = (self.kernel[0] // 2, self.kernel[1] // 2) if self.padding is None else _pair(self.padding)
        object.__setattr__(self, "padding", pad)
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError(f"invalid channel/group counts in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"channels {self.in_channels}->{self.out_channels} "
                             f"not divisible by groups={self.groups}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding in {self}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_hw(self, hw):
        return tuple((hw[i] + 2 * self.padding[i] - self.kernel[i]) // self.stride[i] + 1
                     for i in range(2))


@dataclass(frozen=True)
class PoolSpec:
    kernel: int = 3
    stride: int = 2
    padding: int = 1


@dataclass(frozen=True)
class BlockSpec:
    """A residual (or plain) block.

    ``basic`` blocks hold two 3x3 convs, ``bottleneck`` blocks 1x1/3x3/1x1.
    ``downsample`` is ``"none"``, ``"stride"`` (strides live in the conv specs)
    or ``"bilinear"`` with ``target`` giving the output size.
    """

    kind: str
    convs: tuple
    residual: bool = True
    downsample: str = "none"
    target: tuple | None = None

    def __post_init__(self):
        convs = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs)
        object.__setattr__(self, "convs", convs)
        if self.target is not None:
            object.__setattr__(self, "target", _pair(self.target))
        if self.kind not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.downsample not in ("none", "stride", "bilinear"):
            raise ValueError(f"unknown downsample {self.downsample!r}")
        if self.downsample == "bilinear" and self.target is None:
            raise ValueError("bilinear downsample needs a target size")
        for a, b in zip(convs, convs[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"block convs do not chain: {a.out_channels} -> {b.in_channels}")

    @property
    def in_channels(self):
        return self.convs[0].in_channels

    @property
    def out_channels(self):
        return self.convs[-1].out_channels

    @property
    def stride(self):
        s = (1, 1)
        for c in self.convs:
            s = (s[0] * c.stride[0], s[1] * c.stride[1])
        return s

    @property
    def resize_after(self):
        """Index of the conv whose activation is resized in bilinear mode."""
        return 0 if self.kind == "basic" else 1

    def output_hw(self, hw):
        if self.downsample == "bilinear":
            return self.target
        for c in self.convs:
            hw = c.output_hw(hw)
        return hw


@dataclass(frozen=True)
class StageSpec:
    name: str
    blocks: tuple
    out_hw: tuple
    base_channels: int

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "out_hw", _pair(self.out_hw))
        if not blocks:
            raise ValueError(f"stage {self.name!r} has no blocks")
        for a, b in zip(blocks, blocks[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"stage {self.name!r}: blocks do not chain")

    @property
    def out_channels(self):
        return self.blocks[-1].out_channels


@dataclass(frozen=True)
class ArchitectureSpec:
    stem: ConvSpec
    stages: tuple
    input_hw: tuple = (32, 32)
    in_channels: int = 3
    pool: PoolSpec | None = None
    name: str = "custom"

    def __post_init__(self):
        if not isinstance(self.stem, ConvSpec):
            object.__setattr__(self, "stem", ConvSpec(**self.stem))
        if self.pool is not None and not isinstance(self.pool, PoolSpec):
            object.__setattr__(self, "pool", PoolSpec(**self.pool))
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "input_hw", _pair(self.input_hw))
        if not stages:
            raise ValueError("architecture needs at least one stage")
        names = [s.name for s in stages]
        if len(set(names)) != len(names):
            raise ValueError(f"stage names must be distinct: {names}")
        if self.stem.in_channels != self.in_channels:
            raise ValueError("stem input channels do not match architecture input")
        ch = self.stem.out_channels
        for s in stages:
            if s.blocks[0].in_channels != ch:
                raise ValueError(f"stage {s.name!r} expects {s.blocks[0].in_channels} channels, gets {ch}")
            ch = s.out_channels
        res = [s.out_hw[0] * s.out_hw[1] for s in stages]
        if any(b > a for a, b in zip(res, res[1:])):
            raise ValueError("stage resolutions must be non-increasing")

    @property
    def n_stages(self):
        return len(self.stages)

    def stage_hw(self, input_hw=None):
        """Boundary resolutions for a given input size."""
        hw = self.stem.output_hw(_pair(input_hw or self.input_hw))
        if self.pool is not None:
            p = self.pool
            hw = tuple((x + 2 * p.padding - p.kernel) // p.stride + 1 for x in hw)
        out = []
        for s in self.stages:
            for b in s.blocks:
                hw = b.output_hw(hw)
            out.append(hw)
        return out


# --------------------------------------------------------------------------
# presets


def _bottleneck(cin, width, cout, stride=1, groups=1, last_groups=1, downsample=None, target=None):
    ds = downsample or ("stride" if stride > 1 else "none")
    return BlockSpec("bottleneck", (
        ConvSpec(cin, width, 1, 1, 0, groups),
        ConvSpec(width, width, 3, stride, 1, groups),
        ConvSpec(width, cout, 1, 1, 0, last_groups),
    ), downsample=ds, target=target)


def _basic(cin, cout, stride=1, downsample=None, target=None):
    ds = downsample or ("stride" if stride > 1 else "none")
    return BlockSpec("basic", (ConvSpec(cin, cout, 3, stride, 1), ConvSpec(cout, cout, 3, 1, 1)),
                     downsample=ds, target=target)


def _resnet50(input_hw=(224, 224)):
    h, w = input_hw
    stages = []
    cin = 64
    res = (h // 4, w // 4)
    for i, (name, n, width) in enumerate(
            [("conv1+res2", 3, 64), ("res3", 4, 128), ("res4", 6, 256), ("res5", 3, 512)]):
        blocks = []
        if i > 0:
            res = ((res[0] + 1) // 2, (res[1] + 1) // 2)
        for j in range(n):
            stride = 2 if (i > 0 and j == 0) else 1
            blocks.append(_bottleneck(cin, width, 4 * width, stride))
            cin = 4 * width
        stages.append(StageSpec(name, tuple(blocks), res, width))
    return ArchitectureSpec(ConvSpec(3, 64, 7, 2, 3), tuple(stages), input_hw, 3, PoolSpec(3, 2, 1),
                            name="resnet50")


_PRESNET_RES = (56, 36, 24, 16, 12, 8)


def _presnet50(input_hw=(224, 224)):
    h, w = input_hw
    sizes = [(max(1, round(r * h / 224)), max(1, round(r * w / 224))) for r in _PRESNET_RES]
    stages = []
    cin = 32
    names = ["conv1+res2", "res3", "res4", "res5", "res6", "res7"]
    for i, width in enumerate((56, 96)):
        blocks = []
        for j in range(3):
            bil = i > 0 and j == 0
            blocks.append(_basic(cin, width, downsample="bilinear" if bil else "none",
                                 target=sizes[i] if bil else None))
            cin = width
        stages.append(StageSpec(names[i], tuple(blocks), sizes[i], width))
    for i, (width, groups) in enumerate([(144, 1), (256, 2), (512, 16), (1024, 128)], start=2):
        blocks = []
        for j in range(3):
            blocks.append(_bottleneck(cin, width, 4 * width, groups=groups,
                                      last_groups=1 if j == 0 else groups,
                                      downsample="bilinear" if j == 0 else "none",
                                      target=sizes[i] if j == 0 else None))
            cin = 4 * width
        stages.append(StageSpec(names[i], tuple(blocks), sizes[i], width))
    return ArchitectureSpec(ConvSpec(3, 32, 7, 2, 3), tuple(stages), input_hw, 3, PoolSpec(3, 2, 1),
                            name="presnet50")


def _toy(k, input_hw=(32, 32), width=8):
    if k < 1:
        raise ValueError("toy architecture needs at least one stage")
    stages = []
    cin = width
    hw = tuple(input_hw)
    for i in range(k):
        cout = width * 2 ** i
        stride = 1 if i == 0 else 2
        if stride > 1:
            hw = ((hw[0] + 1) // 2, (hw[1] + 1) // 2)
        stages.append(StageSpec(f"stage{i}", (_basic(cin, cout, stride),), hw, cout))
        cin = cout
    return ArchitectureSpec(ConvSpec(3, width, 3, 1, 1), tuple(stages), input_hw, 3, None,
                            name=f"toy{k}")


def preset_arch(name: str, input_hw=None) -> ArchitectureSpec:
    """Named architectures: ``resnet50``, ``presnet50`` and ``toy<k>``.

    ``toy<k>`` has ``k`` stages of one basic block each, with 8, 16, 32, ...
    channels; every stage after the first halves the resolution.
    """
    key = name.lower().replace("-", "").replace("_", "")
    if key == "resnet50":
        return _resnet50(_pair(input_hw or 224))
    if key == "presnet50":
        return _presnet50(_pair(input_hw or 224))
    if key.startswith("toy") and key[3:].isdigit():
        return _toy(int(key[3:]), _pair(input_hw or 32))
    raise ValueError(f"unknown architecture preset {name!r}")


# --------------------------------------------------------------------------
# graph builders


def conv2d(g: Graph, x: int, spec: ConvSpec, name: str, key: str | None = None) -> int:
    """Append a convolution; ``key`` names the initializer stream (default ``name``)."""
    fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
    w = g.param(name + ".w", spec.weight_shape, fan_in=fan_in, key=(key or name) + ".w")
    if g.shape(x)[1] != spec.in_channels:
        raise ShapeError(f"{name}: expects {spec.in_channels} channels, got {g.shape(x)[1]}")
    return g.conv2d(x, w, spec.stride, spec.padding, spec.groups)


def batch_norm(g: Graph, x: int, name: str) -> int:
    c = g.shape(x)[1]
    gamma = g.param(name + ".gamma", (c,), kind="ones")
    beta = g.param(name + ".beta", (c,), kind="zeros")
    return g.batch_norm(x, gamma, beta, buffer=name)


def bilinear_resize(g: Graph, x: int, size) -> int:
    return g.bilinear_resize(x, _pair(size))


def global_avg_pool(g: Graph, x: int) -> int:
    return g.global_avg_pool(x)


def apply_block(g: Graph, x: int, spec: BlockSpec, name: str, key: str | None = None) -> int:
    """Append one block; returns the block output node."""
    key = key or name
    bilinear = spec.downsample == "bilinear"
    h = x
    n = len(spec.convs)
    for i, conv in enumerate(spec.convs):
        if bilinear:
            conv = replace(conv, stride=(1, 1))
        h = conv2d(g, h, conv, f"{name}.conv{i}", f"{key}.conv{i}")
        h = batch_norm(g, h, f"{name}.bn{i}")
        if i < n - 1 or not spec.residual:
            h = g.relu(h)
        if bilinear and i == spec.resize_after:
            h = g.bilinear_resize(h, spec.target)
    if not spec.residual:
        return h
    short = x
    if bilinear and g.shape(short)[2:] != spec.target:
        short = g.bilinear_resize(short, spec.target)
    needs_proj = spec.in_channels != spec.out_channels or (not bilinear and spec.stride != (1, 1))
    if needs_proj:
        stride = (1, 1) if bilinear else spec.stride
        proj = ConvSpec(spec.in_channels, spec.out_channels, 1, stride, 0)
        short = conv2d(g, short, proj, f"{name}.proj", f"{key}.proj")
        short = batch_norm(g, short, f"{name}.proj_bn")
    if g.shape(short) != g.shape(h):
        raise ShapeError(f"{name}: residual shapes differ {g.shape(short)} vs {g.shape(h)}")
    return g.relu(g.add(h, short))


@dataclass
class Stage:
    """Evaluator for one encoder stage (stage 0 also owns the stem)."""

    index: int
    spec: StageSpec
    stem: ConvSpec | None = None
    pool: PoolSpec | None = None

    def apply(self, g: Graph, x: int, prefix: str = "", n_blocks: int | None = None,
              scope: str | None = None):
        """Append this stage; returns ``(output, block_outputs)``.

        ``prefix`` renames every parameter, which is how replicas are made;
        replicas keep the canonical initializer streams so they start out
        identical. ``n_blocks`` limits the stage to its leading blocks.
        """
        base = f"stage{self.index}"
        outs = []
        with g.scoped(scope or base):
            h = x
            if self.stem is not None:
                h = conv2d(g, h, self.stem, f"{prefix}{base}.stem", f"{base}.stem")
                h = batch_norm(g, h, f"{prefix}{base}.stem_bn")
                h = g.relu(h)
                if self.pool is not None:
                    h = g.max_pool2d(h, self.pool.kernel, self.pool.stride, self.pool.padding)
            blocks = self.spec.blocks if n_blocks is None else self.spec.blocks[:n_blocks]
            for j, b in enumerate(blocks):
                with g.scoped(f"block{j}"):
                    h = apply_block(g, h, b, f"{prefix}{base}.block{j}", f"{base}.block{j}")
                outs.append(h)
        return h, outs

    def param_prefix(self, prefix=""):
        return f"{prefix}stage{self.index}."


@dataclass
class Encoder:
    arch: ArchitectureSpec
    stages: list = field(default_factory=list)

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    def __getitem__(self, i):
        return self.stages[i]

    def apply(self, g: Graph, x: int, name_boundaries=True):
        """Run all stages; returns ``(boundaries, block_outputs_per_stage)``."""
        boundaries, blocks = [], []
        h = x
        for st in self.stages:
            h, outs = st.apply(g, h)
            if name_boundaries:
                g.mark(f"boundary{st.index}", h)
            boundaries.append(h)
            blocks.append(outs)
        return boundaries, blocks


def build_encoder(arch: ArchitectureSpec) -> Encoder:
    stages = []
    for i, s in enumerate(arch.stages):
        stages.append(Stage(i, s, arch.stem if i == 0 else None, arch.pool if i == 0 else None))
    return Encoder(arch, stages)


# --------------------------------------------------------------------------
# JSON


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def arch_to_dict(arch: ArchitectureSpec) -> dict:
    return _tuples_to_lists(asdict(arch))


def arch_from_dict(d: dict) -> ArchitectureSpec:
    return ArchitectureSpec(**d)


def arch_to_json(arch: ArchitectureSpec, indent=None) -> str:
    return json.dumps(arch_to_dict(arch), indent=indent)


def arch_from_json(text: str) -> ArchitectureSpec:
    return arch_from_dict(json.loads(text))


def stage_channels(arch: ArchitectureSpec) -> Sequence[int]:
    return [s.out_channels for s in arch.stages]
