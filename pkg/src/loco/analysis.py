"""Per-stage memory/FLOPs accounting, topology peak-memory models, and a
discrete-event model-parallel schedule simulator.

FLOPs count multiply-adds of convolutions and linear layers (one MAC = one
FLOP). Backward work is modelled as twice the forward work.

Two activation accounting rules are offered:

``layers``
    every layer output (conv, norm, relu, pool, resize) is counted once;
    residual additions are treated as in place and skipped.
``blocks``
    only block outputs are counted, which is the coarser rule behind the
    per-stage memory shares usually tabulated for ResNets.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, ParamStore
from .blocks import ConvSpec, build_encoder, preset_arch
from .contrastive import DecoderSpec, build_decoder
from .topology import TopologySpec, build_units

__all__ = [
    "StageStats",
    "MemoryModel",
    "MemoryReport",
    "ScheduleReport",
    "conv_flops",
    "graph_flops",
    "stage_stats",
    "peak_memory",
    "fit_overhead",
    "simulate_parallel",
    "ACTIVATION_OPS",
]

ACTIVATION_OPS = frozenset({"conv2d", "batch_norm", "relu", "max_pool2d", "bilinear_resize",
                            "global_avg_pool", "linear"})


def conv_flops(spec: ConvSpec, in_hw, batch: int = 1) -> int:
    """Multiply-adds of one convolution: out elements x (kh * kw * in / groups)."""
    ho, wo = spec.output_hw(in_hw)
    per_out = spec.kernel[0] * spec.kernel[1] * spec.in_channels // spec.groups
    return batch * ho * wo * spec.out_channels * per_out


def _node_flops(g: Graph, node) -> int:
    if node.op == "conv2d":
        _, cg, kh, kw = g.shape(node.inputs[1])
        return int(np.prod(node.shape)) * cg * kh * kw
    if node.op in ("linear", "matmul"):
        k = g.shape(node.inputs[0])[-1]
        return int(np.prod(node.shape)) * k
    return 0


def graph_flops(g: Graph, scope_prefix: str = "") -> int:
    return sum(_node_flops(g, nd) for nd in g.nodes if nd.scope.startswith(scope_prefix))


def _stage_index(scope: str):
    head = scope.split("/", 1)[0]
    if head.startswith("stage") and head[5:].isdigit():
        return int(head[5:])
    return None


@dataclass(frozen=True)
class StageStats:
    """Per-stage totals for one batch.

    ``activation_bytes`` follow the chosen accounting rule; ``decoder_bytes``
    hold the activations of a decoder attached at each stage's output and are
    only populated when requested.
    """

    names: tuple
    activation_bytes: tuple
    param_bytes: tuple
    forward_flops: tuple
    block_bytes: tuple = ()
    decoder_bytes: tuple = ()
    batch: int = 1
    bytes_per_element: int = 4
    accounting: str = "layers"

    def __post_init__(self):
        n = len(self.names)
        for f in ("activation_bytes", "param_bytes", "forward_flops"):
            v = getattr(self, f)
            if len(v) != n:
                raise ValueError(f"{f} has {len(v)} entries for {n} stages")
            if any(x < 0 for x in v):
                raise ValueError(f"{f} must be non-negative")
        if not self.decoder_bytes:
            object.__setattr__(self, "decoder_bytes", (0,) * n)

    @classmethod
    def from_fractions(cls, fractions, flops=None, names=None):
        """Stats from published per-stage shares (activations in abstract units)."""
        fractions = tuple(float(f) for f in fractions)
        n = len(fractions)
        flops = tuple(float(f) for f in flops) if flops is not None else (0.0,) * n
        names = tuple(names) if names is not None else tuple(f"stage{i}" for i in range(n))
        return cls(names, fractions, (0.0,) * n, flops, accounting="given")

    @property
    def n_stages(self):
        return len(self.names)

    @property
    def backward_flops(self):
        return tuple(2 * f for f in self.forward_flops)

    @property
    def total_activation_bytes(self):
        return sum(self.activation_bytes)

    @property
    def total_flops(self):
        return sum(self.forward_flops)

    def activation_fractions(self):
        t = self.total_activation_bytes
        return tuple(a / t for a in self.activation_bytes)

    def flops_fractions(self):
        t = self.total_flops
        return tuple(f / t for f in self.forward_flops)

    def to_dict(self):
        return {
            "names": list(self.names),
            "accounting": self.accounting,
            "batch": self.batch,
            "bytes_per_element": self.bytes_per_element,
            "activation_bytes": list(self.activation_bytes),
            "activation_fraction": list(self.activation_fractions()),
            "param_bytes": list(self.param_bytes),
            "forward_flops": list(self.forward_flops),
            "backward_flops": list(self.backward_flops),
            "flops_fraction": list(self.flops_fractions()) if self.total_flops else [],
            "decoder_bytes": list(self.decoder_bytes),
            "total_flops": self.total_flops,
            "total_activation_bytes": self.total_activation_bytes,
        }


def stage_stats(arch, input_hw=None, batch: int = 1, bytes_per_element: int = 4,
                accounting: str = "layers", include_decoder: bool = False,
                decoder: DecoderSpec | None = None) -> StageStats:
    """Closed-form accounting from a shape-only graph of the encoder.

    ``arch`` is an :class:`ArchitectureSpec` or a preset name.
    """
    if accounting not in ("layers", "blocks"):
        raise ValueError(f"unknown accounting rule {accounting!r}")
    if batch < 1 or bytes_per_element < 1:
        raise ValueError("batch and bytes_per_element must be >= 1")
    if isinstance(arch, str):
        arch = preset_arch(arch, input_hw)
    hw = tuple(input_hw) if input_hw is not None else tuple(arch.input_hw)
    g = Graph(ParamStore())
    x = g.input("x", (1, arch.in_channels) + hw)
    boundaries, blocks = build_encoder(arch).apply(g, x)
    n = arch.n_stages
    elems = [0] * n
    flops = [0] * n
    for nd in g.nodes:
        s = _stage_index(nd.scope)
        if s is None:
            continue
        flops[s] += _node_flops(g, nd)
        if nd.op in ACTIVATION_OPS:
            elems[s] += int(np.prod(nd.shape))
    block_elems = [tuple(int(np.prod(g.shape(b))) for b in outs) for outs in blocks]
    if accounting == "blocks":
        elems = [sum(b) for b in block_elems]
    params = [0] * n
    for name in g.params:
        s = _stage_index(name.split(".", 1)[0])
        if s is not None:
            params[s] += int(np.prod(g.shape(g.params[name])))
    dec = [0] * n
    if include_decoder:
        spec = decoder or DecoderSpec()
        for i, b in enumerate(boundaries):
            shape = g.shape(b)
            kind = arch.stages[i].blocks[-1].kind
            d = build_decoder(spec, shape[1], shape[2:], kind, arch, i)
            before = len(g.nodes)
            d.apply(g, b, f"decoder{i}")
            dec[i] = sum(int(np.prod(nd.shape)) for nd in g.nodes[before:]
                         if nd.op in ACTIVATION_OPS)
    scale = batch * bytes_per_element
    return StageStats(
        names=tuple(s.name for s in arch.stages),
        activation_bytes=tuple(e * scale for e in elems),
        param_bytes=tuple(p * bytes_per_element for p in params),
        forward_flops=tuple(f * batch for f in flops),
        block_bytes=tuple(tuple(e * scale for e in b) for b in block_elems),
        decoder_bytes=tuple(d * scale for d in dec),
        batch=batch,
        bytes_per_element=bytes_per_element,
        accounting=accounting,
    )


# --------------------------------------------------------------------------
# peak memory


@dataclass(frozen=True)
class MemoryModel:
    """``overhead`` is a fraction of the e2e activation total added to every
    topology's peak (weights, optimizer state, framework buffers)."""

    overhead: float = 0.0
    bytes_per_element: int = 4
    batch: int = 1

    def __post_init__(self):
        if not np.isfinite(self.overhead) or self.overhead < 0:
            raise ValueError("overhead must be finite and >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass(frozen=True)
class MemoryReport:
    topology: str
    activation_peak: float
    e2e_activation: float
    overhead_bytes: float
    peak: float
    e2e_peak: float
    ratio: float

    @property
    def peak_fraction(self):
        return self.activation_peak / self.e2e_activation

    def to_dict(self):
        d = dict(self.__dict__)
        d["peak_fraction"] = self.peak_fraction
        return d


def _as_topology(topology, n_stages) -> TopologySpec:
    if isinstance(topology, TopologySpec):
        if topology.n_stages != n_stages:
            raise ValueError(f"topology covers {topology.n_stages} stages, stats have {n_stages}")
        return topology
    return build_units(n_stages, topology)


def _unit_activation(stats: StageStats, unit) -> float:
    total = sum(stats.activation_bytes[s] for s in unit.stages)
    if unit.extra_blocks and stats.block_bytes:
        total += sum(stats.block_bytes[unit.hi + 1][:unit.extra_blocks])
    return total + stats.decoder_bytes[unit.top_stage]


def _activation_peak(stats: StageStats, topo: TopologySpec) -> float:
    # every stage's activations stay live until all units containing it finish backward
    return max(_unit_activation(stats, u) for u in topo.units)


def peak_memory(stats: StageStats, topology, model: MemoryModel | None = None) -> MemoryReport:
    """Peak bytes of ``topology`` and its saving ratio against e2e.

    e2e holds every stage; gim the largest stage; loco the largest sum over
    a unit's member stages.
    """
    model = model or MemoryModel()
    topo = _as_topology(topology, stats.n_stages)
    e2e = _activation_peak(stats, build_units(stats.n_stages, "e2e"))
    act = _activation_peak(stats, topo)
    over = model.overhead * e2e
    return MemoryReport(topo.label, act, e2e, over, act + over, e2e + over, (e2e + over) / (act + over))


def fit_overhead(stats: StageStats, topology, target: float) -> float:
    """Overhead fraction ``o`` with ``(1 + o) / (p + o) == target``."""
    if not target > 1:
        raise ValueError("target ratio must exceed 1")
    rep = peak_memory(stats, topology, MemoryModel(0.0))
    p = rep.peak_fraction
    if target > rep.ratio * (1 + 1e-12):
        raise ValueError(f"target {target} exceeds the ratio {rep.ratio:.6g} reachable at zero overhead")
    return max((1.0 - target * p) / (target - 1.0), 0.0)


# --------------------------------------------------------------------------
# schedule simulation


@dataclass
class ScheduleReport:
    topology: str
    n_workers: int
    microbatches: int
    makespan: float
    busy: list
    idle: list
    peak_in_flight: list
    events: list = field(default_factory=list)

    @property
    def bubble_fraction(self):
        total = sum(self.busy) + sum(self.idle)
        return sum(self.idle) / total if total else 0.0

    def to_dict(self, with_events=False):
        d = {"topology": self.topology, "n_workers": self.n_workers,
             "microbatches": self.microbatches, "makespan": self.makespan,
             "busy": list(self.busy), "idle": list(self.idle),
             "peak_in_flight": list(self.peak_in_flight),
             "bubble_fraction": self.bubble_fraction}
        if with_events:
            d["events"] = [list(e) for e in self.events]
        return d

    def to_json(self, with_events=False, indent=2):
        return json.dumps(self.to_dict(with_events), indent=indent)

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["event", "worker", "t_start", "t_end"])
        for kind, mb, worker, t0, t1 in self.events:
            w.writerow([f"{kind}:{mb}", worker, repr(float(t0)), repr(float(t1))])
        return buf.getvalue()


_FWD, _BWD = 0, 1


def simulate_parallel(fwd_costs, bwd_costs=None, topology="e2e", microbatches: int = 1) -> ScheduleReport:
    """Event simulation with one worker per stage.

    Forward of microbatch ``b`` on worker ``i`` waits for worker ``i - 1``.
    Under e2e a backward waits for the next worker's backward of the same
    microbatch; under gim and loco it only waits for the worker's own
    forward. Interior loco stages pay twice their backward cost. An idle
    worker picks forwards before backwards, then the lowest microbatch;
    simultaneous events resolve by (time, worker index).
    """
    fwd = [float(c) for c in fwd_costs]
    bwd = [2.0 * c for c in fwd] if bwd_costs is None else [float(c) for c in bwd_costs]
    S = len(fwd)
    if S < 1 or len(bwd) != S:
        raise ValueError("need matching, non-empty forward and backward cost lists")
    if any(c <= 0 for c in fwd + bwd):
        raise ValueError("costs must be positive")
    if microbatches < 1:
        raise ValueError("microbatches must be >= 1")
    topo = _as_topology(topology, S)
    mode = topo.mode if len(topo.units) > 1 else "e2e"
    if mode not in ("e2e", "gim", "loco", "upper_grad_only"):
        raise ValueError(f"simulation supports e2e, gim and loco, not {topo.label}")
    if mode != "e2e":
        bwd = [bwd[i] * len(topo.units_containing(i)) for i in range(S)]
    m = microbatches

    done = {}  # (kind, worker, mb) -> end time
    next_fwd = [0] * S
    pending_bwd = [[] for _ in range(S)]  # heap of ready backward microbatches
    busy_with = [None] * S
    busy = [0.0] * S
    in_flight = [0] * S
    peak = [0] * S
    events = []
    completions = []  # heap of (end, worker, kind, mb)
    t = 0.0
    remaining = 2 * S * m

    def fwd_ready(i):
        b = next_fwd[i]
        if b >= m:
            return None
        if i > 0 and ("F", i - 1, b) not in done:
            return None
        return b

    def bwd_ready(i):
        return pending_bwd[i][0] if pending_bwd[i] else None

    while remaining:
        for i in range(S):
            if busy_with[i] is not None:
                continue
            b = fwd_ready(i)
            if b is not None:
                kind, dur = "F", fwd[i]
                next_fwd[i] += 1
            else:
                b = bwd_ready(i)
                if b is None:
                    continue
                heapq.heappop(pending_bwd[i])
                kind, dur = "B", bwd[i]
            busy_with[i] = (kind, b)
            busy[i] += dur
            events.append((kind, b, i, t, t + dur))
            heapq.heappush(completions, (t + dur, i, _FWD if kind == "F" else _BWD, b))
        t = completions[0][0]
        while completions and completions[0][0] == t:
            _, i, k, b = heapq.heappop(completions)
            kind = "F" if k == _FWD else "B"
            done[(kind, i, b)] = t
            busy_with[i] = None
            remaining -= 1
            if kind == "F":
                in_flight[i] += 1
                peak[i] = max(peak[i], in_flight[i])
                if mode == "e2e" and i < S - 1:
                    continue
                heapq.heappush(pending_bwd[i], b)
            else:
                in_flight[i] -= 1
                if mode == "e2e" and i > 0:
                    heapq.heappush(pending_bwd[i - 1], b)
    makespan = t
    events.sort(key=lambda e: (e[3], e[2], 0 if e[0] == "F" else 1))
    idle = [makespan - b for b in busy]
    return ScheduleReport(topo.label if len(topo.units) > 1 else "e2e", S, m, makespan, busy, idle,
                          peak, events)
