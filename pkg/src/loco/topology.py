"""Local learning units over encoder stages and gradient routing between them.

Modes:

``e2e``
    one unit spanning every stage, a single loss at the top.
``gim``
    one unit per stage; backward passes stop at each stage's input.
``loco``
    units ``[i, i+1]``; each interior stage belongs to two units and receives
    the sum of both units' gradients.
``upper_grad_only``
    loco routing, but a shared stage keeps only the upper unit's gradient.
``share_blocks(k)``
    units ``[i, i]`` extended with the first ``k`` blocks of stage ``i+1``.
``soft_share(lam)``
    loco units whose shared stages are separate replicas tied by an L2
    penalty. The forward pass is no longer shared.

In every hard-sharing mode the encoder runs once per batch; only backward
passes are repeated per unit.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, GraphError, ParamStore, ShapeError
from .blocks import ArchitectureSpec, build_encoder
from .contrastive import DecoderSpec, build_decoder

__all__ = [
    "MODES",
    "Unit",
    "TopologySpec",
    "RouteReport",
    "LocalNetwork",
    "parse_mode",
    "build_units",
    "forward_once",
    "local_backward",
    "soft_share_penalty",
    "backward_cost",
]

MODES = ("e2e", "gim", "loco", "share_blocks", "upper_grad_only", "soft_share")


@dataclass(frozen=True)
class Unit:
    lo: int
    hi: int
    extra_blocks: int = 0
    decoder: DecoderSpec | None = None

    @property
    def stages(self):
        return range(self.lo, self.hi + 1)

    @property
    def top_stage(self):
        return self.hi + 1 if self.extra_blocks else self.hi


@dataclass(frozen=True)
class TopologySpec:
    mode: str
    units: tuple
    n_stages: int
    k: int = 0
    lam: float = 0.0

    def units_containing(self, stage: int, blocks=False):
        """Unit indices whose span holds ``stage`` (with ``blocks``, also grafted blocks)."""
        out = []
        for i, u in enumerate(self.units):
            if u.lo <= stage <= u.hi or (blocks and u.extra_blocks and stage == u.hi + 1):
                out.append(i)
        return out

    @property
    def label(self):
        if self.mode == "share_blocks":
            return f"share_blocks({self.k})"
        if self.mode == "soft_share":
            return f"soft_share({self.lam:g})"
        return self.mode


@dataclass
class RouteReport:
    forward_counts: list
    backward_counts: list
    unit_losses: list = field(default_factory=list)
    penalty: float = 0.0

    def to_dict(self):
        return {"forward_counts": list(self.forward_counts),
                "backward_counts": list(self.backward_counts),
                "unit_losses": [float(v) for v in self.unit_losses],
                "penalty": float(self.penalty)}


_MODE_RE = re.compile(r"^\s*([a-z_0-9]+)\s*(?:\(\s*([^)]*)\s*\))?\s*$")


def parse_mode(text: str):
    """``"share_blocks(2)"`` -> ``("share_blocks", 2, 0.0)``."""
    m = _MODE_RE.match(text.lower())
    if not m or m.group(1) not in MODES:
        raise ValueError(f"unknown topology mode {text!r}; expected one of {MODES}")
    mode, arg = m.group(1), m.group(2)
    k, lam = 0, 0.0
    if mode == "share_blocks":
        k = int(arg) if arg else 1
    elif mode == "soft_share":
        lam = float(arg) if arg else 1e-3
    elif arg:
        raise ValueError(f"mode {mode!r} takes no argument")
    return mode, k, lam


def build_units(n_stages: int, mode: str, k: int = 0, lam: float = 0.0,
                block_counts=None, decoder: DecoderSpec | None = None) -> TopologySpec:
    if n_stages < 1:
        raise ValueError("need at least one stage")
    if "(" in mode:
        mode, k, lam = parse_mode(mode)
    if mode not in MODES:
        raise ValueError(f"unknown topology mode {mode!r}")
    if lam < 0:
        raise ValueError("soft sharing strength must be >= 0")
    n = n_stages
    if n == 1 or mode == "e2e":
        units = (Unit(0, n - 1, 0, decoder),)
    elif mode == "gim":
        units = tuple(Unit(i, i, 0, decoder) for i in range(n))
    elif mode in ("loco", "upper_grad_only", "soft_share"):
        units = tuple(Unit(i, i + 1, 0, decoder) for i in range(n - 1))
    else:
        if k < 0:
            raise ValueError("k must be >= 0")
        if block_counts is not None:
            for i in range(1, n):
                if k >= block_counts[i]:
                    raise ValueError(f"share_blocks({k}) needs fewer than {block_counts[i]} "
                                     f"blocks in stage {i}")
        units = tuple(Unit(i, i, k if i < n - 1 else 0, decoder) for i in range(n))
    return TopologySpec(mode, units, n, k, lam)


def soft_share_penalty(replicas, lam: float) -> float:
    """``lam`` times the summed squared distance over unordered replica pairs.

    ``replicas`` is a sequence of parameter maps (name -> array) with equal
    keys and shapes.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    replicas = list(replicas)
    total = 0.0
    for a in range(len(replicas)):
        for b in range(a + 1, len(replicas)):
            ra, rb = replicas[a], replicas[b]
            if set(ra) != set(rb):
                raise ShapeError("replicas hold different parameters")
            for name in sorted(ra):
                x, y = np.asarray(ra[name], np.float64), np.asarray(rb[name], np.float64)
                if x.shape != y.shape:
                    raise ShapeError(f"replica shapes differ for {name}: {x.shape} vs {y.shape}")
                total += float(((x - y) ** 2).sum())
    return lam * total


def backward_cost(spec: TopologySpec, stage_costs, block_costs=None) -> float:
    """Backward work when every unit backpropagates through its whole span.

    A stage is charged once per unit containing it. Grafted blocks are charged
    from ``block_costs[stage][j]`` when given.
    """
    stage_costs = list(stage_costs)
    if len(stage_costs) != spec.n_stages:
        raise ValueError("need one cost per stage")
    total = 0.0
    for u in spec.units:
        total += sum(stage_costs[s] for s in u.stages)
        if u.extra_blocks and block_costs is not None:
            total += sum(block_costs[u.hi + 1][:u.extra_blocks])
    return total


# --------------------------------------------------------------------------


def _stage_of(scope: str):
    head = scope.split("/", 1)[0]
    if head.startswith("stage") and head[5:].isdigit():
        return int(head[5:])
    return None


class LocalNetwork:
    """Encoder, per-unit decoders and losses assembled into one training graph.

    Parameters are held in ``store`` and shared with any inference graph built
    through :meth:`feature_graph`.
    """

    def __init__(self, arch: ArchitectureSpec, topology: TopologySpec,
                 decoder: DecoderSpec | None = None, temperature: float = 0.1,
                 store: ParamStore | None = None):
        if topology.n_stages != arch.n_stages:
            raise ValueError(f"topology covers {topology.n_stages} stages, architecture has "
                             f"{arch.n_stages}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.arch = arch
        self.topology = topology
        self.decoder_spec = decoder or DecoderSpec()
        self.temperature = float(temperature)
        self.store = store if store is not None else ParamStore()
        self.encoder = build_encoder(arch)
        self.graph: Graph | None = None
        self.batch_shape = None

    # -- construction ----------------------------------------------------

    def build(self, batch_shape) -> Graph:
        """Build the training graph for views of shape ``(2N, C, H, W)``."""
        g = Graph(self.store)
        x = g.input("views", batch_shape)
        topo = self.topology
        n = topo.n_stages
        self.forward_counts = [0] * n
        self.replicas: dict[int, list[str]] = {}
        penalties: dict[int, list[int]] = {}
        if topo.mode == "soft_share" and n > 1:
            tops, cuts, penalty_terms = self._build_soft(g, x)
        else:
            boundaries, blocks = self.encoder.apply(g, x)
            self.forward_counts = [1] * n
            self.boundaries = boundaries
            tops, cuts = [], []
            for u in topo.units:
                tops.append(blocks[u.hi + 1][u.extra_blocks - 1] if u.extra_blocks else boundaries[u.hi])
                cuts.append((boundaries[u.lo - 1],) if u.lo > 0 else ())
            penalty_terms = {}
        self.unit_nodes = []
        self.loss_nodes = []
        for i, (u, top) in enumerate(zip(topo.units, tops)):
            spec = u.decoder or self.decoder_spec
            kind = self.arch.stages[u.top_stage].blocks[-1].kind
            dec = build_decoder(spec, g.shape(top)[1], g.shape(top)[2:], kind, self.arch, u.top_stage)
            z = dec.apply(g, top, f"decoder{i}")
            loss = g.info_nce(z, self.temperature)
            g.mark(f"unit{i}_loss", loss)
            self.unit_nodes.append(z)
            objective = loss
            terms = penalty_terms.get(i, [])
            if terms:
                penalties[i] = terms
                objective = g.add(loss, terms[0] if len(terms) == 1 else self._sum(g, terms))
            self.loss_nodes.append(objective)
        self.contrastive_nodes = [g.names[f"unit{i}_loss"] for i in range(len(topo.units))]
        self.penalty_nodes = penalties
        self.cuts = cuts
        self.graph = g
        self.batch_shape = tuple(batch_shape)
        self._stage_params = {s: [p for p in g.params if p.startswith(f"stage{s}.")] for s in range(n)}
        return g

    @staticmethod
    def _sum(g, nodes):
        out = nodes[0]
        for nd in nodes[1:]:
            out = g.add(out, nd)
        return out

    def _build_soft(self, g: Graph, x: int):
        """Replicated shared stages for soft sharing.

        The canonical copy of stage ``j`` is owned by the unit starting at
        ``j`` (the last stage by the last unit) and drives the boundary chain.
        The unit starting at ``j - 1`` runs its own replica, named
        ``u{j-1}/stage{j}...``.
        """
        topo = self.topology
        n = topo.n_stages
        lam = topo.lam
        boundaries = []
        h = x
        for st in self.encoder:
            h, _ = st.apply(g, h)
            g.mark(f"boundary{st.index}", h)
            boundaries.append(h)
            self.forward_counts[st.index] += 1
        self.boundaries = boundaries
        tops, cuts = [], []
        penalty_terms: dict[int, list[int]] = {}
        for i, u in enumerate(topo.units):
            upper = u.hi
            cuts.append((boundaries[u.lo - 1],) if u.lo > 0 else ())
            if upper == n - 1:
                tops.append(boundaries[upper])
                continue
            prefix = f"u{i}/"
            r, _ = self.encoder[upper].apply(g, boundaries[u.lo], prefix=prefix)
            self.forward_counts[upper] += 1
            tops.append(r)
            names = [p for p in g.params if p.startswith(f"stage{upper}.")]
            self.replicas[upper] = names
            # each owner pulls its own copy toward a frozen image of the other
            lower_terms, upper_terms = [], []
            for name in names:
                canon, rep = g.params[name], g.params[prefix + name]
                for own, other, bucket in ((rep, canon, lower_terms), (canon, rep, upper_terms)):
                    d = g.sub(own, g.stop_gradient(other))
                    bucket.append(g.sum(g.mul(d, d)))
            penalty_terms.setdefault(i, []).append(g.scale(self._sum(g, lower_terms), lam))
            penalty_terms.setdefault(i + 1, []).append(g.scale(self._sum(g, upper_terms), lam))
        return tops, cuts, penalty_terms

    # -- execution -------------------------------------------------------

    def forward_once(self, views, training=True) -> RouteReport:
        if self.graph is None or tuple(np.shape(views)) != self.batch_shape:
            self.build(np.shape(views))
        values = self.graph.forward({"views": views}, training=training)
        losses = [float(values[n]) for n in self.contrastive_nodes]
        self.last_report = RouteReport(list(self.forward_counts), [0] * self.topology.n_stages,
                                       losses, self.penalty())
        return self.last_report

    def penalty(self) -> float:
        """Current soft-sharing penalty, counted once per replica pair."""
        if not self.replicas:
            return 0.0
        total = 0.0
        for stage, names in sorted(self.replicas.items()):
            owner = min(self.topology.units_containing(stage))
            total += soft_share_penalty(
                [{n: self.store[n] for n in names},
                 {n: self.store[f"u{owner}/" + n] for n in names}], self.topology.lam)
        return total

    def local_backward(self, per_unit=False):
        """Accumulate every unit's gradients in ascending unit order.

        Returns ``(grads, unit_losses)``, or additionally the per-unit gradient
        maps when ``per_unit`` is set.
        """
        g = self.graph
        if g is None or g.values is None:
            raise GraphError("local_backward needs a completed forward_once")
        topo = self.topology
        total = {name: np.zeros(g.shape(nid), dtype=g.dtype) for name, nid in sorted(g.params.items())}
        counts = [0] * topo.n_stages
        unit_grads = []
        for i, u in enumerate(topo.units):
            grads, visited = g.backward(self.loss_nodes[i], stop_at=self.cuts[i])
            touched = {_stage_of(g.nodes[nid].scope) for nid in visited}
            for s in sorted(t for t in touched if t is not None):
                counts[s] += 1
            if topo.mode == "upper_grad_only" and i < len(topo.units) - 1:
                for name in self._stage_params[u.hi]:
                    grads[name] = np.zeros_like(grads[name])
            for name in total:
                total[name] += grads[name]
            if per_unit:
                unit_grads.append(grads)
        report = getattr(self, "last_report", None)
        if report is not None:
            report.backward_counts = counts
        losses = [float(g.values[n]) for n in self.contrastive_nodes]
        if per_unit:
            return total, losses, unit_grads
        return total, losses

    # -- consolidation and inference ---------------------------------------

    def encoder_state(self) -> dict:
        """Encoder parameters and buffers, replicas averaged into canonical names."""
        state = {}
        for name in self.store.names():
            if name.startswith("stage"):
                state[name] = np.array(self.store[name])
        for key, value in self.store.buffers.items():
            if key.startswith("stage"):
                state["buffer:" + key] = np.array(value)
        for stage, names in self.replicas.items():
            owner = min(self.topology.units_containing(stage))
            prefix = f"u{owner}/"
            for name in names:
                state[name] = ((self.store[name].astype(np.float64)
                                + self.store[prefix + name].astype(np.float64)) / 2
                               ).astype(self.store.dtype)
            for key in list(state):
                if key.startswith(f"buffer:stage{stage}."):
                    rep = self.store.buffers.get(prefix + key[len("buffer:"):])
                    if rep is not None:
                        state[key] = ((state[key].astype(np.float64) + rep) / 2).astype(self.store.dtype)
        return state

    def feature_graph(self, batch_shape, state: dict | None = None):
        """Inference graph: encoder in eval mode, global-average-pooled top boundary."""
        store = ParamStore(self.store.seed, self.store.dtype)
        g = Graph(store)
        x = g.input("images", batch_shape)
        boundaries, _ = self.encoder.apply(g, x)
        feats = g.global_avg_pool(boundaries[-1])
        g.mark("features", feats)
        store.load_state_dict(state if state is not None else self.encoder_state())
        return g, feats

    def features(self, images, batch_size=256):
        images = np.asarray(images)
        state = self.encoder_state()
        out = []
        cache = {}
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            if chunk.shape not in cache:
                cache[chunk.shape] = self.feature_graph(chunk.shape, state)
            g, feats = cache[chunk.shape]
            out.append(g.forward({"images": chunk}, training=False)[feats])
        return np.concatenate(out, axis=0)


def forward_once(net: LocalNetwork, views, training=True) -> RouteReport:
    return net.forward_once(views, training)


def local_backward(net: LocalNetwork, per_unit=False):
    return net.local_backward(per_unit)
