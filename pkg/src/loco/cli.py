"""``loco`` command line.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import MemoryModel, StageStats, fit_overhead, peak_memory, simulate_parallel, stage_stats
from .autograd import ParamStore, gradcheck
from .blocks import preset_arch
from .config import SEED_ENV, ConfigError, load_config, serialize
from .contrastive import DecoderSpec
from .data import make_synthetic, read_raw, write_raw
from .topology import LocalNetwork, build_units
from .training import (MetricsWriter, ProbeConfig, linear_probe, load_checkpoint, save_checkpoint,
                       train)

__all__ = ["main", "run", "EXIT_OK", "EXIT_CHECK", "EXIT_CONFIG", "EXIT_RUNTIME"]

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("loco")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _hw(text):
    vals = [int(v) for v in text.lower().replace("x", ",").split(",")]
    return (vals[0], vals[0]) if len(vals) == 1 else tuple(vals[:2])


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset.load()
    (out / "config.json").write_text(serialize(cfg) + "\n")
    stem = out / "checkpoint"

    def on_checkpoint(ckpt):
        name = f"{stem}.loco" if ckpt.step == cfg.train.schedule.total_steps else f"{stem}_{ckpt.step}.loco"
        save_checkpoint(name, ckpt)

    with open(out / "metrics.csv", "w", newline="") as stream:
        writer = MetricsWriter(stream, cfg.metrics_every)
        result = train(cfg.train, dataset, metrics_sink=writer.write, checkpoint_sink=on_checkpoint)
        writer.close()
    route = result.route.to_dict() if result.route else {}
    (out / "route.json").write_text(json.dumps(route, indent=2) + "\n")
    last = result.metrics[-1]
    _emit({"steps": len(result.metrics), "checkpoint": f"{stem}.loco",
           "metrics": str(out / "metrics.csv"),
           "final_losses": [last[k] for k in last if k.startswith("unit_")],
           "route": route})
    return EXIT_OK


def cmd_probe(args):
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint, cfg.train)
    if args.data:
        dataset = read_raw(args.data)
    else:
        dataset = cfg.probe_dataset.load()
    probe = cfg.probe
    if args.epochs:
        probe = ProbeConfig(**{**probe.__dict__, "epochs": args.epochs})
    acc = linear_probe(ckpt, dataset, probe, train_config=cfg.train)
    _emit({"accuracy": acc, "n_images": len(dataset), "checkpoint": str(args.checkpoint)}, args.out)
    return EXIT_OK


def cmd_analyze_memory(args):
    if args.fractions:
        stats = StageStats.from_fractions(_floats(args.fractions))
    else:
        hw = _hw(args.input_hw)
        stats = stage_stats(args.arch, hw, args.batch, args.bytes, args.accounting,
                            include_decoder=args.include_decoder)
    topo = build_units(stats.n_stages, args.topology)
    report = {"stats": stats.to_dict(), "topology": topo.label}
    overhead = args.overhead
    if args.target is not None:
        overhead = fit_overhead(stats, args.fit_topology or args.topology, args.target)
        report["fitted_overhead"] = overhead
    rep = peak_memory(stats, topo, MemoryModel(overhead, args.bytes, args.batch))
    report.update(rep.to_dict())
    report["overhead"] = overhead
    _emit(report, args.out)
    return EXIT_OK


def cmd_simulate(args):
    fwd = _floats(args.fwd) if args.fwd else [1.0] * args.stages
    bwd = _floats(args.bwd) if args.bwd else [1.0] * len(fwd)
    if len(fwd) != args.stages:
        raise ConfigError(f"--fwd lists {len(fwd)} costs for {args.stages} stages")
    rep = simulate_parallel(fwd, bwd, args.topology, args.micro)
    if args.timeline:
        Path(args.timeline).write_text(rep.timeline_csv())
    _emit(rep.to_dict(), args.out)
    return EXIT_OK


def gradcheck_network(arch_name, topology, batch=4, hw=(8, 8), eps=1e-5, seed=0, decoder=None,
                      max_elements=4):
    """Max relative finite-difference error per unit and parameter (float64)."""
    arch = preset_arch(arch_name, hw)
    topo = build_units(arch.n_stages, topology, block_counts=[len(s.blocks) for s in arch.stages])
    net = LocalNetwork(arch, topo, decoder or DecoderSpec(projection_dim=16),
                       0.5, ParamStore(seed, np.float64))
    rng = np.random.default_rng(seed)
    views = rng.uniform(-1, 1, size=(2 * batch, arch.in_channels) + tuple(hw))
    net.forward_once(views)
    g = net.graph
    rows = []
    for i, loss in enumerate(net.loss_nodes):
        _, visited = g.backward(loss, stop_at=net.cuts[i])
        fed = {i for nid in visited for i in g.nodes[nid].inputs}
        names = sorted(n for n, nid in g.params.items() if nid in fed)
        errs = gradcheck(g, loss, names, eps=eps, max_elements=max_elements, seed=seed + i,
                         stop_at=net.cuts[i])
        rows.extend({"unit": i, "param": n, "max_rel_err": e} for n, e in errs.items())
    return rows


def cmd_gradcheck(args):
    rows = gradcheck_network(args.arch, args.topology, args.batch, _hw(args.input_hw), args.eps,
                             args.seed)
    checked = [r["max_rel_err"] for r in rows if not np.isnan(r["max_rel_err"])]
    worst = max(checked) if checked else float("nan")
    width = max(len(r["param"]) for r in rows)
    for r in rows:
        e = r["max_rel_err"]
        flag = "  (all probes crossed a kink)" if np.isnan(e) else ("" if e < args.tol else "  FAIL")
        print(f"unit{r['unit']}  {r['param']:<{width}}  {e:.3e}{flag}")
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if checked and worst < args.tol else EXIT_CHECK


def cmd_gen_data(args):
    seed = int(os.environ.get(SEED_ENV, args.seed))
    ds = make_synthetic(args.size, seed, _hw(args.hw), args.classes)
    if args.no_labels:
        ds.labels = None
    write_raw(args.out, ds)
    _emit({"path": args.out, "count": len(ds), "seed": seed})
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="loco", description="Local contrastive learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="contrastive pretraining from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="linear-probe accuracy of a checkpoint")
    pr.add_argument("--config", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", help="labelled LCIM file (default: probe_dataset of the config)")
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("analyze-memory", help="per-stage stats and peak-memory ratio")
    a.add_argument("--arch", default="resnet50")
    a.add_argument("--topology", default="gim")
    a.add_argument("--input-hw", default="224")
    a.add_argument("--batch", type=int, default=1)
    a.add_argument("--bytes", type=int, default=4)
    a.add_argument("--accounting", choices=("layers", "blocks"), default="blocks")
    a.add_argument("--include-decoder", action="store_true")
    a.add_argument("--overhead", type=float, default=0.0)
    a.add_argument("--target", type=float, help="fit the overhead to this ratio first")
    a.add_argument("--fit-topology", help="topology the target refers to (default --topology)")
    a.add_argument("--fractions", help="comma-separated per-stage activation shares")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze_memory)

    s = sub.add_parser("simulate-parallel", help="pipeline schedule simulation")
    s.add_argument("--stages", type=int, required=True)
    s.add_argument("--micro", type=int, default=1)
    s.add_argument("--topology", default="e2e")
    s.add_argument("--fwd", help="comma-separated forward costs (default 1 each)")
    s.add_argument("--bwd", help="comma-separated backward costs (default 1 each)")
    s.add_argument("--timeline", help="write the event timeline CSV here")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gradcheck", help="finite-difference check of a local network")
    g.add_argument("--arch", default="toy3")
    g.add_argument("--topology", default="loco")
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--input-hw", default="8")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic LCIM dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--size", type=int, default=2048)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--hw", default="32")
    d.add_argument("--classes", type=int, default=10)
    d.add_argument("--no-labels", action="store_true")
    d.set_defaults(func=cmd_gen_data)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, FloatingPointError, RuntimeError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
