"""Command-line front end: ``neuralccm <command> [flags]``.

Commands: ``train``, ``simulate``, ``evaluate``, ``verify``, ``tube``,
``bench-list`` and ``timing``. Exit status is 0 on success, 2 when a
certificate is not established, 1 on any other error and 64 on bad usage.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import dynamics, simeval, train as training, verify
from .dynamics import Box
from .modelio import ModelFormatError, SavedModel, load_model, save_model

EXIT_OK, EXIT_ERROR, EXIT_REFUTED, EXIT_USAGE = 0, 1, 2, 64
OUT_ENV = "NEURALCCM_OUT"
BOX_NAMES = ("state_box", "control_box", "init_box", "init_error_box")

log = logging.getLogger("neuralccm")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    """Everything a run needs besides command-line overrides.

    Stored as INI text whose values are JSON literals, so
    ``parse(serialize(parse(text))) == parse(text)``.
    """
    system: str = "dubins"
    seed: int = 0
    alpha: float = 0.05
    out: str = ""
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    reference: simeval.ReferenceSpec = field(default_factory=simeval.ReferenceSpec)
    disturbance: simeval.DisturbanceSpec = field(default_factory=simeval.DisturbanceSpec)
    boxes: dict = field(default_factory=dict)  # box name -> Box, overriding the benchmark's

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        unknown = set(self.boxes) - set(BOX_NAMES)
        if unknown:
            raise ValueError(f"unknown box names {sorted(unknown)}")

    def model(self):
        model = dynamics.make_system(self.system, seed=self.seed)
        return dynamics.with_boxes(model, **self.boxes) if self.boxes else model


_SECTIONS = {"train": training.TrainConfig, "reference": simeval.ReferenceSpec,
             "disturbance": simeval.DisturbanceSpec}


def _decode(cls, section):
    kinds = {f.name: f for f in fields(cls)}
    kw = {}
    for key, text in section.items():
        if key not in kinds:
            raise ValueError(f"unknown key {key!r} for [{cls.__name__}]")
        value = json.loads(text)
        default = kinds[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kw[key] = value
    return cls(**kw)


def parse_config(text):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    unknown = set(cp.sections()) - {"run", "boxes", *_SECTIONS}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    run = {k: json.loads(v) for k, v in cp["run"].items()} if cp.has_section("run") else {}
    parts = {name: _decode(cls, cp[name]) if cp.has_section(name) else cls()
             for name, cls in _SECTIONS.items()}
    boxes = {}
    if cp.has_section("boxes"):
        for name, text_ in cp["boxes"].items():
            lo, hi = json.loads(text_)
            boxes[name] = Box(lo, hi)
    return RunConfig(**run, **parts, boxes=boxes)


def serialize_config(cfg):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: json.dumps(getattr(cfg, k)) for k in ("system", "seed", "alpha", "out")}
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        cp[name] = {f.name: json.dumps(getattr(obj, f.name)) for f in fields(obj)}
    cp["boxes"] = {k: json.dumps([b.lower.tolist(), b.upper.tolist()]) for k, b in sorted(cfg.boxes.items())}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------------
# artifacts

def write_history_csv(history, path):
    """One row per epoch: ``epoch, total`` then each risk term."""
    terms = [k for k in history[0] if k not in ("epoch", "total")] if history else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", *terms])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["total"]))] + [repr(float(row[k])) for k in terms])


def write_tube_csv(t, bound, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bound"])
        for a, b in zip(t, bound):
            w.writerow([repr(float(a)), repr(float(b))])


def export_timing(saved, repetitions=10_000, seed=0):
    """Wall time of single controller evaluations, in milliseconds."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    model = model_for(saved)
    rng = np.random.default_rng(seed)
    x = model.state_box.sample(rng, 1)[0]
    xr = model.state_box.sample(rng, 1)[0]
    ur = model.control_box.sample(rng, 1)[0]
    cn = saved.controller
    cn(x, xr, ur)
    samples = []
    clock = time.perf_counter
    for _ in range(repetitions):
        t0 = clock()
        cn(x, xr, ur)
        samples.append(clock() - t0)
    ms = [1e3 * s for s in samples]
    return {"repetitions": repetitions, "mean_ms": statistics.fmean(ms), "median_ms": statistics.median(ms),
            "min_ms": min(ms), "max_ms": max(ms)}


def model_for(saved):
    model = dynamics.make_system(saved.system, seed=int(saved.meta.get("system_seed", 0)))
    boxes = {k: Box(*v) for k, v in saved.meta.get("boxes", {}).items()}
    return dynamics.with_boxes(model, **boxes) if boxes else model


def _out_path(args, cfg, default_name):
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        return args.out
    base = cfg.out or os.environ.get(OUT_ENV, ".")
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, default_name)


# --------------------------------------------------------------------------
# commands

def _apply_overrides(args, cfg):
    if getattr(args, "system", None):
        cfg = replace(cfg, system=args.system)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, alpha=args.alpha)
    tr = cfg.train
    if getattr(args, "arch", None):
        tr = replace(tr, arch=args.arch)
    if getattr(args, "mask", None):
        tr = replace(tr, mask=args.mask == "on")
    if getattr(args, "rate", None) is not None and args.command == "train":
        tr = replace(tr, rate=args.rate)
    for key in ("epochs", "samples"):
        v = getattr(args, key, None)
        if v is not None:
            tr = replace(tr, **{"num_samples" if key == "samples" else key: v})
    if getattr(args, "seed", None) is not None:
        tr = replace(tr, seed=args.seed)
    ref = cfg.reference
    if getattr(args, "horizon", None) is not None:
        ref = replace(ref, horizon=args.horizon)
    dist = cfg.disturbance
    if getattr(args, "sigma", None) is not None:
        dist = replace(dist, sigma=args.sigma)
    return replace(cfg, train=tr, reference=ref, disturbance=dist)


def cmd_bench_list(args, cfg):
    for name in dynamics.BENCHMARKS:
        m = dynamics.make_benchmark(name)
        print(f"{name}\t{m.n}\t{m.m}")
    return EXIT_OK


def cmd_train(args, cfg):
    model = cfg.model()
    out = _out_path(args, cfg, f"{cfg.system}.model.json")
    result = training.train(model, cfg.train)
    meta = {"train": cfg.train.to_dict(), "system_seed": cfg.seed,
            "boxes": {k: [b.lower.tolist(), b.upper.tolist()] for k, b in cfg.boxes.items()}}
    saved = SavedModel(cfg.system, result.metric, result.controller, cfg.train.resolved_rate(model),
                       cfg.seed, meta)
    save_model(out, saved)
    hist = os.path.splitext(out)[0] + ".history.csv"
    write_history_csv(result.history, hist)
    print(json.dumps({"model": out, "history": hist, "final_risk": result.history[-1]["total"]}))
    return EXIT_OK


def _load(args):
    if not args.model:
        raise UsageError("--model is required")
    saved = load_model(args.model)
    if getattr(args, "system", None) and args.system != saved.system:
        raise ValueError(f"model was trained for {saved.system!r}, not {args.system!r}")
    return saved


def _rollouts(args, cfg, saved, runs):
    model = model_for(saved)
    return model, simeval.evaluate(model, saved.controller, runs=runs, seed=cfg.seed,
                                   sigma=cfg.disturbance.sigma, spec=cfg.reference, dt=args.dt,
                                   stepper=args.stepper, workers=args.workers)


def cmd_simulate(args, cfg):
    saved = _load(args)
    _, roll = _rollouts(args, cfg, saved, args.runs)
    out = _out_path(args, cfg, "trajectories")
    os.makedirs(out, exist_ok=True)
    paths = []
    for i, tr in enumerate(roll.trajectories):
        p = os.path.join(out, f"traj_{i:03d}.csv")
        simeval.write_trajectory_csv(tr, p)
        paths.append(p)
    print(json.dumps({"trajectories": paths, "diverged": sum(tr.diverged for tr in roll.trajectories)}))
    return EXIT_OK


def cmd_evaluate(args, cfg):
    saved = _load(args)
    _, roll = _rollouts(args, cfg, saved, args.runs)
    report = {"system": saved.system, "runs": args.runs, "alpha": cfg.alpha, "sigma": cfg.disturbance.sigma,
              "auc": roll.scores("auc", cfg.alpha).to_dict(),
              "rate": roll.scores("neg_rate", cfg.alpha).to_dict(),
              "auc_per_time": [float(a) for a in roll.aucs_per_time],
              "diverged": int(sum(tr.diverged for tr in roll.trajectories))}
    out = _out_path(args, cfg, "scores.json")
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps({"scores": out, "auc_q": report["auc"]["q"], "quantile_index": report["auc"]["quantile_index"]}))
    return EXIT_OK


def _region(args, model):
    er = args.error_radius
    ctrl = model.control_box
    if args.control_radius is not None:
        ctrl = Box(np.maximum(ctrl.center - args.control_radius, ctrl.lower),
                   np.minimum(ctrl.center + args.control_radius, ctrl.upper))
    return verify.Region(model.state_box, Box(-er * np.ones(model.n), er * np.ones(model.n)), ctrl)


def cmd_verify(args, cfg):
    saved = _load(args)
    model = model_for(saved)
    rate = saved.rate if args.rate is None else args.rate
    region = _region(args, model)
    box = region.as_box()
    count = int(np.prod(verify.grid_shape(box.lower, box.upper, args.tau).astype(float)))
    print(f"grid points required: {count}", file=sys.stderr)
    rep = verify.certify(model, saved.metric, saved.controller, region, rate, args.tau,
                         seed=cfg.seed, workers=args.workers, cap=args.grid_cap)
    out = args.report or _out_path(args, cfg, "certificate.json")
    with open(out, "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2)
    print(json.dumps({"report": out, "verdict": rep.verdict, "caveat": rep.caveat}))
    return EXIT_OK if rep.verdict == "certified" else EXIT_REFUTED


def cmd_tube(args, cfg):
    saved = _load(args)
    model = model_for(saved)
    rate = saved.rate if args.rate is None else args.rate
    mc = verify.metric_constants(saved.metric, model.state_box, seed=cfg.seed)
    x0 = np.zeros(model.n)
    dx = np.zeros(model.n)
    dx[0] = args.dx0
    tb = verify.tube_bound(mc.m_lower, mc.m_upper, rate, args.eps, x0, x0 + dx)
    horizon = cfg.reference.horizon or model.horizon
    dt = args.dt or cfg.reference.dt
    t = np.arange(0.0, horizon + dt / 2, dt)
    out = _out_path(args, cfg, "tube.csv")
    write_tube_csv(t, tb(t), out)
    print(json.dumps({"tube": out, "R0": tb.R0, "limit": tb.limit, "m_lower": mc.m_lower, "m_upper": mc.m_upper}))
    return EXIT_OK


def cmd_timing(args, cfg):
    stats = export_timing(_load(args), args.reps, seed=cfg.seed)
    print(json.dumps(stats))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="neuralccm", description="Learn, simulate and certify contraction-based tracking controllers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--system")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("-v", "--verbose", action="store_true")
        if model:
            sp.add_argument("--model")

    def rollout_flags(sp):
        sp.add_argument("--runs", type=int, default=100)
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--stepper", choices=("rk4", "euler"), default="rk4")
        sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("train", help="learn a metric and a controller")
    common(sp, model=False)
    sp.add_argument("--arch", choices=("bottleneck", "simple"))
    sp.add_argument("--mask", choices=("on", "off"))
    sp.add_argument("--lambda", dest="rate", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("simulate", help="closed-loop rollouts written as CSV")
    common(sp)
    rollout_flags(sp)
    sp.set_defaults(runs=1)

    sp = sub.add_parser("evaluate", help="tracking scores and conformal quantiles")
    common(sp)
    rollout_flags(sp)
    sp.add_argument("--alpha", type=float)

    sp = sub.add_parser("verify", help="grid certificate of the contraction condition")
    common(sp)
    sp.add_argument("--tau", type=float, required=True)
    sp.add_argument("--lambda", dest="rate", type=float)
    sp.add_argument("--error-radius", type=float, default=0.1)
    sp.add_argument("--control-radius", type=float)
    sp.add_argument("--grid-cap", type=float, default=verify.DEFAULT_GRID_CAP)
    sp.add_argument("--report")
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("tube", help="disturbance tube bound as CSV")
    common(sp)
    sp.add_argument("--lambda", dest="rate", type=float)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--dx0", type=float, default=0.0)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--dt", type=float)

    sp = sub.add_parser("bench-list", help="registered benchmarks with (n, m)")

    sp = sub.add_parser("timing", help="controller latency statistics")
    common(sp)
    sp.add_argument("--reps", type=int, default=10_000)
    return p


COMMANDS = {"train": cmd_train, "simulate": cmd_simulate, "evaluate": cmd_evaluate, "verify": cmd_verify,
            "tube": cmd_tube, "bench-list": cmd_bench_list, "timing": cmd_timing}


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return EXIT_OK if ex.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
        if getattr(args, "horizon", None) is not None and args.command == "tube":
            cfg = replace(cfg, reference=replace(cfg.reference, horizon=args.horizon))
        cfg = _apply_overrides(args, cfg)
        return COMMANDS[args.command](args, cfg)
    except UsageError as ex:
        parser.print_usage(sys.stderr)
        print(f"neuralccm: error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except ModelFormatError as ex:
        print(f"neuralccm: {ex}", file=sys.stderr)
        return EXIT_ERROR
    except verify.GridTooLarge as ex:
        print(f"neuralccm: {ex}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as ex:
        print(f"neuralccm: {type(ex).__name__}: {ex}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
