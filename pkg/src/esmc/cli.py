"""``esmc`` command line.

Output layout under ``--out`` (default ``paths.out``)::

    config.json              resolved configuration echo
    manifest.json            simulator ground truth (simulate)
    data/samples.txt         raw samples (simulate)
    data/calibrated.txt      calibrated samples (calibrate)
    checkpoints/model.ckpt   trained parameters (train)
    logs/train.jsonl         per-step losses (train)
    metrics/*.json|.txt      metric reports (train, evaluate, ablate)
    sweeps/sweep.jsonl|.tsv  sweep rows (sweep)
    gap/gap.json             gap report (verify-gap)

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, TrainingDivergedError, UsageError
from .evaluation import case_split_eval, sweep, sweep_table
from .models import load_checkpoint, save_checkpoint
from .samples import calibrate, read_samples, split_by_session, write_samples
from .simulator import gap_oracle, rates, simulate, to_samples, world
from .training import ablate_calibration, prepare_test, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Resolved config plus the output directory of one command."""

    def __init__(self, args):
        overrides = cfgmod.parse_set(args.set)
        if getattr(args, "seed", None) is not None:
            overrides = cfgmod.merge(overrides, {"simulator": {"seed": args.seed},
                                                 "training": {"seed": args.seed}})
        if getattr(args, "preset", None):
            overrides = cfgmod.merge(overrides, {"simulator": {"preset": args.preset}})
        if getattr(args, "rho", None) is not None:
            overrides = cfgmod.merge(overrides, {"simulator": {"deferred_purchase_rate": args.rho}})
        if getattr(args, "variant", None):
            overrides = cfgmod.merge(overrides, {"model": {"variant": args.variant}})
        if getattr(args, "grid", None):
            overrides = cfgmod.merge(overrides, {"evaluation": {"grid": args.grid}})
        if getattr(args, "workers", None):
            overrides = cfgmod.merge(overrides, {"evaluation": {"workers": args.workers}})
        for flag in ("data", "checkpoint"):
            if getattr(args, flag, None):
                overrides = cfgmod.merge(overrides, {"paths": {flag: getattr(args, flag)}})
        if args.out:
            overrides = cfgmod.merge(overrides, {"paths": {"out": args.out}})
        self.cfg = cfgmod.load(args.config, overrides)
        self.out = Path(self.cfg.paths.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.out / "config.json")

    def raw_samples(self):
        path = self.cfg.paths.data
        if path:
            return read_samples(path)
        sim = self.cfg.simulator
        return to_samples(simulate(sim), self.cfg.schema.embed_dim)

    def boundary(self, samples):
        b = self.cfg.evaluation.split_session
        if b is None:
            lo, hi = int(samples.session.min()), int(samples.session.max())
            b = hi + 1 - max(1, round(0.2 * (hi - lo + 1)))
        return b

    def split(self):
        """Raw training partition and calibrated test partition."""
        samples = self.raw_samples()
        sp = split_by_session(samples, self.boundary(samples))
        return sp.train, prepare_test(sp.test)


def cmd_simulate(args, run):
    sim = run.cfg.simulator
    log = simulate(sim)
    samples = to_samples(log, run.cfg.schema.embed_dim)
    (run.out / "data").mkdir(parents=True, exist_ok=True)
    write_samples(samples, run.out / "data" / "samples.txt")
    w = world(sim)
    manifest = {
        "config": sim.to_dict(),
        "preset": run.cfg.preset,
        "model": "p_k = sigmoid(intercept_k + affinity_scale * <u_k, v_k> / sqrt(affinity_dim))",
        "intercepts": None if sim.affinity_dim == 0 else w.intercepts,
        "base_rates": {"click": sim.base_click_prob, "cart_given_click": sim.cart_given_click_prob,
                       "purchase_given_cart": sim.purchase_given_cart_prob},
        "empirical": {k: {"rate": v[0], "stderr": v[1]} for k, v in rates(log).items()},
        "event_counts": log.counts(),
        "n_samples": len(samples),
    }
    _dump(manifest, run.out / "manifest.json")
    print(f"wrote {len(samples)} samples to {run.out / 'data' / 'samples.txt'}")
    for k, v in manifest["empirical"].items():
        print(f"  {k:<20} {v['rate']:.5f} +- {v['stderr']:.5f}")


def cmd_calibrate(args, run):
    samples = run.raw_samples()
    out, stats = calibrate(samples)
    (run.out / "data").mkdir(parents=True, exist_ok=True)
    write_samples(out, run.out / "data" / "calibrated.txt")
    _dump({"moved": stats.moved, "implicit": stats.implicit, "n_samples": len(out)},
          run.out / "data" / "calibration.json")
    print(f"calibrated {len(out)} samples: {stats.moved} cart labels moved, {stats.implicit} implicit carts")


def _report(rep, stem, run):
    _dump(rep.to_dict(), run.out / "metrics" / f"{stem}.json")
    (run.out / "metrics" / f"{stem}.txt").write_text(rep.table() + "\n")
    print(rep.table())


def cmd_train(args, run):
    train_part, test = run.split()
    (run.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run.out / "logs").mkdir(parents=True, exist_ok=True)
    tc = run.cfg.train
    try:
        res = train(tc, train_part)
    except TrainingDivergedError as exc:
        save_checkpoint(exc.model, run.out / "checkpoints" / "last_good.ckpt",
                        weights=tc.weights.__dict__, extra={"diverged_at": exc.step})
        write_log(exc.log, run.out / "logs" / "train.jsonl")
        raise
    extra = {"steps": res.steps, "train_samples": len(train_part)}
    save_checkpoint(res.model, run.out / "checkpoints" / "model.ckpt",
                    weights=res.weights.__dict__, extra=extra)
    write_log(res.log, run.out / "logs" / "train.jsonl")
    _report(case_split_eval(res.model, test, run.cfg.evaluation.strict_auc), "metrics", run)


def cmd_evaluate(args, run):
    path = run.cfg.paths.checkpoint or run.out / "checkpoints" / "model.ckpt"
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    _, test = run.split()
    model, _ = load_checkpoint(path, expected_schema=test.schema)
    _report(case_split_eval(model, test, run.cfg.evaluation.strict_auc), "eval", run)


def cmd_sweep(args, run):
    train_part, test = run.split()
    ev = run.cfg.evaluation
    d = run.out / "sweeps"
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    with open(d / "sweep.jsonl", "w") as fh:
        def keep(row):
            rows.append(row)
            fh.write(json.dumps({k: v for k, v in row.items() if k != "traceback"},
                                sort_keys=True) + "\n")
            fh.flush()
        sweep(run.cfg.train, ev.grid, ev.seeds, train_part, test, ev.workers, on_row=keep)
    (d / "sweep.tsv").write_text(sweep_table(rows) + "\n")
    print(sweep_table(rows))
    failed = [r for r in rows if r.get("error")]
    if failed:
        raise RuntimeError(f"{len(failed)} of {len(rows)} sweep runs failed; first: {failed[0]['error']}")


def cmd_verify_gap(args, run):
    rep = gap_oracle(run.cfg.simulator, args.n, run.cfg.simulator.seed)
    _dump(rep.to_dict(), run.out / "gap" / "gap.json")
    for k, v in rep.to_dict().items():
        print(f"{k:<20} {v}")


def cmd_ablate(args, run):
    train_part, test = run.split()
    rep = ablate_calibration(run.cfg.train, train_part, test)
    _dump(rep.to_dict(), run.out / "metrics" / "ablation.json")
    for tag, r in rep.reports.items():
        print(f"[{tag}]")
        print(r.table())
    print(f"identical parameters: {rep.identical}")


COMMANDS = {
    "simulate": cmd_simulate, "calibrate": cmd_calibrate, "train": cmd_train,
    "evaluate": cmd_evaluate, "sweep": cmd_sweep, "verify-gap": cmd_verify_gap,
    "ablate": cmd_ablate,
}


def build_parser():
    p = _Parser(prog="esmc", description="Entire-space multi-task CVR models on synthetic sessions.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML or JSON run config")
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, help="seed for both simulator and training")
        s.add_argument("--preset", help="simulator preset")
        s.add_argument("--rho", type=float, help="deferred purchase rate")
        if name in ("calibrate", "train", "evaluate", "sweep", "ablate"):
            s.add_argument("--data", help="sample file (default: simulate from the config)")
        if name in ("train", "evaluate", "sweep"):
            s.add_argument("--variant", help="model variant")
        if name == "evaluate":
            s.add_argument("--checkpoint", help="checkpoint to evaluate")
        if name == "sweep":
            s.add_argument("--grid", choices=sorted(cfgmod.NAMED_GRIDS), help="named grid")
            s.add_argument("--workers", type=int, help="parallel runs")
        if name == "verify-gap":
            s.add_argument("--n", type=int, default=1_000_000, help="exposures to simulate")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        run = Run(args)
        COMMANDS[args.command](args, run)
    except (UsageError, ConfigError) as exc:
        print(f"esmc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any runtime failure: one line, exit 2
        print(f"esmc: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
