"""Command-line front end.

Exit codes: 0 ok, 2 parse error, 3 infeasible action or broken schedule
invariant, 4 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import env as E
from . import evaluation as EV
from . import instances as I
from . import policy as P
from . import rules as R
from . import training as T
from .oracle import ScheduleInvalid

EXIT_OK, EXIT_PARSE, EXIT_INVARIANT, EXIT_CONFIG = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_solver_flags(sp, required=True):
    g = sp.add_mutually_exclusive_group(required=required)
    g.add_argument("--rule", help=f"dispatching rule: {', '.join(r.value for r in R.Rule)}")
    g.add_argument("--checkpoint", help="policy checkpoint (JSON) to decode with")
    d = sp.add_mutually_exclusive_group()
    d.add_argument("--greedy", action="store_true", help="argmax decoding (default for --checkpoint)")
    d.add_argument("--sample", type=int, metavar="K", help="best of K sampled rollouts")
    sp.add_argument("--kv-cache", action="store_true", help="reuse op-branch outputs between steps")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fjsp-rl", description="Flexible job-shop scheduling: generators, dispatching "
                 "rules, policy training and evaluation.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write random instances")
    g.add_argument("--variant", required=True, type=str.upper, choices=["SD1", "SD2", "JSSP", "FFSP"])
    g.add_argument("--jobs", type=int, required=True)
    g.add_argument("--machines", type=int, help="machine count (FFSP: derived from stages if omitted)")
    g.add_argument("--stages", type=int, help="FFSP stage count")
    g.add_argument("--machines-per-stage", type=int, help="FFSP station size")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=["fjs", "json"], default="fjs")
    g.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("solve", help="solve one instance file")
    s.add_argument("instance")
    _add_solver_flags(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", help="append the result row to this CSV file")
    s.add_argument("--schedule", help="write the schedule CSV here")
    s.add_argument("--gantt", help="write <prefix>.svg and <prefix>.json")

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", help="JSON training config; flags below override it")
    t.add_argument("--algorithm", choices=["reinforce", "ppo"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--instances-per-epoch", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--validation-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output directory for checkpoints and report")
    t.add_argument("--resume", help="state.json to resume from")
    t.add_argument("--quiet", action="store_true")

    b = sub.add_parser("bench", help="solve every instance in a directory and report gaps")
    b.add_argument("--dir", required=True)
    b.add_argument("--refs", help="JSON reference table (default: bundled upper bounds)")
    _add_solver_flags(b)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="results CSV path")
    b.add_argument("--jobs-parallel", type=int, default=os.cpu_count() or 1)

    c = sub.add_parser("gantt", help="render a schedule CSV as SVG + JSON")
    c.add_argument("--schedule", required=True)
    c.add_argument("--machines", type=int)
    c.add_argument("--out", required=True, help="output prefix")
    return ap


def _solver(args) -> EV.Solver:
    if args.rule:
        return EV.Solver(rule=args.rule, seed=args.seed)
    return EV.Solver(checkpoint=args.checkpoint, sample_k=args.sample, seed=args.seed,
                     use_kv_cache=args.kv_cache)


def cmd_generate(args) -> int:
    machines = args.machines
    if args.variant == "FFSP" and machines is None and args.stages and args.machines_per_stage:
        machines = args.stages * args.machines_per_stage
    if machines is None:
        raise I.ConfigError("--machines is required")
    os.makedirs(args.out, exist_ok=True)
    for k in range(args.count):
        seed = args.seed + k
        cfg = I.GeneratorConfig(args.variant, args.jobs, machines, args.stages, args.machines_per_stage, seed)
        inst = I.generate(cfg)
        stem = f"{args.variant.lower()}_{args.jobs}x{machines}_s{seed}"
        path = os.path.join(args.out, f"{stem}.{args.format}")
        text = I.write_fjs(inst) if args.format == "fjs" else I.dumps_instance(inst)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(path)
    return EXIT_OK


def cmd_solve(args) -> int:
    inst = I.load_instance(args.instance)
    solver = _solver(args)
    res, sched = EV.evaluate_instance(inst, solver, EV.lookup_reference(I.reference_upper_bounds(), inst.name),
                                      return_schedule=True)
    print(f"makespan {res.best}")
    row = EV.results_to_csv([res])
    print(row, end="")
    if args.csv:
        exists = os.path.exists(args.csv) and os.path.getsize(args.csv) > 0
        with open(args.csv, "a", encoding="utf-8") as fh:
            fh.write(row if not exists else row.split("\n", 1)[1])
    if args.schedule:
        with open(args.schedule, "w", encoding="utf-8") as fh:
            fh.write(E.schedule_to_csv(sched))
    if args.gantt:
        EV.emit_gantt(sched, inst.num_machines, args.gantt)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.loads(fh.read())
    else:
        data = {}
    for key in ("algorithm", "epochs", "instances_per_epoch", "batch_size", "lr", "validation_size", "seed"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    cfg = T.TrainConfig.from_dict(data)
    report = T.train(cfg, out_dir=args.out, resume=args.resume, log=None if args.quiet else print)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    print(f"best validation mean makespan {report.best_val:.3f} at epoch {report.best_epoch}")
    print(f"checkpoint {report.best_checkpoint}")
    return EXIT_OK


def cmd_bench(args) -> int:
    refs = EV.load_reference_table(args.refs)
    results = EV.benchmark_suite(args.dir, _solver(args), refs, args.out, max(1, args.jobs_parallel))
    sys.stdout.write(EV.results_to_csv(results))
    avg = EV.average_gap(results)
    print(f"instances {len(results)} average_gap_pct {'n/a' if avg is None else f'{avg:.4f}'}")
    return EXIT_OK


def cmd_gantt(args) -> int:
    with open(args.schedule, encoding="utf-8") as fh:
        sched = E.schedule_from_csv(fh.read())
    EV.emit_gantt(sched, args.machines, args.out)
    print(f"{args.out}.svg")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "train": cmd_train, "bench": cmd_bench,
            "gantt": cmd_gantt}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except I.ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (E.InfeasibleActionError, EV.ScheduleInvariantError, ScheduleInvalid) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (I.ConfigError, I.InstanceError, P.CheckpointError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


run = main


if __name__ == "__main__":
    sys.exit(main())
