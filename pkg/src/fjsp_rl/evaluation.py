"""Decoding, gap metrics, Gantt export and benchmark tables."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from html import escape

import numpy as np

from . import env as E
from . import policy as P
from . import rules as R
from . import training as T
from .instances import Instance, load_instance
from .oracle import validate_schedule


class ScheduleInvariantError(RuntimeError):
    """A produced schedule broke a constraint; this indicates a bug, not bad input."""


# --------------------------------------------------------------------------- decoders

def decode_greedy(instance: Instance, params: P.PolicyParameters, config: P.PolicyConfig,
                  use_cache: bool | None = None):
    """Argmax rollout. Returns (makespan, schedule)."""
    use_cache = config.use_kv_cache if use_cache is None else use_cache
    if not use_cache:
        tr = T.run_episodes([instance], params, config, greedy=True, record=False)[0]
        return tr.makespan, tr.schedule
    state = E.reset(instance)
    cache = P.KVCache()
    while not state.done:
        out, cache = P.cached_forward(E.extract_features(state), params, config, cache)
        state, _ = E.step(state, out.greedy())
    return E.makespan(state), state.schedule()


def sample_rollouts(instance: Instance, params: P.PolicyParameters, config: P.PolicyConfig,
                    k: int = 100, seed: int = 0, argmax: bool = False) -> list[T.Trajectory]:
    """``k`` independent episodes; sample ``i`` always uses child stream ``i`` of ``seed``."""
    rngs = np.random.default_rng(seed).spawn(k)
    return T.run_episodes([instance] * k, params, config, rngs, greedy=argmax, record=False)


def decode_sampling(instance: Instance, params: P.PolicyParameters, config: P.PolicyConfig,
                    k: int = 100, seed: int = 0, argmax: bool = False):
    """Best of ``k`` sampled rollouts. Returns (best makespan, its schedule)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    trajs = sample_rollouts(instance, params, config, k, seed, argmax)
    best = min(trajs, key=lambda t: t.makespan)
    return best.makespan, best.schedule


def gap(makespan: float, reference: float) -> float:
    if reference is None or reference <= 0:
        raise ValueError(f"reference must be positive, got {reference}")
    return 100.0 * (makespan - reference) / reference


# --------------------------------------------------------------------------- Gantt

def check_no_overlap(schedule: list[E.ScheduledOp]) -> None:
    by_m: dict[int, list[E.ScheduledOp]] = {}
    for s in schedule:
        by_m.setdefault(s.machine, []).append(s)
    for m, bars in by_m.items():
        bars.sort(key=lambda s: s.start)
        for a, b in zip(bars, bars[1:]):
            if b.start < a.finish:
                raise ScheduleInvariantError(f"ops {a.op_id} and {b.op_id} overlap on machine {m}")


def _job_colour(job: int) -> str:
    return f"hsl({(job * 137) % 360},60%,65%)"


def gantt_svg(gantt: dict, width: int = 900, row_height: int = 28) -> str:
    span = max(gantt["makespan"], 1)
    rows = gantt["machines"]
    left, top = 50, 10
    scale = (width - left - 10) / span
    height = top + row_height * len(rows) + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="monospace" font-size="10">']
    for r, row in enumerate(rows):
        y = top + r * row_height
        out.append(f'<text x="4" y="{y + row_height * 0.6:.1f}">M{row["machine"]}</text>')
        for bar in row["bars"]:
            x = left + bar["start"] * scale
            w = (bar["finish"] - bar["start"]) * scale
            out.append(f'<rect x="{x:.2f}" y="{y + 2}" width="{w:.2f}" height="{row_height - 4}" '
                       f'fill="{_job_colour(bar["job"])}" stroke="black" stroke-width="0.5">'
                       f'<title>{escape(bar["label"])} [{bar["start"]},{bar["finish"]})</title></rect>')
            out.append(f'<text x="{x + 2:.2f}" y="{y + row_height * 0.6:.1f}">{escape(bar["label"])}</text>')
    axis_y = top + row_height * len(rows) + 15
    out.append(f'<line x1="{left}" y1="{axis_y - 10}" x2="{left + span * scale:.2f}" y2="{axis_y - 10}" stroke="black"/>')
    out.append(f'<text x="{left}" y="{axis_y + 5}">0</text>')
    out.append(f'<text x="{left + span * scale - 20:.2f}" y="{axis_y + 5}">{gantt["makespan"]}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_gantt(schedule: list[E.ScheduledOp], num_machines: int | None = None,
               path_prefix: str | None = None) -> tuple[str, dict]:
    """SVG text and Gantt JSON for a schedule; writes ``<prefix>.svg/.json`` if asked."""
    check_no_overlap(schedule)
    data = E.gantt_json(schedule, num_machines)
    last = max((b["finish"] for row in data["machines"] for b in row["bars"]), default=0)
    if last != data["makespan"]:
        raise ScheduleInvariantError("last bar end differs from makespan")
    svg = gantt_svg(data)
    if path_prefix:
        with open(f"{path_prefix}.svg", "w", encoding="utf-8") as fh:
            fh.write(svg)
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as fh:
            fh.write(E.gantt_to_json_text(data))
    return svg, data


def schedule_from_gantt(data: dict) -> list[E.ScheduledOp]:
    out = []
    for row in data["machines"]:
        for b in row["bars"]:
            out.append(E.ScheduledOp(b["op"], b["job"], b["idx"], row["machine"], b["start"], b["finish"]))
    out.sort(key=lambda s: (s.start, s.machine, s.op_id))
    return out


# --------------------------------------------------------------------------- solvers and tables

@dataclass(frozen=True)
class Solver:
    """Picklable solver description: a dispatching rule or a policy checkpoint."""
    rule: str | None = None
    checkpoint: str | None = None
    sample_k: int | None = None
    seed: int = 0
    use_kv_cache: bool = False

    def __post_init__(self):
        if (self.rule is None) == (self.checkpoint is None):
            raise ValueError("choose exactly one of a rule or a checkpoint")
        if self.rule is not None:
            R.Rule.parse(self.rule)

    @property
    def label(self) -> str:
        if self.rule:
            return f"rule:{R.Rule.parse(self.rule).value}"
        mode = f"sample{self.sample_k}" if self.sample_k else "greedy"
        return f"policy:{os.path.basename(self.checkpoint)}:{mode}"

    def solve(self, instance: Instance):
        """Returns (makespan, best-of-k makespan or None, schedule)."""
        if self.rule:
            rule = R.Rule.parse(self.rule)
            rng = np.random.default_rng(self.seed) if rule is R.Rule.RANDOM else None
            span, sched = R.pdr_rollout(instance, rule, rng)
            return span, None, sched
        params, cfg = _load_cached(self.checkpoint)
        span, sched = decode_greedy(instance, params, cfg, self.use_kv_cache)
        best = None
        if self.sample_k:
            best, s2 = decode_sampling(instance, params, cfg, self.sample_k, self.seed)
            if best < span:
                sched = s2
        return span, best, sched


_CKPT_CACHE: dict[str, tuple] = {}


def _load_cached(path: str):
    if path not in _CKPT_CACHE:
        _CKPT_CACHE[path] = P.load_checkpoint(path)
    return _CKPT_CACHE[path]


@dataclass
class EvalResult:
    name: str
    num_jobs: int
    num_machines: int
    num_ops: int
    makespan: int
    best_of_k: int | None
    reference: int | None
    gap: float | None
    wall_time: float

    @property
    def best(self) -> int:
        return self.makespan if self.best_of_k is None else min(self.makespan, self.best_of_k)


RESULTS_CSV_VERSION = 1
RESULTS_CSV_HEADER = ("name", "jobs", "machines", "ops", "makespan", "best_of_k", "reference", "gap_pct")


def results_to_csv(results: list[EvalResult], include_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_CSV_HEADER + (("wall_time_s",) if include_timing else ()))
    for r in results:
        row = [r.name, r.num_jobs, r.num_machines, r.num_ops, r.makespan,
               "" if r.best_of_k is None else r.best_of_k,
               "" if r.reference is None else r.reference,
               "" if r.gap is None else f"{r.gap:.4f}"]
        if include_timing:
            row.append(f"{r.wall_time:.4f}")
        w.writerow(row)
    return buf.getvalue()


def average_gap(results: list[EvalResult]) -> float | None:
    gaps = [r.gap for r in results if r.gap is not None]
    return float(np.mean(gaps)) if gaps else None


BENCHMARK_SUFFIXES = (".fjs", ".txt", ".json", ".jsp", ".dmu", "")


def benchmark_files(directory: str) -> list[str]:
    out = []
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if not os.path.isfile(path) or name.startswith("."):
            continue
        if os.path.splitext(name)[1].lower() in BENCHMARK_SUFFIXES:
            out.append(path)
    return out


def evaluate_instance(instance: Instance, solver: Solver, reference: int | None = None,
                      return_schedule: bool = False):
    """Solve, validate the schedule from scratch, and tabulate. Optionally also return the schedule."""
    t0 = time.perf_counter()
    span, best, sched = solver.solve(instance)
    elapsed = time.perf_counter() - t0
    try:
        validate_schedule(instance, sched, min(span, best) if best is not None else span)
    except AssertionError as exc:
        raise ScheduleInvariantError(f"{instance.name}: {exc}") from exc
    shown = span if best is None else min(span, best)
    res = EvalResult(instance.name, instance.num_jobs, instance.num_machines, instance.num_operations,
                     span, best, reference, None if reference is None else gap(shown, reference), elapsed)
    return (res, sched) if return_schedule else res


def _eval_path(args):
    path, solver, refs = args
    inst = load_instance(path)
    return evaluate_instance(inst, solver, lookup_reference(refs, inst.name))


def lookup_reference(refs: dict[str, int], name: str) -> int | None:
    """Exact name first, then case-insensitive (benchmark files vary: Mk01 / mk01 / MK01)."""
    if name in refs:
        return refs[name]
    low = {k.lower(): v for k, v in refs.items()}
    return low.get(name.lower())


def benchmark_suite(directory: str, solver: Solver, reference_table: dict[str, int] | None = None,
                    out_csv: str | None = None, workers: int = 1) -> list[EvalResult]:
    """Solve every instance file in ``directory``; rows ordered by instance name."""
    refs = reference_table or {}
    tasks = [(p, solver, refs) for p in benchmark_files(directory)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_path, tasks))
    else:
        results = [_eval_path(t) for t in tasks]
    results.sort(key=lambda r: r.name)
    if out_csv:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write(results_to_csv(results))
    return results


def load_reference_table(path: str | None) -> dict[str, int]:
    """Reference upper bounds from a JSON file (``{"upper_bounds": {...}}`` or a flat map)."""
    if path is None:
        from .instances import reference_upper_bounds
        return reference_upper_bounds()
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    table = data.get("upper_bounds", data) if isinstance(data, dict) else None
    if not isinstance(table, dict):
        raise ValueError(f"{path}: expected a JSON object of name -> upper bound")
    return {str(k): int(v) for k, v in table.items()}
