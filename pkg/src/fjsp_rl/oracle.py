"""Independent checkers. Nothing in here imports the environment.

Used as oracles in tests: a plain-Python evaluator of action sequences, an
exhaustive optimum for tiny instances, and a from-scratch schedule validator.
"""
from __future__ import annotations

from dataclasses import dataclass

from .instances import Instance

MAX_BRUTE_FORCE_OPS = 9


class OracleSizeError(ValueError):
    pass


class ScheduleInvalid(AssertionError):
    pass


def _op_table(instance: Instance):
    """op_id -> (job, idx, {machine: duration}) in job-major order."""
    table = []
    for i, job in enumerate(instance.jobs):
        for j, op in enumerate(job.operations):
            table.append((i, j, dict(op.alternatives)))
    return table


def evaluate_sequence(instance: Instance, actions) -> tuple[int, list[tuple[int, int, int, int]]]:
    """Makespan and (op, machine, start, finish) rows for a full action sequence.

    Raises ``ScheduleInvalid`` if the sequence breaks precedence, eligibility,
    repeats an op or leaves one out.
    """
    table = _op_table(instance)
    job_ready = [0] * instance.num_jobs
    next_idx = [0] * instance.num_jobs
    machine_free = [0] * instance.num_machines
    rows = []
    seen = set()
    for op, m in actions:
        if op in seen:
            raise ScheduleInvalid(f"op {op} scheduled twice")
        seen.add(op)
        job, idx, alts = table[op]
        if next_idx[job] != idx:
            raise ScheduleInvalid(f"op {op} scheduled before its job predecessor")
        if m not in alts:
            raise ScheduleInvalid(f"machine {m} not eligible for op {op}")
        begin = job_ready[job] if job_ready[job] > machine_free[m] else machine_free[m]
        end = begin + alts[m]
        job_ready[job] = end
        machine_free[m] = end
        next_idx[job] += 1
        rows.append((op, m, begin, end))
    if len(seen) != len(table):
        raise ScheduleInvalid(f"{len(table) - len(seen)} operations never scheduled")
    return max(r[3] for r in rows), rows


def count_sequences(instance: Instance) -> int:
    """Number of complete action sequences: job interleavings x machine choices."""
    from math import factorial, prod

    lens = [len(j) for j in instance.jobs]
    inter = factorial(sum(lens))
    for ln in lens:
        inter //= factorial(ln)
    return inter * prod(len(op.alternatives) for job in instance.jobs for op in job.operations)


def enumerate_sequences(instance: Instance):
    """Yield every complete feasible action sequence as a tuple of (op, machine)."""
    table = _op_table(instance)
    starts = []
    acc = 0
    for job in instance.jobs:
        starts.append(acc)
        acc += len(job)
    lens = [len(j) for j in instance.jobs]
    nxt = [0] * instance.num_jobs
    seq = []

    def rec():
        if len(seq) == len(table):
            yield tuple(seq)
            return
        for j in range(instance.num_jobs):
            if nxt[j] < lens[j]:
                op = starts[j] + nxt[j]
                nxt[j] += 1
                for m in sorted(table[op][2]):
                    seq.append((op, m))
                    yield from rec()
                    seq.pop()
                nxt[j] -= 1

    yield from rec()


def brute_force_oracle(instance: Instance) -> int:
    """Optimal makespan by exhaustive search over orders and machine choices.

    Partial makespans only grow along a sequence, so branches whose partial
    makespan already reaches the incumbent are cut; the result is still exact.
    """
    n = instance.num_operations
    if n > MAX_BRUTE_FORCE_OPS:
        raise OracleSizeError(f"{n} operations; brute force is limited to {MAX_BRUTE_FORCE_OPS}")
    table = _op_table(instance)
    starts, lens = [], []
    acc = 0
    for job in instance.jobs:
        starts.append(acc)
        lens.append(len(job))
        acc += len(job)
    J = instance.num_jobs
    best = [sum(max(alts.values()) for _, _, alts in table)]  # serial upper bound

    def rec(done, nxt, job_ready, machine_free, span):
        if span >= best[0]:
            return
        if done == n:
            best[0] = span
            return
        for j in range(J):
            k = nxt[j]
            if k == lens[j]:
                continue
            alts = table[starts[j] + k][2]
            for m, d in alts.items():
                begin = max(job_ready[j], machine_free[m])
                end = begin + d
                jr = list(job_ready); jr[j] = end
                mf = list(machine_free); mf[m] = end
                nx = list(nxt); nx[j] = k + 1
                rec(done + 1, nx, jr, mf, max(span, end))

    rec(0, [0] * J, [0] * J, [0] * instance.num_machines, 0)
    return best[0]


def naive_is_feasible(instance: Instance, scheduled_ops: set[int], op: int, machine: int) -> bool:
    """Constraint check for one candidate action, straight from the problem definition."""
    table = _op_table(instance)
    if op < 0 or op >= len(table) or op in scheduled_ops:
        return False
    job, idx, alts = table[op]
    if machine not in alts:
        return False
    for other, (j2, i2, _) in enumerate(table):
        if j2 == job and i2 < idx and other not in scheduled_ops:
            return False
    return True


@dataclass
class ValidationReport:
    makespan: int
    num_ops: int


def validate_schedule(instance: Instance, rows, claimed_makespan: int | None = None) -> ValidationReport:
    """Check a finished schedule against the problem constraints.

    ``rows`` are objects or tuples carrying (op_id, machine, start, finish);
    objects with those attributes (e.g. ``ScheduledOp``) are accepted too.
    """
    table = _op_table(instance)
    norm = []
    for r in rows:
        if hasattr(r, "op_id"):
            norm.append((r.op_id, r.machine, r.start, r.finish))
        else:
            norm.append(tuple(r[:4]))
    ops = [r[0] for r in norm]
    if sorted(ops) != list(range(len(table))):
        raise ScheduleInvalid("every operation must appear exactly once")
    by_op = {r[0]: r for r in norm}
    for op, m, s, f in norm:
        job, idx, alts = table[op]
        if m not in alts:
            raise ScheduleInvalid(f"op {op} on ineligible machine {m}")
        if s < 0 or f - s != alts[m]:
            raise ScheduleInvalid(f"op {op} runs {s}..{f} but needs {alts[m]} on machine {m}")
    # precedence
    for op, (job, idx, _) in enumerate(table):
        if idx > 0 and by_op[op - 1][3] > by_op[op][2]:
            raise ScheduleInvalid(f"op {op} starts before its predecessor finishes")
    # no overlap on a machine
    per_machine: dict[int, list[tuple[int, int, int]]] = {}
    for op, m, s, f in norm:
        per_machine.setdefault(m, []).append((s, f, op))
    for m, spans in per_machine.items():
        spans.sort()
        for (s1, f1, o1), (s2, f2, o2) in zip(spans, spans[1:]):
            if s2 < f1:
                raise ScheduleInvalid(f"ops {o1} and {o2} overlap on machine {m}")
    span = max(r[3] for r in norm)
    if claimed_makespan is not None and claimed_makespan != span:
        raise ScheduleInvalid(f"claimed makespan {claimed_makespan} but schedule ends at {span}")
    return ValidationReport(makespan=span, num_ops=len(norm))
