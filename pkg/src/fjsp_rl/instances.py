"""Problem definitions, random generators, benchmark readers/writers.

An instance is a list of jobs; a job is an ordered chain of operations; an
operation lists its ``(machine, duration)`` alternatives. Everything here is
exact integer data and immutable once built.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

JSON_FORMAT = "fjsp-instance"
JSON_VERSION = 1

VARIANTS = ("SD1", "SD2", "JSSP", "FFSP")


class InstanceError(ValueError):
    """An instance violates a structural invariant."""


class ConfigError(ValueError):
    """Generator (or other) configuration is inconsistent."""


class ParseError(ValueError):
    """Malformed benchmark text. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class OperationSpec:
    alternatives: tuple[tuple[int, int], ...]

    def __post_init__(self):
        alts = tuple((int(m), int(d)) for m, d in self.alternatives)
        object.__setattr__(self, "alternatives", alts)
        if not alts:
            raise InstanceError("operation has no eligible machine")
        machines = [m for m, _ in alts]
        if len(set(machines)) != len(machines):
            raise InstanceError(f"duplicate machine in alternatives {alts}")
        for m, d in alts:
            if m < 0:
                raise InstanceError(f"negative machine index {m}")
            if d < 1:
                raise InstanceError(f"duration {d} < 1")

    @property
    def machines(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.alternatives)

    @property
    def min_duration(self) -> int:
        return min(d for _, d in self.alternatives)


@dataclass(frozen=True)
class Job:
    operations: tuple[OperationSpec, ...]

    def __post_init__(self):
        ops = tuple(op if isinstance(op, OperationSpec) else OperationSpec(op) for op in self.operations)
        object.__setattr__(self, "operations", ops)
        if not ops:
            raise InstanceError("job has no operations")

    def __len__(self):
        return len(self.operations)


@dataclass(frozen=True)
class Instance:
    num_jobs: int
    num_machines: int
    jobs: tuple[Job, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        jobs = tuple(j if isinstance(j, Job) else Job(j) for j in self.jobs)
        object.__setattr__(self, "jobs", jobs)
        if self.num_jobs != len(jobs) or not jobs:
            raise InstanceError(f"num_jobs={self.num_jobs} but {len(jobs)} jobs given")
        if self.num_machines < 1:
            raise InstanceError("num_machines must be >= 1")
        for job in jobs:
            for op in job.operations:
                for m in op.machines:
                    if m >= self.num_machines:
                        raise InstanceError(f"machine {m} out of range for {self.num_machines} machines")

    @classmethod
    def from_lists(cls, jobs: Sequence[Sequence[Iterable[tuple[int, int]]]],
                   num_machines: int | None = None, name: str = "") -> "Instance":
        """Build from nested lists ``jobs[i][j] = [(machine, duration), ...]``."""
        built = tuple(Job(tuple(OperationSpec(tuple(alts)) for alts in job)) for job in jobs)
        if num_machines is None:
            num_machines = 1 + max(m for job in built for op in job.operations for m in op.machines)
        return cls(len(built), num_machines, built, name)

    def to_lists(self) -> list[list[list[tuple[int, int]]]]:
        return [[list(op.alternatives) for op in job.operations] for job in self.jobs]

    @property
    def num_operations(self) -> int:
        return sum(len(j) for j in self.jobs)

    def operations(self):
        """Yield ``(op_id, job, index_in_job, OperationSpec)`` in job-major order."""
        op_id = 0
        for i, job in enumerate(self.jobs):
            for j, op in enumerate(job.operations):
                yield op_id, i, j, op
                op_id += 1

    @cached_property
    def arrays(self) -> "InstanceArrays":
        return InstanceArrays.build(self)

    @cached_property
    def fingerprint(self) -> str:
        payload = repr((self.num_machines, self.to_lists())).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    @property
    def max_duration(self) -> int:
        return int(self.arrays.durations.max())


@dataclass(frozen=True, eq=False)
class InstanceArrays:
    """Dense, read-only numpy views of an instance (op ids are job-major)."""

    job_of: np.ndarray          # [n]
    index_in_job: np.ndarray    # [n]
    job_start: np.ndarray       # [J]
    job_len: np.ndarray         # [J]
    durations: np.ndarray       # [n, m], 0 where ineligible
    eligible: np.ndarray        # [n, m] bool
    min_dur: np.ndarray         # [n] int
    mean_dur: np.ndarray        # [n] float
    successors: np.ndarray      # [n, n] bool, strict same-job successors

    @classmethod
    def build(cls, inst: Instance) -> "InstanceArrays":
        n, m = inst.num_operations, inst.num_machines
        job_of = np.empty(n, dtype=np.int64)
        index_in_job = np.empty(n, dtype=np.int64)
        durations = np.zeros((n, m), dtype=np.int64)
        for op_id, i, j, op in inst.operations():
            job_of[op_id] = i
            index_in_job[op_id] = j
            for mach, d in op.alternatives:
                durations[op_id, mach] = d
        eligible = durations > 0
        job_len = np.array([len(j) for j in inst.jobs], dtype=np.int64)
        job_start = np.concatenate([[0], np.cumsum(job_len)[:-1]]).astype(np.int64)
        min_dur = np.where(eligible, durations, np.iinfo(np.int64).max).min(axis=1)
        mean_dur = durations.sum(axis=1) / eligible.sum(axis=1)
        same_job = job_of[:, None] == job_of[None, :]
        successors = same_job & (index_in_job[None, :] > index_in_job[:, None])
        arrs = cls(job_of, index_in_job, job_start, job_len, durations, eligible,
                   min_dur, mean_dur, successors)
        for a in (job_of, index_in_job, job_start, job_len, durations, eligible,
                  min_dur, mean_dur, successors):
            a.setflags(write=False)
        return arrs


# --------------------------------------------------------------------------- generators

@dataclass(frozen=True)
class GeneratorConfig:
    variant: str
    num_jobs: int
    num_machines: int
    stages: int | None = None
    machines_per_stage: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        v = self.variant.upper()
        object.__setattr__(self, "variant", v)
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_jobs < 1:
            raise ConfigError("num_jobs must be >= 1")
        if v == "FFSP":
            if not self.stages or not self.machines_per_stage:
                raise ConfigError("FFSP needs stages and machines_per_stage")
            if self.stages * self.machines_per_stage != self.num_machines:
                raise ConfigError(
                    f"FFSP: stages*machines_per_stage = {self.stages * self.machines_per_stage}"
                    f" != num_machines = {self.num_machines}")
        elif self.num_machines < 1:
            raise ConfigError("num_machines must be >= 1")


def _ops_per_job_range(variant: str, m: int) -> tuple[int, int]:
    if variant == "SD1":
        lo, hi = int(round(0.8 * m)), int(round(1.2 * m))
    else:
        lo, hi = 1, m
    return max(1, lo), max(1, hi)


def generate_sd(config: GeneratorConfig) -> Instance:
    """SD1 (durations 1..20) or SD2 (durations 1..99) flexible instances.

    Operations per job are uniform on round(0.8m)..round(1.2m) for SD1 and
    1..m for SD2. Each operation draws how many machines it can use
    uniformly from 1..m and then picks those machines without replacement.
    """
    if config.variant not in ("SD1", "SD2"):
        raise ConfigError(f"generate_sd cannot build {config.variant}")
    rng = np.random.default_rng(config.rng_seed)
    m = config.num_machines
    dmax = 20 if config.variant == "SD1" else 99
    lo, hi = _ops_per_job_range(config.variant, m)
    jobs = []
    for _ in range(config.num_jobs):
        ops = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            k = int(rng.integers(1, m + 1))
            machines = np.sort(rng.choice(m, size=k, replace=False))
            durs = rng.integers(1, dmax + 1, size=k)
            ops.append(tuple(zip(machines.tolist(), durs.tolist())))
        jobs.append(ops)
    return Instance.from_lists(jobs, m, name=f"{config.variant.lower()}_{config.num_jobs}x{m}_s{config.rng_seed}")


def generate_jssp(config: GeneratorConfig) -> Instance:
    """Taillard-style JSSP: each job visits every machine once, in random order."""
    if config.variant != "JSSP":
        raise ConfigError(f"generate_jssp cannot build {config.variant}")
    rng = np.random.default_rng(config.rng_seed)
    m = config.num_machines
    jobs = []
    for _ in range(config.num_jobs):
        order = rng.permutation(m)
        durs = rng.integers(1, 100, size=m)
        jobs.append([((int(mach), int(d)),) for mach, d in zip(order, durs)])
    return Instance.from_lists(jobs, m, name=f"jssp_{config.num_jobs}x{m}_s{config.rng_seed}")


def generate_ffsp(config: GeneratorConfig) -> Instance:
    """Flexible flow shop: stage ``s`` may run on any machine of station ``s``."""
    if config.variant != "FFSP":
        raise ConfigError(f"generate_ffsp cannot build {config.variant}")
    rng = np.random.default_rng(config.rng_seed)
    k = config.machines_per_stage
    jobs = []
    for _ in range(config.num_jobs):
        ops = []
        for s in range(config.stages):
            durs = rng.integers(2, 10, size=k)
            ops.append(tuple((s * k + r, int(d)) for r, d in enumerate(durs)))
        jobs.append(ops)
    return Instance.from_lists(
        jobs, config.num_machines,
        name=f"ffsp_{config.num_jobs}x{config.stages}x{k}_s{config.rng_seed}")


def generate(config: GeneratorConfig) -> Instance:
    if config.variant in ("SD1", "SD2"):
        return generate_sd(config)
    if config.variant == "JSSP":
        return generate_jssp(config)
    return generate_ffsp(config)


# --------------------------------------------------------------------------- lower bound

def lower_bound_static(instance: Instance) -> tuple[int, list[int]]:
    """Contention-free lower bound: chain sums of per-operation minimum durations.

    Returns the global bound and the per-operation lower-bound finish times.
    """
    table = []
    for job in instance.jobs:
        acc = 0
        for op in job.operations:
            acc += op.min_duration
            table.append(acc)
    return max(table), table


# --------------------------------------------------------------------------- .fjs format

def _lines(text: str) -> list[tuple[int, list[str]]]:
    out = []
    for lineno, raw in enumerate(text.replace("\r\n", "\n").split("\n"), start=1):
        toks = raw.split()
        if toks:
            out.append((lineno, toks))
    return out


def _ints(tokens: list[str], lineno: int) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected integers, got {' '.join(tokens)!r}", lineno) from None


def parse_fjs(text: str, name: str = "") -> Instance:
    """Read the Brandimarte/Hurink ``.fjs`` text format (1-indexed machines)."""
    lines = _lines(text)
    if not lines:
        raise ParseError("empty input", 1)
    head_no, head = lines[0]
    if len(head) < 2:
        raise ParseError("header needs num_jobs and num_machines", head_no)
    n_jobs, n_mach = _ints(head[:2], head_no)
    if n_jobs < 1 or n_mach < 1:
        raise ParseError(f"bad dimensions {n_jobs} x {n_mach}", head_no)
    if len(head) > 3:
        raise ParseError("header has too many fields", head_no)
    body = lines[1:]
    if len(body) < n_jobs:
        raise ParseError(f"expected {n_jobs} job lines, found {len(body)}",
                         body[-1][0] if body else head_no)
    if len(body) > n_jobs:
        raise ParseError("unexpected content after the last job", body[n_jobs][0])
    jobs = []
    for lineno, toks in body:
        vals = _ints(toks, lineno)
        pos = 0

        def take():
            nonlocal pos
            if pos >= len(vals):
                raise ParseError("truncated job line", lineno)
            pos += 1
            return vals[pos - 1]

        n_ops = take()
        if n_ops < 1:
            raise ParseError("job with no operations", lineno)
        ops = []
        for _ in range(n_ops):
            k = take()
            if k < 1:
                raise ParseError("operation with no alternatives", lineno)
            alts = []
            for _ in range(k):
                mach, dur = take(), take()
                if not 1 <= mach <= n_mach:
                    raise ParseError(f"machine {mach} outside 1..{n_mach}", lineno)
                alts.append((mach - 1, dur))
            ops.append(alts)
        if pos != len(vals):
            raise ParseError(f"{len(vals) - pos} trailing values on job line", lineno)
        jobs.append(ops)
    try:
        return Instance.from_lists(jobs, n_mach, name=name)
    except InstanceError as exc:
        raise ParseError(str(exc)) from exc


def write_fjs(instance: Instance) -> str:
    n_alts = [len(op.alternatives) for _, _, _, op in instance.operations()]
    flex = sum(n_alts) / len(n_alts)
    out = [f"{instance.num_jobs} {instance.num_machines} {flex:g}"]
    for job in instance.jobs:
        toks = [str(len(job))]
        for op in job.operations:
            toks.append(str(len(op.alternatives)))
            for m, d in op.alternatives:
                toks += [str(m + 1), str(d)]
        out.append(" ".join(toks))
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------- JSSP formats

def _jssp_from_matrices(times, machines, name, lineno=None) -> Instance:
    times = np.asarray(times, dtype=np.int64)
    machines = np.asarray(machines, dtype=np.int64)
    if times.shape != machines.shape or times.ndim != 2:
        raise ParseError(f"times {times.shape} and machines {machines.shape} disagree", lineno)
    n, m = times.shape
    # every row is a permutation: 0 present means 0-indexed, otherwise 1-indexed
    if machines.min() == 1 and machines.max() == m:
        machines = machines - 1
    if machines.min() < 0 or machines.max() >= m:
        raise ParseError("machine index out of range", lineno)
    jobs = [[((int(machines[i, j]), int(times[i, j])),) for j in range(m)] for i in range(n)]
    try:
        return Instance.from_lists(jobs, m, name=name)
    except InstanceError as exc:
        raise ParseError(str(exc), lineno) from exc


def parse_taillard_jssp(text: str, name: str = "") -> Instance:
    """Read a Taillard times/machines matrix file.

    Accepts the original layout (descriptive header line, a numeric line
    starting with ``n m``, then ``Times`` and ``Machines`` sections) and the
    bare layout (``n m`` followed by n rows of times and n rows of machines).
    Machine numbers may be 1- or 0-indexed.
    """
    lines = _lines(text)
    numeric = []
    sections = {}
    current = None
    for lineno, toks in lines:
        word = toks[0].lower()
        if word.startswith("times"):
            current = sections.setdefault("times", [])
            continue
        if word.startswith("machines"):
            current = sections.setdefault("machines", [])
            continue
        if not toks[0].lstrip("-").isdigit():
            continue  # descriptive header
        if current is None:
            numeric.append((lineno, toks))
        else:
            current.append((lineno, toks))
    if not numeric:
        raise ParseError("missing 'n m' dimension line", lines[0][0] if lines else 1)
    dim_no, dim = numeric[0]
    n, m = _ints(dim[:2], dim_no)
    if sections:
        t_rows, m_rows = sections.get("times", []), sections.get("machines", [])
    else:
        rows = numeric[1:]
        t_rows, m_rows = rows[:n], rows[n:]
        if len(rows) != 2 * n:
            raise ParseError(f"expected {2 * n} matrix rows, found {len(rows)}",
                             rows[-1][0] if rows else dim_no)
    if len(t_rows) != n or len(m_rows) != n:
        raise ParseError(f"expected {n} rows per matrix, got {len(t_rows)} and {len(m_rows)}", dim_no)
    times, machines = [], []
    for (ln, toks) in t_rows:
        row = _ints(toks, ln)
        if len(row) != m:
            raise ParseError(f"times row has {len(row)} entries, expected {m}", ln)
        times.append(row)
    for (ln, toks) in m_rows:
        row = _ints(toks, ln)
        if len(row) != m:
            raise ParseError(f"machines row has {len(row)} entries, expected {m}", ln)
        machines.append(row)
    return _jssp_from_matrices(times, machines, name, dim_no)


def _rectangular_jssp(instance: Instance) -> tuple[list[list[int]], list[list[int]]]:
    m = instance.num_machines
    times, machines = [], []
    for job in instance.jobs:
        if len(job) != m or any(len(op.alternatives) != 1 for op in job.operations):
            raise InstanceError("matrix formats need one alternative per operation and m operations per job")
        machines.append([op.alternatives[0][0] for op in job.operations])
        times.append([op.alternatives[0][1] for op in job.operations])
    return times, machines


def write_taillard(instance: Instance) -> str:
    times, machines = _rectangular_jssp(instance)
    out = ["Nb of jobs, Nb of Machines", f"{instance.num_jobs} {instance.num_machines}", "Times"]
    out += [" ".join(map(str, r)) for r in times]
    out.append("Machines")
    out += [" ".join(str(x + 1) for x in r) for r in machines]
    return "\n".join(out) + "\n"


def parse_dmu(text: str, name: str = "") -> Instance:
    """Read a DMU file.

    Two layouts circulate: the standard ``machine duration`` pair rows
    (0-indexed machines) and the Taillard times/machines matrices. The pair
    layout is recognised by rows of exactly ``2m`` values.
    """
    lines = _lines(text)
    if not lines:
        raise ParseError("empty input", 1)
    dim_no, dim = lines[0]
    if len(dim) < 2 or not all(t.isdigit() for t in dim[:2]):
        return parse_taillard_jssp(text, name)
    n, m = _ints(dim[:2], dim_no)
    rows = lines[1:]
    if len(rows) == n and all(len(t) == 2 * m for _, t in rows):
        times, machines = [], []
        for ln, toks in rows:
            vals = _ints(toks, ln)
            machines.append(vals[0::2])
            times.append(vals[1::2])
        return _jssp_from_matrices(times, machines, name, dim_no)
    return parse_taillard_jssp(text, name)


# --------------------------------------------------------------------------- JSON

def instance_to_json(instance: Instance) -> dict:
    return {
        "format": JSON_FORMAT,
        "version": JSON_VERSION,
        "name": instance.name,
        "num_jobs": instance.num_jobs,
        "num_machines": instance.num_machines,
        "jobs": [{"operations": [{"alternatives": [list(a) for a in op.alternatives]}
                                 for op in job.operations]} for job in instance.jobs],
    }


def instance_from_json(data: dict) -> Instance:
    if data.get("format") != JSON_FORMAT:
        raise ParseError(f"not an {JSON_FORMAT} document")
    if data.get("version") != JSON_VERSION:
        raise ParseError(f"unsupported instance version {data.get('version')}")
    try:
        jobs = [[[tuple(a) for a in op["alternatives"]] for op in job["operations"]]
                for job in data["jobs"]]
        inst = Instance.from_lists(jobs, data["num_machines"], name=data.get("name", ""))
    except (KeyError, TypeError, InstanceError) as exc:
        raise ParseError(f"bad instance document: {exc}") from exc
    if inst.num_jobs != data["num_jobs"]:
        raise ParseError("num_jobs does not match the job list")
    return inst


def dumps_instance(instance: Instance) -> str:
    return json.dumps(instance_to_json(instance), separators=(",", ":")) + "\n"


def loads_instance(text: str) -> Instance:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), exc.lineno) from exc
    return instance_from_json(data)


def load_instance(path, name: str | None = None) -> Instance:
    """Dispatch on file extension: ``.json``, ``.fjs``; anything else is tried as JSSP text."""
    from pathlib import Path

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    name = name if name is not None else path.stem
    suffix = path.suffix.lower()
    if suffix == ".json":
        inst = loads_instance(text)
        return inst if inst.name else Instance(inst.num_jobs, inst.num_machines, inst.jobs, name)
    if suffix == ".fjs":
        return parse_fjs(text, name)
    if path.name.lower().startswith("dmu"):
        return parse_dmu(text, name)
    if path.name.lower().startswith("ta"):
        return parse_taillard_jssp(text, name)
    return parse_fjs(text, name)


# --------------------------------------------------------------------------- bundled data

def _data_path(filename: str):
    from importlib import resources

    return resources.files("fjsp_rl").joinpath("data", filename)


def taillard_instances() -> dict[str, Instance]:
    """The 80 Taillard instances bundled with the package."""
    data = json.loads(_data_path("taillard.json").read_text())
    out = {}
    for name, entry in data["instances"].items():
        out[name] = _jssp_from_matrices(entry["durations"], entry["machines"], name)
    return out


def reference_upper_bounds() -> dict[str, int]:
    return dict(json.loads(_data_path("reference_ub.json").read_text())["upper_bounds"])
