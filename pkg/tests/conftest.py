import re
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fjsp_rl.instances import Instance

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def tiny_instances(draw, max_jobs=3, max_ops=3, max_machines=3, max_total=9, max_dur=9):
    """Random FJSP instances small enough for exhaustive oracles."""
    m = draw(st.integers(1, max_machines))
    n_jobs = draw(st.integers(1, max_jobs))
    budget = max_total
    jobs = []
    for _ in range(n_jobs):
        if budget < 1:
            break
        k = draw(st.integers(1, min(max_ops, budget)))
        budget -= k
        ops = []
        for _ in range(k):
            machines = draw(st.lists(st.integers(0, m - 1), min_size=1, max_size=m, unique=True))
            ops.append([(mm, draw(st.integers(1, max_dur))) for mm in sorted(machines)])
        jobs.append(ops)
    return Instance.from_lists(jobs, m)


def random_instance(rng: np.random.Generator, max_jobs=3, max_ops=3, max_machines=3, max_total=9,
                    max_dur=9) -> Instance:
    m = int(rng.integers(1, max_machines + 1))
    n_jobs = int(rng.integers(1, max_jobs + 1))
    budget = max_total
    jobs = []
    for _ in range(n_jobs):
        if budget < 1:
            break
        k = int(rng.integers(1, min(max_ops, budget) + 1))
        budget -= k
        ops = []
        for _ in range(k):
            cnt = int(rng.integers(1, m + 1))
            machines = sorted(rng.choice(m, size=cnt, replace=False).tolist())
            ops.append([(mm, int(rng.integers(1, max_dur + 1))) for mm in machines])
        jobs.append(ops)
    return Instance.from_lists(jobs, m)


# --------------------------------------------------------------------------- acceptance summary

_ACCEPTANCE: "OrderedDict[int, list[str]]" = OrderedDict()
_NOTES: list[str] = []
_NAME = re.compile(r"test_criterion_(\d+)")


@pytest.fixture
def acceptance_note():
    """Append a line to the acceptance summary printed at the end of the run."""
    return _NOTES.append


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        outcomes = _ACCEPTANCE[k]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        if all(o == "skipped" for o in outcomes):
            status = "SKIP"
        terminalreporter.write_line(f"criterion {k:2d}: {status} ({len(outcomes)} checks)")
    for line in _NOTES:
        terminalreporter.write_line(f"  {line}")
