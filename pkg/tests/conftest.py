import numpy as np
import pytest
import torch

from avloc.dataio import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_clips():
    return generate_synthetic(SyntheticSpec(seed=3, n_clips=6))


@pytest.fixture(scope="session")
def duet_clips():
    return generate_synthetic(SyntheticSpec(seed=4, n_clips=4, duet=True))


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm(dim=-1, keepdim=True)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1][len("test_"):]
            num = int(name.split("_")[1])
            status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
            detail = "; ".join(str(v) for k, v in getattr(rep, "user_properties", []) if k == "detail")
            lines.append((num, f"{status}  {name}" + (f"  [{detail}]" if detail else "")))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
