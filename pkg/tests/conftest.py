import numpy as np
import pytest

from ctpseg.data import ScanStack, synth_generate

ACCEPTANCE_TITLES = {
    1: "gradient correctness",
    2: "focal/CE identity at gamma=0",
    3: "loss point values",
    4: "metric oracle equivalence",
    5: "fold-table aggregation",
    6: "architecture shape contract",
    7: "overfit smoke test",
    8: "protocol properties",
    9: "freeze semantics",
    10: "reproducibility and persistence",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        ok = call.excinfo is None
        _outcomes[n] = _outcomes.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {n:2d} ({ACCEPTANCE_TITLES[n]}): {status}")


def lesion_slices(n_slices=16, size=(64, 64), seed=3, n_subjects=12):
    """Scans trimmed to their lesion-bearing slices, ``n_slices`` in total."""
    out, n = [], 0
    for s in synth_generate(n_subjects, size=size, seed=seed):
        keep = [z for z in range(s.depth) if s.mask[z].any()][: n_slices - n]
        if not keep:
            continue
        out.append(ScanStack(s.subject_id, s.scan_id, s.channels[:, keep], s.mask[keep], s.spacing))
        n += len(keep)
        if n == n_slices:
            return out
    raise RuntimeError("not enough lesion slices")


@pytest.fixture(scope="session")
def small_dataset():
    return synth_generate(10, size=(32, 32), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
