import datetime as dt
from pathlib import Path

import numpy as np
import pytest

from tnma.data import ArmRecord, build_dataset


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::", 1)[-1]
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        print(f"\nACCEPTANCE {name}: {status}")

REPO_ROOT = Path(__file__).resolve().parent.parent
SKELETON_CSV = REPO_ROOT / "data" / "example_skeleton.csv"


def make_records(layout, start_year=2000, step_years=2, n=60, seed=0):
    """Arm records for a list of per-study treatment-label tuples."""
    rng = np.random.default_rng(seed)
    records = []
    for i, treatments in enumerate(layout):
        date = dt.date(start_year + i * step_years, 6, 15)
        for label in treatments:
            records.append(
                ArmRecord(
                    study=f"S{i}",
                    date=date,
                    treatment=label,
                    events=int(rng.integers(n // 4, 3 * n // 4)),
                    total=n,
                )
            )
    return records


@pytest.fixture
def small_dataset():
    """Ten studies over four treatments, incl. one 3-arm study."""
    layout = [
        ("VAN", "LIN"),
        ("VAN", "DAP"),
        ("VAN", "LIN"),
        ("LIN", "TEI"),
        ("VAN", "LIN", "DAP"),
        ("VAN", "TEI"),
        ("VAN", "LIN"),
        ("LIN", "DAP"),
        ("VAN", "LIN"),
        ("VAN", "TEI"),
    ]
    return build_dataset(make_records(layout))


@pytest.fixture(scope="session")
def skeleton_dataset():
    from tnma.cli import ingest

    return ingest(SKELETON_CSV)
