import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from heartrefine import SIX, TEN, LabelVolume  # noqa: E402
from heartrefine.phantom import generate_phantom, random_params  # noqa: E402
from heartrefine.pipeline import build_ground_truth  # noqa: E402

DESK_DIMS = (32, 48, 48)
DESK_SPACING = 4.0

# criterion number -> (description, passed); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def six_of(ten: LabelVolume) -> LabelVolume:
    return LabelVolume(TEN.merge_to(SIX, ten.data), ten.spacing, ten.origin, schema=SIX)


def desk_case(seed: int):
    ph = generate_phantom(random_params(seed, dims=DESK_DIMS, spacing=DESK_SPACING))
    return ph, build_ground_truth(ph.intensity, six_of(ph.labels), ph.annotation)


@pytest.fixture(scope="session")
def desk_cases():
    return [desk_case(s) for s in range(4)]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        desc, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {desc}")
