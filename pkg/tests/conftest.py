import numpy as np
import pytest

from coldstart.volumes import VolumeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid(arr, spacing=(1.0, 1.0, 1.0), kind="intensity"):
    return VolumeGrid(np.asarray(arr), spacing, kind)


def mask(arr, spacing=(1.0, 1.0, 1.0)):
    return VolumeGrid(np.asarray(arr, dtype=np.uint8), spacing, "binary-mask")


def random_blob_mask(rng, shape, p=0.3):
    """Random mask of smoothed noise; may be empty for tiny shapes."""
    return (rng.random(shape) < p).astype(np.uint8)


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str = "", gating: bool = True) -> None:
    status = "PASS" if passed else "FAIL"
    note = "" if gating else " (diagnostic, non-gating)"
    ACCEPTANCE[number] = f"criterion {number}: {status} - {title}{note}" + (f" [{detail}]" if detail else "")
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
