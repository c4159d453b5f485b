import numpy as np
import pytest

from flatland import tensor as T
from flatland.models import PyramidSpec


TINY = PyramidSpec(input_resolution=8, base_channels=4, total_channel_add=4, num_stages=2, blocks_per_stage=1,
                   bottleneck_ratio=2, num_classes=3)


@pytest.fixture
def tiny_spec():
    return TINY


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> str:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
