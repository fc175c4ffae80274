from __future__ import annotations

import numpy as np
import pytest

from activemeta.synthdata import GenConfig, gen_dataset

# lines appended by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL = GenConfig(image_size=32, slices=6)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Tiny source and target datasets on disk (32 px, 6 slices)."""
    root = tmp_path_factory.mktemp("small")
    gen_dataset("source", 5, 100, SMALL, root / "src")
    gen_dataset("target", 5, 200, SMALL, root / "tgt")
    return root
