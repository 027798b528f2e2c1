import os
from pathlib import Path

import numpy as np
import pytest

from licadapt.codec import Backbone, CodecConfig, Image
from licadapt.model import AdaptedCodec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    return Backbone(CodecConfig(M=8, N=8, quality_index=2), seed=3)


@pytest.fixture
def tiny_adapted(tiny_backbone):
    return AdaptedCodec.with_new_adapters(tiny_backbone, K=2, seed=5)


def random_image(rng, h=64, w=64) -> Image:
    return Image(rng.random((h, w, 3), dtype=np.float32))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk-scale pipeline, run once per session.

    Set LICADAPT_DESK_DIR to reuse (or keep) a run directory between sessions.
    """
    from licadapt.pipeline import DeskPreset, run_desk

    run_dir = os.environ.get("LICADAPT_DESK_DIR")
    run_dir = Path(run_dir) if run_dir else tmp_path_factory.mktemp("desk")
    preset = DeskPreset()
    result = run_desk(run_dir, preset)
    result["preset"] = preset
    return result


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
