from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from looplab.core import PipelineConfig

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURES = REPO_ROOT / "fixtures"
TEST_DATA = Path(__file__).resolve().parent / "data"


@pytest.fixture
def demo_cfg() -> PipelineConfig:
    """Small budgets matching the bundled demo transcript."""
    return PipelineConfig(
        max_rounds=5,
        patience=5,
        max_iterations=1,
        review_rounds=1,
        max_steps=3,
        max_retries=2,
        feedback_max_iterations=2,
        fragment_timeout_seconds=60.0,
    )


@pytest.fixture
def toy_task(tmp_path: Path) -> Path:
    path = tmp_path / "toy_task.md"
    path.write_text(
        (FIXTURES / "tasks" / "toy_task.md").read_text(encoding="utf-8"), encoding="utf-8"
    )
    return path
