import pytest

from gazeobj.config import ModelConfig, RunConfig
from gazeobj.data import SceneSpec, generate_sample

SMALL = 128


@pytest.fixture(scope="session")
def small_samples():
    spec = SceneSpec(image_size=SMALL, grid=4, seed=5)
    return [generate_sample(spec, i) for i in range(6)]


@pytest.fixture
def small_cfg():
    return RunConfig(model=ModelConfig(image_size=SMALL), lr=1e-3, batch_size=2, max_steps=4,
                     seed=0, log_every=1)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)`` as one summary line, then assert ``ok``."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
