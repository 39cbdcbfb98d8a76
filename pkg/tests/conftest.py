import numpy as np
import pytest

from auxeffects import synth


@pytest.fixture(scope="session")
def world_1a():
    return synth.ContinuousWorldConfig.setting("1a")


@pytest.fixture(scope="session")
def world_2a():
    return synth.ContinuousWorldConfig.setting("2a")


@pytest.fixture(scope="session")
def binary_world():
    return synth.load_world("binary.json")


@pytest.fixture(scope="session")
def data_1a(world_1a):
    complete = synth.generate(world_1a, 1)
    return complete, synth.mask(complete, world_1a.p_treat, 2)


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# criterion -> list of (part, passed); filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[str, bool]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        ok = all(p for _, p in parts)
        failed = [name for name, p in parts if not p]
        detail = f" (failed: {'; '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}{detail}")
