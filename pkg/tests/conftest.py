from pathlib import Path

import pytest

from offloadpipe.profiles import CostProfile, parse_configs

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
MB = 1_000_000


def toy_paths():
    d = CONFIGS / "toy1"
    return str(d / "model.yaml"), str(d / "devices.yaml"), str(d / "network.yaml")


@pytest.fixture(scope="session")
def toy():
    model, devices, network = parse_configs(*toy_paths())
    return model, devices, network


@pytest.fixture(scope="session")
def toy_profile(toy):
    model, devices, _ = toy
    return CostProfile(model, devices)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
