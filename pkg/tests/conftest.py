import json
import sys
from pathlib import Path

import pytest

from mcuforge.arch_spec import parse_spec
from mcuforge.feasibility import ConstraintSet
from mcuforge.graph import TensorShape
from mcuforge.proposal import KNOWN_TASKS

HERE = Path(__file__).parent
GOLDEN = HERE / "golden"
STUBS = HERE / "stubs"

sys.path.insert(0, str(HERE))


@pytest.fixture
def candidate_text():
    return (GOLDEN / "candidate_architecture_example.json").read_text()


@pytest.fixture
def candidate(candidate_text):
    return parse_spec(candidate_text)


@pytest.fixture
def history_text():
    return (GOLDEN / "historical_repository_example.json").read_text()


@pytest.fixture
def model_001_spec(history_text):
    return parse_spec(json.dumps(json.loads(history_text)[0]["architecture_spec"]))


@pytest.fixture
def golden_values():
    return json.loads((GOLDEN / "values.json").read_text())


@pytest.fixture
def cifar10():
    return KNOWN_TASKS["cifar10"]


@pytest.fixture
def cifar_input():
    return TensorShape(3, 32, 32)


@pytest.fixture
def strict_budget(cifar_input):
    return ConstraintSet.from_kb(256, 512, cifar_input)


@pytest.fixture
def loose_budget(cifar_input):
    return ConstraintSet.from_kb(1024, 1024, cifar_input)


def stub_command(name, mode):
    return (sys.executable, str(STUBS / name), mode)


@pytest.fixture
def backend_stub():
    return lambda mode: stub_command("backend_stub.py", mode)


@pytest.fixture
def trainer_stub():
    return lambda mode: stub_command("trainer_stub.py", mode)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("__main__")
    lines = getattr(module, "summary_lines", None)
    if lines is None or not getattr(module, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in lines():
        terminalreporter.write_line(line)
