"""One test per acceptance criterion; each prints a pass/fail line in the session summary."""
import pytest

from conftest import ACCEPTANCE_LINES
from fiberae.acceptance import CRITERIA, run_criterion


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.mark.parametrize("number", sorted(CRITERIA), ids=[f"criterion_{n:02d}" for n in sorted(CRITERIA)])
def test_criterion(number, out):
    result = run_criterion(number, out / f"c{number:02d}", seed=0)
    ACCEPTANCE_LINES.append(result.line())
    print(result.line())
    if result.status == "EXCLUDED":
        pytest.skip(result.detail)
    assert result.status == "PASS", result.detail
