from pathlib import Path

import pytest

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

_criteria: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    _criteria.setdefault(n, []).append((title, outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(set(_criteria) | {10}):
        if n == 10:
            terminalreporter.write_line("criterion 10: N/A   model-scale accuracy and hardware tables are out of scope")
            continue
        results = _criteria[n]
        status = "PASS" if all(o == "PASS" for _, o in results) else "FAIL"
        failed = sum(o == "FAIL" for _, o in results)
        detail = f" ({failed}/{len(results)} checks failed)" if failed else ""
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {results[0][0]}{detail}")
