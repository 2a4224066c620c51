import pytest

CRITERIA = {
    1: "adjoint gradient vs central differences",
    2: "RTM density image equals FWI kernel",
    3: "solver physics",
    4: "TFM localization and runtime",
    5: "metrics oracle equivalence",
    6: "end-to-end FWI on desk scale",
    7: "two-stage workflow behaviours",
    8: "source time function statistics",
    9: "full-scale configuration smoke test",
}

_outcomes: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


_END_TO_END = {"hole_run", "null_run"}


def pytest_collection_modifyitems(items):
    # anything touching the end-to-end inversions takes tens of minutes
    for item in items:
        if _END_TO_END & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _outcomes.setdefault(marker.args[0], []).append((item.name, rep.passed, notes))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            tr.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        failed = [name for name, ok, _ in results if not ok]
        status = "FAIL" if failed else "PASS"
        tr.write_line(f"criterion {n} ({title}): {status} [{len(results) - len(failed)}/{len(results)} tests]"
                      + (f" failing: {', '.join(failed)}" if failed else ""))
        for name, _, notes in results:
            if notes:
                tr.write_line(f"    {name}: {notes}")
