import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion id -> list of (part, passed, detail)
_ACCEPTANCE: dict[str, list] = {}
_TABLES: list[str] = []


def add_table(text: str):
    _TABLES.append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.failed and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1][:200]
        _ACCEPTANCE.setdefault(marker.args[0], []).append(
            (marker.kwargs.get("part", ""), rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for table in _TABLES:
        tr.write(table)
    for crit in sorted(_ACCEPTANCE, key=int):
        parts = _ACCEPTANCE[crit]
        ok = all(p for _, p, _ in parts)
        info = " | ".join(f"{part + ': ' if part else ''}{'pass' if p else 'FAIL'} ({d})" for part, p, d in parts)
        tr.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {info}")
