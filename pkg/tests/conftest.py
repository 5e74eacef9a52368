import re

import pytest

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_(A\d)_", item.name)
    if not m or (rep.when != "call" and rep.passed):
        return
    crit = m.group(1)
    ok, details = _ACCEPTANCE.get(crit, (True, []))
    ok = ok and rep.passed
    details = details + [f"{k}: {v}" for k, v in item.user_properties if rep.when == "call"]
    if rep.failed and rep.when != "call":
        details.append(f"error in {rep.when}")
    _ACCEPTANCE[crit] = (ok, details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, details = _ACCEPTANCE[crit]
        tr.write_line(f"{crit} {'PASS' if ok else 'FAIL'}  " + "; ".join(details))
