import re

import torch

torch.set_num_threads(1)

_outcomes: dict[str, list[str]] = {}
_labels: dict[str, str] = {}
_details: dict[str, str] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_(a\d)_(\w+)", report.nodeid)
    if not match or "test_acceptance" not in report.nodeid:
        return
    key = match.group(1).upper()
    _labels[key] = match.group(2).replace("_", " ")
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(key, []).append(report.outcome)
    for name, value in report.user_properties:
        if name == "detail":
            _details[key] = value


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes, key=lambda k: int(k[1:])):
        results = _outcomes[key]
        status = "PASS" if all(r == "passed" for r in results) else "FAIL"
        detail = f" ({_details[key]})" if key in _details else ""
        terminalreporter.write_line(f"{key} {_labels[key]}: {status}{detail}")
