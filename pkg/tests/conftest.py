import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+?)(\[.*\])?$")
_RESULTS: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    entry = _RESULTS.setdefault(int(m.group(1)), {"name": m.group(2), "ok": True, "details": []})
    entry["ok"] &= report.passed
    entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    results = _RESULTS
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        r = results[n]
        verdict = "PASS" if r["ok"] else "FAIL"
        detail = "; ".join(r["details"])
        terminalreporter.write_line(f"criterion {n} ({r['name'].replace('_', ' ')}): {verdict}  {detail}")
