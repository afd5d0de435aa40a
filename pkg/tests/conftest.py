import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        status, title, detail = mod.RESULTS[number]
        tr.write_line(f"[{status}] criterion {number}: {title} ({detail})")
    for title, text in mod.REPORTS:
        tr.write_line("")
        tr.write_line(title)
        for line in text.rstrip("\n").splitlines():
            tr.write_line(line)
