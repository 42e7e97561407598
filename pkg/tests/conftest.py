from pathlib import Path

ACCEPTANCE: list[tuple[str, bool, str]] = []
SUMMARY = Path(__file__).resolve().parent.parent / "artifacts" / "acceptance" / "summary.txt"


def record(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE.append((name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "") for name, ok, detail in ACCEPTANCE]
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    SUMMARY.parent.mkdir(parents=True, exist_ok=True)
    SUMMARY.write_text("\n".join(lines) + "\n")
