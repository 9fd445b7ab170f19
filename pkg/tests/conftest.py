ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    # a criterion with several tests fails if any of them fails
    prev_ok, prev_detail = ACCEPTANCE.get(criterion, (True, ""))
    ACCEPTANCE[criterion] = (prev_ok and passed, "; ".join(d for d in (prev_detail, detail) if d))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
