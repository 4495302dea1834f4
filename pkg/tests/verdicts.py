"""Pass/fail lines for the acceptance criteria, printed at the end of the session."""

RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str) -> bool:
    RESULTS.append((name, ok, detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def lines() -> list[str]:
    return [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in RESULTS]
