"""Pass/fail lines collected by the acceptance tests, echoed in the terminal summary."""

LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
