"""Collects one pass/fail line per acceptance criterion."""

LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    return line
