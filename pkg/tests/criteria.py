"""Collects one verdict line per acceptance criterion for the end-of-session summary."""

RESULTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    return line
