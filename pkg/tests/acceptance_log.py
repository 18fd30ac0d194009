"""Collects one result line per acceptance criterion for the terminal summary."""

RESULTS: list[str] = []


def record(number: int, title: str, status: str, detail: str) -> None:
    line = f"criterion {number} ({title}): {status} - {detail}"
    RESULTS.append(line)
    print(line)
