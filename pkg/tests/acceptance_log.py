"""Outcome lines collected by the acceptance tests and printed after the run."""

from __future__ import annotations

RESULTS: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str, seconds: float) -> None:
    status = "PASS" if passed else "FAIL"
    RESULTS[number] = f"criterion {number:>2} {status}  {title}: {detail} [{seconds:.1f}s]"
