"""Test-mode access auditing.

Records annotation-file reads together with the pipeline phase that was
active when they happened, so tests can prove that evaluation never
touches held-out annotation files during training. Disabled by default;
zero overhead beyond a couple of attribute checks.
"""

from __future__ import annotations

from contextlib import contextmanager

_enabled = False
_phase = "idle"
annotation_reads: list[tuple[str, str]] = []


def enable() -> None:
    global _enabled
    _enabled = True
    annotation_reads.clear()


def disable() -> None:
    global _enabled, _phase
    _enabled = False
    _phase = "idle"
    annotation_reads.clear()


def current_phase() -> str:
    return _phase


@contextmanager
def phase(name: str):
    """Mark a pipeline phase (e.g. ``training``) for subsequent file reads."""
    global _phase
    previous = _phase
    _phase = name
    try:
        yield
    finally:
        _phase = previous


def record_annotation_read(path: object) -> None:
    if _enabled:
        annotation_reads.append((_phase, str(path)))


def reads_during(phase_name: str) -> list[str]:
    return [p for ph, p in annotation_reads if ph == phase_name]
