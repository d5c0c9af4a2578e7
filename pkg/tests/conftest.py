from __future__ import annotations

import hashlib

import pytest

from sentinel.vqa import ImageRef


def make_image(tag: str, quality: float = 0.9) -> ImageRef:
    digest = hashlib.sha256(tag.encode()).hexdigest()
    return ImageRef(id=tag, digest=digest, width=1920, height=1080, quality_score=quality)


@pytest.fixture
def image_factory():
    return make_image


_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance" not in report.nodeid:
        return
    _ACCEPTANCE_RESULTS.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE_RESULTS:
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{mark}  {name}")
