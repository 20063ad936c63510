from pathlib import Path

import pytest

CACHE = Path(__file__).resolve().parent.parent / ".cache"

#: Acceptance outcomes, filled by tests/test_acceptance.py: number -> (passed, detail).
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def desk_prior():
    """Default desk prior (base plus adapter), trained once and cached on disk."""
    from usfield.prior.recipes import build_desk_prior

    return build_desk_prior(cache_dir=CACHE)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
