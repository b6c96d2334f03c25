import pytest
from hypothesis import settings

# fixed example generation so repeated runs see the same cases
settings.register_profile("repro", derandomize=True, print_blob=True)
# pytest --hypothesis-profile=stress draws fresh random examples each run
settings.register_profile("stress", max_examples=300, derandomize=False, print_blob=True)
settings.load_profile("repro")

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one acceptance outcome: ``acceptance(n, title, passed, detail)``."""
    def record(n: int, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[n] = (title, bool(passed), detail)
        print(f"ACCEPTANCE {n} {'PASS' if passed else 'FAIL'}: {title} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        tr.write_line(f"[{n}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
    extra = getattr(tr.config, "_ptma_tables", [])
    for block in extra:
        tr.write_line("")
        for line in block.splitlines():
            tr.write_line(line)
