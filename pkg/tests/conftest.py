import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    table = request.config.stash.setdefault(ACCEPTANCE, {})
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f" ({detail})"
        table[number] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(ACCEPTANCE, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for n in sorted(table):
            terminalreporter.write_line(table[n])
