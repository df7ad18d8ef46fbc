import pytest
from hypothesis import HealthCheck, settings

from magmine.synthgen import SynthConfig, generate_corpus

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = dict(
    num_abnormal=6, num_normal=10, num_val_abnormal=2, num_val_normal=4,
    num_test_abnormal=3, num_test_normal=6, dim=8, snippets_min=20, snippets_max=40,
    separation=3.0, seed=11,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    manifest = generate_corpus(SynthConfig(**TINY), out)
    return out, manifest

# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
