import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "nvm", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("nvm")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def tiny():
    from nvm.networks import tiny_config

    return tiny_config()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six short teacher episodes on stairs and stones, written to disk once."""
    from nvm.dataset import collect_dataset, load_dataset, plan_episodes

    root = tmp_path_factory.mktemp("data")
    collect_dataset(plan_episodes(["stairs", "stones"], 6, seed=3, steps=24), root)
    return root, load_dataset(root)


_ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self, label: str, title: str):
        self.label, self.title, self.detail = label, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status} criterion {self.label}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion("3", "warp exactness") as c: ...`` records one PASS/FAIL line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
