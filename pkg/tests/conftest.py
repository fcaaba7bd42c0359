import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from desc_depth.synthetic import SyntheticConfig, generate_synthetic_datasets  # noqa: E402

SMALL = dict(n_source=24, n_target=24)


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(**SMALL)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_config):
    """A small generated source/target pair shared by read-only tests."""
    root = tmp_path_factory.mktemp("synthetic") / "data"
    generated = generate_synthetic_datasets(small_config, root, seed=7)
    return generated


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
