import pytest

from unigrf.config import RunConfig
from unigrf.data import prepare_data
from unigrf.synthetic import generate_ratings, write_ratings


@pytest.fixture(scope="session")
def small_store(tmp_path_factory):
    """A 40-user synthetic store with short sequences."""
    root = tmp_path_factory.mktemp("store")
    rows = generate_ratings(num_users=40, num_items=60, min_len=6, max_len=20, seed=11)
    write_ratings(root / "ratings.dat", rows, "dat")
    prepare_data(root / "ratings.dat", "dat", 8, root / "store", seed=0)
    return root / "store"


@pytest.fixture
def tiny_config(small_store, tmp_path):
    def make(**overrides):
        values = dict(data=str(small_store), n=8, d=8, heads=2, layers=1, num_negatives=8, m=2, alpha=0.85,
                      batch_size=16, max_epochs=2, output_dir=str(tmp_path / "run"))
        values.update(overrides)
        return RunConfig(**values)

    return make


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
