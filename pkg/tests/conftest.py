import numpy as np
import pytest

from tsatree import powersim, trainer


@pytest.fixture(scope="session")
def small_dataset():
    """48 simulated samples at a coarse step; enough for plumbing tests."""
    mc = powersim.MonteCarloSpec(dt=0.01)
    return powersim.generate_dataset(powersim.default_system(), mc, 48, seed=7)


@pytest.fixture(scope="session")
def small_dataset_dir(small_dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "small"
    powersim.save_dataset(small_dataset, d)
    return d


def tiny_config(dataset_dir, **kw):
    base = dict(dataset=str(dataset_dir), hidden=6, epochs=3, B=4, s_leaf=3, max_depth=5,
                surrogate_hidden=(12, 5), surrogate_max_steps=40, batch_size=12, seed=3)
    base.update(kw)
    return trainer.RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(small_dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cfg = tiny_config(small_dataset_dir)
    return trainer.run(cfg, out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
