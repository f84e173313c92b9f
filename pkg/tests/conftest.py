import numpy as np
import pytest

from cait_lab.cait import CaitConfig


def tiny_config(**kw):
    base = dict(sa_depth=2, ca_depth=2, dim=16, heads=2, patch_count=4, num_classes=3,
                in_chans=1, epsilon=0.1)
    base.update(kw)
    return CaitConfig(**base)


def random_patches(config, n=None, seed=0):
    rng = np.random.default_rng(seed)
    shape = (config.patch_count, config.patch_dim)
    return rng.uniform(0, 1, shape if n is None else (n,) + shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
