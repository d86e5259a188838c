import numpy as np
import pytest
import torch

from scl_lle.synthetic import make_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """8 inputs, 4 positives, 2 over + 2 under negatives, 32 px, 3 classes."""
    root = tmp_path_factory.mktemp("corpus")
    make_synthetic_corpus(root)
    return root


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    make_synthetic_corpus(root, n_inputs=4, n_pos=2, n_over=2, n_under=2, size=16, seed=5)
    return root


def const_image(value, h=4, w=4, dtype=torch.float64):
    v = torch.as_tensor(value, dtype=dtype).reshape(-1, 1, 1)
    return v.expand(3, h, w).clone()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
