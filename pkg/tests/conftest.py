import sys
from pathlib import Path

import numpy as np
import pytest


# Ensure project root is on the path for imports
PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.modality import MaskSet, ModalityLayout, Normalizer  # noqa: E402
from src.model import GeMuCoModel  # noqa: E402
from src.network import NetSpec, Weights  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end acceptance scenarios (deselect with -m 'not slow')")


def identity_normalizer(layout: ModalityLayout) -> Normalizer:
    return Normalizer(
        {name: np.zeros(dim) for name, dim in layout.groups},
        {name: np.ones(dim) for name, dim in layout.groups},
    )


@pytest.fixture
def toy_layout():
    return ModalityLayout((("a", 2), ("b", 1), ("c", 3)))


@pytest.fixture
def toy_model(toy_layout):
    """Untrained nonlinear model a,b -> b,c with a 2-d parametric bias."""
    rng = np.random.default_rng(3)
    values = rng.normal(size=(50, toy_layout.total_dim)) * 2.0 + 1.0
    normalizer = Normalizer.fit(toy_layout, values, np.ones((50, toy_layout.n_groups), dtype=bool))
    return GeMuCoModel.create(
        toy_layout, ["a", "b"], ["b", "c"], normalizer, MaskSet([(1, 0), (0, 1), (1, 1)]),
        pb_dim=2, latent_dim=4, hidden=(8,), seed=0,
    )


@pytest.fixture
def tendon_toy_model():
    """Untrained nonlinear model over theta(2), f(2), l(2) with every group in and out."""
    layout = ModalityLayout((("theta", 2), ("f", 2), ("l", 2)))
    rng = np.random.default_rng(5)
    values = rng.normal(size=(40, layout.total_dim))
    normalizer = Normalizer.fit(layout, values, np.ones((40, 3), dtype=bool))
    masks = MaskSet([(1, 1, 0), (0, 1, 1), (1, 1, 1)])
    return GeMuCoModel.create(layout, layout.names, layout.names, normalizer, masks, latent_dim=4, hidden=(6,), seed=2)


@pytest.fixture
def identity_model():
    """Linear model x -> x over a single 1-d group, with unit normalization."""
    layout = ModalityLayout((("x", 1),))
    enc_spec, dec_spec = NetSpec((2, 1)), NetSpec((1, 1))
    enc = Weights((np.array([[1.0, 0.0]]),), (np.zeros(1),))
    dec = Weights((np.array([[1.0]]),), (np.zeros(1),))
    return GeMuCoModel(
        layout, layout, layout, enc_spec, enc, dec_spec, dec,
        pb_dim=0, latent_dim=1, normalizer=identity_normalizer(layout), feasible_masks=MaskSet([(1,)]),
    )


@pytest.fixture
def linear_tendon_model():
    """
    Linear model over theta(2), f(2), l(2) whose latent state is [theta, f] and l = theta.

    Its length/angle Jacobian is the identity everywhere.
    """
    layout = ModalityLayout((("theta", 2), ("f", 2), ("l", 2)))
    enc_spec, dec_spec = NetSpec((9, 4)), NetSpec((4, 6))
    enc_matrix = np.zeros((4, 9))
    enc_matrix[np.arange(4), np.arange(4)] = 1.0
    dec_matrix = np.zeros((6, 4))
    dec_matrix[np.arange(4), np.arange(4)] = 1.0
    dec_matrix[4, 0] = dec_matrix[5, 1] = 1.0
    return GeMuCoModel(
        layout, layout, layout,
        enc_spec, Weights((enc_matrix,), (np.zeros(4),)),
        dec_spec, Weights((dec_matrix,), (np.zeros(6),)),
        pb_dim=0, latent_dim=4, normalizer=identity_normalizer(layout),
        feasible_masks=MaskSet([(1, 1, 0), (1, 1, 1)]),
    )
