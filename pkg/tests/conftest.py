"""
Shared fixtures: tiny layouts, small synthetic cohorts and an isolated run ledger
"""
import numpy as np
import pytest

from mmnorm.config import settings
from mmnorm.core.net import NetworkLayout
from mmnorm.models.schemas import SynthSpec, TrainConfig
from mmnorm.services.dataset_service import simulate


@pytest.fixture(autouse=True)
def isolated_ledger(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "DATABASE_URL", f"sqlite:///{tmp_path / 'ledger.db'}")


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of an array"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up = x.copy()
        up[idx] += h
        down = x.copy()
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2.0 * h)
    return grad


@pytest.fixture
def tiny_layout():
    return NetworkLayout(
        latent_dim=2,
        modality_widths=(("A", 2), ("B", 2)),
        covariate_width=3,
        encoder_hidden=(3,),
        decoder_hidden=(3,),
        activation="tanh",
    )


@pytest.fixture
def tiny_spec():
    return SynthSpec(
        seed=7,
        n_reference=40,
        n_holdout=12,
        stage_sizes=[12, 12, 12],
        stage_shifts=[0.5, 1.0, 2.0],
        n_cortical=4,
        n_subcortical=2,
        shifted_regions=2,
        latent_factors=2,
    )


@pytest.fixture
def tiny_dataset(tiny_spec):
    return simulate(tiny_spec)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        epochs=2,
        batch_size=16,
        learning_rate=1e-3,
        latent_dim=2,
        encoder_hidden=(8,),
        decoder_hidden=(8,),
        activation="tanh",
    )
