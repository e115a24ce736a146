import numpy as np
import pytest

from edumine.data import split_students
from edumine.pvae import PartialVAE
from edumine.synthgen import ObservationModel, generate_ground_truth, sample_answers

TINY_DIMS = dict(latent_dim=4, embed_dim=5, feature_dim=6, hidden_dim=8)


def make_synthetic(n=300, m=48, density=0.35, seed=0, mode="mcar"):
    truth = generate_ground_truth(n, m, seed=seed)
    matrix, _ = sample_answers(truth, ObservationModel(mode, density, 0.5), seed=seed)
    return truth, matrix


@pytest.fixture(scope="session")
def small_trained():
    """A small but genuinely trained model plus its data and truth."""
    truth, matrix = make_synthetic()
    split = split_students(matrix, (0.8, 0.1, 0.1), seed=0)
    model = PartialVAE(epochs=40, batch_size=64, seed=0, **TINY_DIMS)
    model.fit(matrix.subset_students(split.train), validation=matrix.subset_students(split.validation))
    return truth, matrix, split, model


@pytest.fixture()
def untrained_small():
    """Randomly initialized model over a 10-question space (1 cheap epoch)."""
    truth, matrix = make_synthetic(n=12, m=10, density=0.8, seed=5)
    model = PartialVAE(epochs=1, batch_size=12, seed=3, **TINY_DIMS)
    model.fit(matrix)
    return matrix, model


def zero_model(model):
    """Zero every weight so the decoder emits 0.5 and the encoder ignores input."""
    for p in model.params_.parameters():
        p.value[...] = 0.0
    model._cache = {}
    return model


def force_prior_head(model):
    """Make the posterior head emit N(0, I) for every input."""
    zero_model(model)
    k = model.params_.latent_dim
    floor = model.params_.sigma_floor
    raw = np.log(np.expm1(1.0 - floor))  # softplus(raw) + floor == 1
    model.params_.post_b2.value[k:] = raw
    model._cache = {}
    return model
