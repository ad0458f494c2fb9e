import os

import hypothesis
import numpy as np
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_ordered_surfaces(rng, k, n_b, n_a, n_rows, margin=1.0):
    """Ordered random surfaces inside [1 + margin, R - margin]."""
    raw = rng.uniform(1 + margin, n_rows - margin, size=(k, n_b, n_a))
    return np.sort(raw, axis=0)


TINY_PHANTOM = dict(shape=(32, 6, 48), drusen_width=(4.0, 1.0), amplitude=(2.0, 0.5))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Three training and two test phantoms of 32 A-scans x 6 B-scans x 48 rows."""
    from octcoherent.synth import PhantomSpec, make_dataset

    out = tmp_path_factory.mktemp("tiny_data")
    make_dataset(PhantomSpec(**TINY_PHANTOM), 3, 2, out)
    return out


def tiny_train_config(**overrides):
    from octcoherent.model import ModelConfig
    from octcoherent.trainer import TrainConfig

    base = dict(epochs=2, batch_size=2, patch_shape=(32, 16, 4),
                model=ModelConfig(levels=3, base_channels=2, align_level=0))
    base.update(overrides)
    return TrainConfig(**base)
