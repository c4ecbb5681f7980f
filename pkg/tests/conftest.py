import numpy as np
import pytest

from callic.checkpoint import checkpoint_digest
from callic.codec import Model
from callic.model import ModelConfig, init_params
from callic.pretrain import TrainConfig, pretrain

TOY = ModelConfig(depth=2, dim=32, kernel=5)
TINY = ModelConfig(depth=1, dim=8, kernel=3, mixtures=2, mlp_ratio=2)

# desk-scale pretraining: small patches and batches keep this near a minute
TOY_TRAIN = TrainConfig(patch_size=32, batch_size=8, lr=2e-3, max_steps=600, seed=0,
                        val_every=100, synthetic_images=48, synthetic_size=128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_training():
    return pretrain(TOY_TRAIN, TOY)


@pytest.fixture(scope="session")
def toy_model(toy_training):
    params = toy_training.params
    return Model(params, TOY, checkpoint_digest(params, TOY))


@pytest.fixture(scope="session")
def random_toy_model():
    params = init_params(TOY, 7)
    return Model(params, TOY, checkpoint_digest(params, TOY))


@pytest.fixture(scope="session")
def gray_model():
    cfg = ModelConfig(depth=1, dim=16, kernel=3, mixtures=3, channels=1)
    params = init_params(cfg, 3)
    return Model(params, cfg, checkpoint_digest(params, cfg))


def natural_crops(size=128):
    """Center crops of bundled photographs: a texture family absent from training."""
    from skimage import data
    crops = []
    for load in (data.astronaut, data.coffee, data.chelsea, data.rocket,
                 data.immunohistochemistry):
        im = load()
        y, x = (im.shape[0] - size) // 2, (im.shape[1] - size) // 2
        crops.append(np.ascontiguousarray(im[y:y + size, x:x + size]))
    return crops
