import numpy as np
import pytest

from toadhm.augment import AugmentConfig
from toadhm.data import FrameRecord, synth_scene

# small geometry: 96x160 frames, 96x96 first crop, 64x64 network input
SMALL_AUG = dict(crop1=(96, 96), crop2=(64, 64))


@pytest.fixture
def small_aug():
    return AugmentConfig(**SMALL_AUG)


@pytest.fixture(scope="session")
def toad_record():
    return synth_scene(3, "toad", (96, 160))


@pytest.fixture(scope="session")
def centered_box_record():
    image = np.random.default_rng(0).integers(0, 256, (96, 160, 3), dtype=np.uint8)
    mask = np.zeros((96, 160), np.uint8)
    mask[30:66, 60:100] = 255
    return FrameRecord("centered", 1, image, "toad", mask)
