import numpy as np
import pytest

from hrl.backbone import BackboneConfig
from hrl.crossval import model_config_for
from hrl.fusion import ModelConfig
from hrl.synth import ClassEffect, PhantomConfig, generate_dataset
from hrl.train import prepare_inputs

TINY_MODEL = ModelConfig(backbone=BackboneConfig(2, (1, 1, 1, 1)), hidden=8, heads=2, mlp_dim=16)


def tiny_phantom(per_class=6, **kw):
    base = dict(extents=(16, 16, 16), roi_count=4, subjects_per_class=per_class, noise_std=0.02,
                effects=[ClassEffect(), ClassEffect(0.3, (1, 2))])
    base.update(kw)
    return PhantomConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_phantom(), seed=0)


@pytest.fixture(scope="session")
def tiny_inputs(tiny_dataset):
    return prepare_inputs(tiny_dataset)


@pytest.fixture
def tiny_config(tiny_dataset):
    return model_config_for(tiny_dataset, TINY_MODEL)


def backbone_bytes(model) -> bytes:
    return b"".join(np.ascontiguousarray(p.data).tobytes() for p in model.backbone.parameters())
