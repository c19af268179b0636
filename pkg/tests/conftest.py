import copy

import numpy as np
import pytest

from harness.toy_data import GeneratorSpec, make_toy_dataset
from lora.adapter import new_adapter
from lora.head import new_head
from model.vit import ViTConfig, ViTModel
from tensor.tensor import precision
from utils.constants import DEFAULT_SETTINGS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the test body in 64-bit precision."""
    with precision("float64"):
        yield


@pytest.fixture
def tiny_cfg():
    # 16x16 images, 4x4 patches -> 16 image tokens
    return ViTConfig(image_size=16, patch_size=4, channels=3, depth=2, embed_dim=16, num_heads=2, mlp_ratio=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    return ViTModel(tiny_cfg, seed=3)


@pytest.fixture
def tiny_images(tiny_cfg, rng):
    return rng.standard_normal((6, tiny_cfg.channels, tiny_cfg.image_size, tiny_cfg.image_size)).astype(np.float32)


@pytest.fixture
def trained_adapter(tiny_cfg):
    """An adapter whose B is nonzero, so it changes the model's output."""
    adapter = new_adapter(tiny_cfg, rank=2, seed=5)
    gen = np.random.default_rng(6)
    for _, b in adapter.sites.values():
        b.data = gen.normal(0.0, 0.5, b.shape).astype(b.dtype)
    return adapter


@pytest.fixture
def two_way_head(tiny_cfg):
    return new_head(tiny_cfg.embed_dim, ["cat", "dog"], seed=7, std=0.5)


@pytest.fixture
def toy_splits():
    spec = GeneratorSpec(image_size=16)
    return make_toy_dataset(spec, train_classes=6, test_classes=4, images_per_class=24, seed=11)


@pytest.fixture
def tiny_settings(tmp_path):
    """Settings for a pipeline that finishes in seconds."""
    settings = copy.deepcopy(DEFAULT_SETTINGS)
    settings["runtime"].update({"workdir": str(tmp_path / "run"), "progress": False, "log_level": "WARNING"})
    settings["dataset"].update({"image_size": 16, "train_classes": 6, "test_classes": 4,
                                "images_per_class": 20, "probe_images": 64})
    settings["backbone"].update({"patch_size": 4, "depth": 2, "embed_dim": 16, "num_heads": 2, "mlp_ratio": 2,
                                 "pretrain_steps": 5, "batch_size": 16})
    settings["teachers"].update({"count": 3, "max_steps": 20, "target_accuracy": 0.99, "ranks": [2], "lr": 0.01})
    settings["inversion"].update({"iterations": 3, "images_per_class": 4})
    settings["meta"].update({"iterations": 4, "q_query": 3, "rank": 2})
    settings["eval"].update({"episodes": 4, "q_query": 3})
    settings["flops"].update({"reference": "desk", "plans": ["", "0:0.5"], "sparse_ratios": [0.5]})
    return settings
