import numpy as np
import pytest
import torch

from promptcount.model import CountingModel, ImageInput, ModelConfig
from promptcount.scenegen import SceneConfig, generate_scene


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        resolution=64, embed_dim=16, num_queries=8, decoder_layers=1, num_heads=2
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    torch.manual_seed(0)
    model = CountingModel(tiny_config)
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(
        SceneConfig(image_size=64, n_target=(3, 5), size_range=(0.12, 0.2), seed=1)
    )


@pytest.fixture(scope="session")
def small_image(small_scene):
    return ImageInput.from_array(small_scene[0])


def make_png_bytes(size=64, seed=0):
    import io

    from PIL import Image

    rng = np.random.Generator(np.random.PCG64(seed))
    arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()
