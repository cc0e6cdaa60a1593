import numpy as np
import pytest
import torch

from genesis.dataset import DatasetManifest, build_dataset
from genesis.model import ModelConfig


def tiny_model_config(variant: str = "genesis", image_size: int = 16, k: int = 3, latent: int = 8):
    """Shrunken architecture for fast unit tests; same wiring as the default."""
    return ModelConfig(
        variant=variant,
        num_components=k,
        image_size=image_size,
        mask_latent_dim=latent,
        component_latent_dim=latent,
        feature_dim=16,
        enc_filters=(4, 4, 8, 8, 8),
        dec_filters=(8, 4, 4, 4, 4),
        broadcast_filters=8,
        broadcast_layers=2,
        prior_hidden=16,
        mlp_hidden=16,
    )


def gradcheck_config(variant: str = "genesis"):
    """4x4 images, K=2, 2-dim latents: small enough for finite differences."""
    return ModelConfig(
        variant=variant,
        num_components=2,
        image_size=4,
        mask_latent_dim=2,
        component_latent_dim=2,
        feature_dim=4,
        enc_filters=(2, 2, 2, 2, 2),
        dec_filters=(2, 2, 2, 2, 2),
        broadcast_filters=3,
        broadcast_layers=2,
        prior_hidden=4,
        mlp_hidden=4,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small 16x16 dataset shared across tests (60/20/20 records)."""
    root = tmp_path_factory.mktemp("data") / "sprites16"
    manifest = DatasetManifest(n_train=60, n_val=20, n_test=20, image_size=(16, 16), seed=11)
    build_dataset(manifest, str(root))
    return str(root)


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    """32x32 dataset big enough for short training runs."""
    root = tmp_path_factory.mktemp("data") / "sprites32"
    manifest = DatasetManifest(n_train=512, n_val=64, n_test=64, image_size=(32, 32), seed=5)
    build_dataset(manifest, str(root))
    return str(root)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
