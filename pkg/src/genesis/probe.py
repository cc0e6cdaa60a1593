"""Supervised probes on frozen latent representations.

A small classifier (one hidden layer) is trained on posterior means extracted
from a trained model; its test accuracy, compared against the majority-class
chance level, measures how much scene information the representation retains.
The desk-scale task is predicting the number of sprites in a scene (4-way).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .baselines import VaeBaseline
from .dataset import SpriteDataset
from .model import Genesis, GenesisS
from .trainer import images_to_tensor

TASKS = ("sprite_count",)


@dataclass
class ProbeConfig:
    hidden: int = 512
    epochs: int = 100
    train_size: int = 50_000
    batch_size: int = 128
    lr: float = 1e-4
    task: str = "sprite_count"
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown probe task {self.task!r}")


def representation_dim(config) -> int:
    """Flat representation size per image for a given model config."""
    if config.variant == "genesis":
        return config.num_components * (config.mask_latent_dim + config.component_latent_dim)
    if config.variant == "genesis_s":
        return config.num_components * config.mask_latent_dim
    return config.component_latent_dim  # VAE baselines: posterior mean


def extract_representation(model, images: torch.Tensor) -> np.ndarray:
    """Flat per-image representation from posterior means only (no sampling,
    no gradients into the frozen model).

    Scene models concatenate the per-step mask and appearance means
    (K*(D_m+D_c), or K*D for the single-chain variant); VAE baselines use
    their posterior mean directly.
    """
    model.eval()
    with torch.no_grad():
        if isinstance(model, Genesis):
            out = model(images, use_mean=True)
            per_step = torch.cat((out.mask_chain.post_mean, out.component_chain.post_mean), dim=-1)
            rep = per_step.flatten(start_dim=1)
        elif isinstance(model, GenesisS):
            out = model(images, use_mean=True)
            rep = out.mask_chain.post_mean.flatten(start_dim=1)
        elif isinstance(model, VaeBaseline):
            mean, _ = model.head(model.encoder(images))
            rep = mean
        else:
            raise TypeError(f"cannot extract a representation from {type(model).__name__}")
    return rep.cpu().numpy()


def extract_split(model, dataset: SpriteDataset, indices, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Representations and sprite-count labels (0-based classes) for a split subset."""
    reps, labels = [], []
    indices = np.asarray(indices)
    for start in range(0, len(indices), batch):
        idx = indices[start : start + batch]
        images = images_to_tensor(dataset.images(idx))
        reps.append(extract_representation(model, images))
        labels.append(dataset.sprite_counts(idx) - 1)
    return np.concatenate(reps), np.concatenate(labels)


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    n_classes: int
    n_train: int
    n_test: int


def train_probe(
    train_repr: np.ndarray,
    train_labels: np.ndarray,
    test_repr: np.ndarray,
    test_labels: np.ndarray,
    config: ProbeConfig,
) -> ProbeResult:
    """Cross-entropy training of the probe classifier; reports test accuracy
    and the majority-class chance level."""
    config.validate()
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    counts = np.bincount(train_labels, minlength=n_classes)
    if n_classes < 2 or counts.max() > 0.6 * counts.sum():
        warnings.warn(
            f"probe training labels are imbalanced (majority {counts.max() / counts.sum():.0%})",
            stacklevel=2,
        )

    torch.manual_seed(config.seed)
    net = nn.Sequential(
        nn.Linear(train_repr.shape[1], config.hidden),
        nn.ELU(),
        nn.Linear(config.hidden, n_classes),
    )
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    x = torch.from_numpy(train_repr.astype(np.float32))
    y = torch.from_numpy(train_labels.astype(np.int64))
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            loss.backward()
            opt.step()

    net.eval()
    with torch.no_grad():
        pred = net(torch.from_numpy(test_repr.astype(np.float32))).argmax(dim=1).numpy()
    accuracy = float((pred == test_labels).mean())
    chance = float(np.bincount(test_labels, minlength=n_classes).max() / len(test_labels))
    return ProbeResult(accuracy, chance, n_classes, len(train_labels), len(test_labels))


def run_probe(model, data_root: str, config: ProbeConfig) -> dict:
    """Extract representations from train/test splits and fit the probe."""
    config.validate()
    train_ds = SpriteDataset(data_root, "train")
    test_ds = SpriteDataset(data_root, "test")
    rng = np.random.default_rng(config.seed)
    n_train = min(config.train_size, len(train_ds))
    train_idx = rng.choice(len(train_ds), size=n_train, replace=False)
    test_idx = np.arange(len(test_ds))
    train_repr, train_labels = extract_split(model, train_ds, train_idx)
    test_repr, test_labels = extract_split(model, test_ds, test_idx)
    result = train_probe(train_repr, train_labels, test_repr, test_labels, config)
    return {
        "task": config.task,
        "accuracy": result.accuracy,
        "chance": result.chance,
        "n_classes": result.n_classes,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "representation_dim": int(train_repr.shape[1]),
    }
