"""Deterministic training loop: ADAM plus the constrained KL objective, with
JSON-lines metric logging and bit-exact checkpoint/resume.

Checkpoints are a pair of files: ``ckpt_{step:06}.bin`` (flat key -> array
archive holding parameters, optimizer moments, the torch RNG state and the
loader permutation) and ``ckpt_{step:06}.json`` (step, multiplier state,
loader cursor, config snapshot). Round-trips are byte-identical and resuming
replays the exact (loss, beta) trajectory of an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .archive import load_archive, save_archive
from .dataset import BatchLoader, SpriteDataset
from .model import ModelConfig, build_model
from .objective import (
    DEFAULT_GOAL_NLL_PER_DIM,
    GecoState,
    elbo_terms,
    geco_loss,
    geco_update,
    reconstruction_error,
)

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 32
    lr: float = 1e-4
    # reference setup: 5e5 steps at 64x64; desk-scale default is far smaller
    max_steps: int = 10_000
    seed: int = 0
    checkpoint_every: int = 1_000
    log_every: int = 100
    grad_clip: float = 5.0  # global norm; 0 disables (gradient-check tests)
    deterministic: bool = False
    geco_beta: float = 1.0
    geco_goal_nll: float = DEFAULT_GOAL_NLL_PER_DIM

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.model.validate()

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        kwargs["model"] = ModelConfig.from_json(kwargs.get("model", {}))
        return cls(**kwargs)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    history: list[dict]
    model: torch.nn.Module
    geco: GecoState
    step: int


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) float array in [0,1] -> (B, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def _build_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


# ---------------------------------------------------------------------------
# checkpoint save/load


def _checkpoint_paths(out_dir: str, step: int) -> tuple[str, str]:
    base = os.path.join(out_dir, f"ckpt_{step:06}")
    return base + ".bin", base + ".json"


def save_checkpoint(
    out_dir: str,
    step: int,
    model: torch.nn.Module,
    optimizer: torch.optim.Adam,
    geco: GecoState,
    loader_state: dict,
    config: TrainConfig,
) -> tuple[str, str]:
    arrays: dict[str, np.ndarray] = {}
    for key, value in model.state_dict().items():
        arrays[f"model/{key}"] = value.detach().cpu().numpy()
    param_names = [name for name, _ in model.named_parameters()]
    opt_state = optimizer.state_dict()["state"]
    for idx, name in enumerate(param_names):
        if idx not in opt_state:
            continue  # parameter not yet touched by an update
        for slot, value in opt_state[idx].items():
            arrays[f"adam/{name}/{slot}"] = value.detach().cpu().numpy()
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["loader/perm"] = np.asarray(loader_state["perm"], dtype=np.int64)

    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": step,
        "geco": geco.to_json(),
        "loader": {
            "epoch": loader_state["epoch"],
            "cursor": loader_state["cursor"],
            "rng": loader_state["rng"],
        },
        "config": config.to_json(),
    }
    bin_path, json_path = _checkpoint_paths(out_dir, step)
    save_archive(bin_path, arrays)
    with open(json_path, "w") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return bin_path, json_path


@dataclass
class Checkpoint:
    step: int
    arrays: dict[str, np.ndarray]
    meta: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_json(self.meta["config"])

    @property
    def geco(self) -> GecoState:
        return GecoState.from_json(self.meta["geco"])

    def loader_state(self) -> dict:
        state = dict(self.meta["loader"])
        state["perm"] = self.arrays["loader/perm"]
        return state

    def restore_model(self, model: torch.nn.Module) -> None:
        state = {}
        reference = model.state_dict()
        for key, ref in reference.items():
            arr = self.arrays.get(f"model/{key}")
            if arr is None:
                raise CheckpointError(f"checkpoint missing model entry {key!r}")
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"model entry {key!r}: checkpoint shape {arr.shape} != {tuple(ref.shape)}"
                )
            state[key] = torch.from_numpy(arr.copy()).to(ref.dtype)
        model.load_state_dict(state)

    def restore_optimizer(self, optimizer: torch.optim.Adam, model: torch.nn.Module) -> None:
        param_names = [name for name, _ in model.named_parameters()]
        sd = optimizer.state_dict()
        state: dict[int, dict] = {}
        for idx, name in enumerate(param_names):
            slots = {}
            for slot in ("step", "exp_avg", "exp_avg_sq"):
                arr = self.arrays.get(f"adam/{name}/{slot}")
                if arr is not None:
                    slots[slot] = torch.from_numpy(arr.copy())
            if slots:
                state[idx] = slots
        sd["state"] = state
        optimizer.load_state_dict(sd)

    def restore_rng(self) -> None:
        torch.set_rng_state(torch.from_numpy(self.arrays["rng/torch"].copy()))


def load_checkpoint(path: str, expected_model: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint pair given either the .bin or .json path."""
    base = path[:-4] if path.endswith((".bin", ".json")) else path
    base = path[:-5] if path.endswith(".json") else base
    json_path, bin_path = base + ".json", base + ".bin"
    if not os.path.exists(json_path) or not os.path.exists(bin_path):
        raise CheckpointError(f"checkpoint pair not found at {base}.{{bin,json}}")
    with open(json_path) as f:
        meta = json.load(f)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}"
        )
    ckpt = Checkpoint(step=meta["step"], arrays=load_archive(bin_path), meta=meta)
    if expected_model is not None and ckpt.config.model != expected_model:
        raise CheckpointError(
            "checkpoint model config does not match the requested one:\n"
            f"  checkpoint: {ckpt.config.model}\n  requested:  {expected_model}"
        )
    return ckpt


def load_model(path: str) -> tuple[torch.nn.Module, TrainConfig]:
    """Rebuild a model (eval mode) from a checkpoint."""
    ckpt = load_checkpoint(path)
    config = ckpt.config
    torch.manual_seed(config.seed)
    model = build_model(config.model)
    ckpt.restore_model(model)
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# training loop


def _truncate_log(path: str, max_step: int) -> None:
    if not os.path.exists(path):
        return
    with open(path) as f:
        lines = [ln for ln in f if ln.strip()]
    kept = [ln for ln in lines if json.loads(ln)["step"] <= max_step]
    with open(path, "w") as f:
        f.writelines(kept)


def train(config: TrainConfig, resume_from: str | None = None) -> TrainResult:
    """Run the training loop; optionally resume bit-exactly from a checkpoint."""
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    torch.manual_seed(config.seed)
    model = build_model(config.model)
    optimizer = _build_optimizer(model, config.lr)
    dataset = SpriteDataset(config.dataset, "train", load_masks=False)
    h, w = dataset.manifest.image_size
    if (h, w) != (config.model.image_size, config.model.image_size):
        raise ValueError(
            f"dataset images are {h}x{w} but model.image_size is "
            f"{config.model.image_size}; set --image-size (or model.image_size) to match"
        )
    loader = BatchLoader(dataset, config.batch_size, seed=config.seed)
    geco = GecoState.for_images(
        config.model.image_size, goal_nll_per_dim=config.geco_goal_nll, beta=config.geco_beta
    )
    start_step = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_model=config.model)
        if ckpt.step > config.max_steps:
            raise ValueError(
                f"checkpoint is at step {ckpt.step}, beyond max_steps {config.max_steps}"
            )
        ckpt.restore_model(model)
        ckpt.restore_optimizer(optimizer, model)
        ckpt.restore_rng()
        loader.set_state(ckpt.loader_state())
        geco = ckpt.geco
        start_step = ckpt.step

    log_path = os.path.join(config.out_dir, "metrics.jsonl")
    _truncate_log(log_path, start_step)
    history: list[dict] = []
    model.train()
    last_clock = time.monotonic()

    with open(log_path, "a") as log_file:
        for step in range(start_step + 1, config.max_steps + 1):
            images = images_to_tensor(loader.next_batch())
            output = model(images)
            terms = elbo_terms(output)
            loss = geco_loss(terms, geco)

            if not torch.isfinite(loss):
                bin_path, _ = save_checkpoint(
                    config.out_dir, step - 1, model, optimizer, geco, loader.get_state(), config
                )
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; last good checkpoint: {bin_path}"
                )

            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            geco = geco_update(geco, float(terms.recon_ll.detach()))

            if config.log_every and step % config.log_every == 0:
                now = time.monotonic()
                wall_ms = 0 if config.deterministic else int((now - last_clock) * 1000)
                last_clock = now
                record = {
                    "step": step,
                    "recon_ll": float(terms.recon_ll.detach()),
                    "kl_m": float(terms.kl_mask.detach()),
                    "kl_c": float(terms.kl_component.detach()),
                    "beta": geco.beta,
                    "wall_ms": wall_ms,
                    "recon_err": reconstruction_error(images, output.reconstruction),
                }
                history.append(record)
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(
                    config.out_dir, step, model, optimizer, geco, loader.get_state(), config
                )

    final_step = config.max_steps
    bin_path, _ = _checkpoint_paths(config.out_dir, final_step)
    if not os.path.exists(bin_path):
        bin_path, _ = save_checkpoint(
            config.out_dir, final_step, model, optimizer, geco, loader.get_state(), config
        )
    return TrainResult(bin_path, log_path, history, model, geco, final_step)
