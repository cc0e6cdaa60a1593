"""Command-line entry point.

Subcommands: ``data gen``, ``train``, ``sample``, ``decompose``, ``eval-seg``,
``probe``. Every command accepts ``--config FILE`` (JSON with flat dotted
keys, e.g. ``{"model.k": 5}``); explicit flags override file values. The
resolved configuration is embedded in every output artifact (JSON files and
manifests directly, image grids as a PNG text chunk). ``GENESIS_DETERMINISTIC=1``
is equivalent to passing ``--deterministic``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import dataset as data_mod
from . import metrics as metrics_mod
from . import probe as probe_mod
from . import trainer as trainer_mod
from .model import ModelConfig, build_model

CONFIG_PNG_KEY = "genesis-run-config"


def _env_deterministic() -> bool:
    return os.environ.get("GENESIS_DETERMINISTIC", "") == "1"


def _merge_config(file_path: str | None, cli_values: dict, defaults: dict) -> dict:
    """defaults < config file < explicit CLI flags (None means 'not given')."""
    values = dict(defaults)
    if file_path:
        with open(file_path) as f:
            file_values = json.load(f)
        if not isinstance(file_values, dict):
            raise ValueError(f"{file_path}: config file must be a JSON object")
        values.update(file_values)
    values.update({k: v for k, v in cli_values.items() if v is not None})
    return values


_MODEL_DEFAULTS = {
    "model.variant": "genesis",
    "model.k": 5,
    "model.image_size": 64,
    "model.mask_latent_dim": 64,
    "model.component_latent_dim": 64,
    "model.sigma_x": 0.7,
    "model.feature_dim": 256,
    "model.enc_filters": [32, 32, 64, 64, 64],
    "model.dec_filters": [64, 32, 32, 32, 32],
    "model.broadcast_filters": 64,
    "model.broadcast_layers": 4,
    "model.prior_hidden": 256,
    "model.mlp_hidden": 256,
}


def _model_config(values: dict) -> ModelConfig:
    return ModelConfig(
        variant=values["model.variant"],
        num_components=values["model.k"],
        image_size=values["model.image_size"],
        mask_latent_dim=values["model.mask_latent_dim"],
        component_latent_dim=values["model.component_latent_dim"],
        pixel_std=values["model.sigma_x"],
        feature_dim=values["model.feature_dim"],
        enc_filters=tuple(values["model.enc_filters"]),
        dec_filters=tuple(values["model.dec_filters"]),
        broadcast_filters=values["model.broadcast_filters"],
        broadcast_layers=values["model.broadcast_layers"],
        prior_hidden=values["model.prior_hidden"],
        mlp_hidden=values["model.mlp_hidden"],
    )


def _to_uint8(panel: np.ndarray) -> np.ndarray:
    return np.clip(np.round(panel * 255.0), 0, 255).astype(np.uint8)


def render_grid(panels: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Stack (H, W, 3) float panels into one uint8 grid with white padding."""
    h, w = panels[0][0].shape[:2]
    rows, cols = len(panels), len(panels[0])
    grid = np.full(
        (rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, 3), 255, dtype=np.uint8
    )
    for r, row in enumerate(panels):
        for c, panel in enumerate(row):
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            grid[y : y + h, x : x + w] = _to_uint8(panel)
    return grid


def save_grid_png(path: str, grid: np.ndarray, run_config: dict | None) -> None:
    info = PngInfo()
    if run_config is not None:
        # output-path keys don't describe the generating configuration and
        # would break byte-identity of fixed-seed reruns to other paths
        stripped = {k: v for k, v in run_config.items() if not str(k).endswith(".out")}
        info.add_text(CONFIG_PNG_KEY, json.dumps(stripped, sort_keys=True))
    Image.fromarray(grid).save(path, format="PNG", pnginfo=info)


def _chw_to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_data_gen(args) -> int:
    values = _merge_config(
        args.config,
        {
            "data.out": args.out,
            "data.seed": args.seed,
            "data.size": args.size,
            "data.counts": args.counts,
        },
        {"data.seed": 0, "data.size": 64, "data.counts": "50000,10000,10000"},
    )
    if not values.get("data.out"):
        raise ValueError("data gen: --out is required")
    counts = values["data.counts"]
    if isinstance(counts, str):
        counts = [int(c) for c in counts.split(",")]
    if len(counts) != 3:
        raise ValueError("data gen: --counts must be train,val,test")
    size = int(values["data.size"])
    manifest = data_mod.DatasetManifest(
        n_train=counts[0],
        n_val=counts[1],
        n_test=counts[2],
        image_size=(size, size),
        seed=int(values["data.seed"]),
    )
    data_mod.build_dataset(manifest, values["data.out"], extra_meta={"run_config": values})
    print(f"wrote {manifest.total} records to {values['data.out']}")
    return 0


def cmd_train(args) -> int:
    cli_values = {
        "train.data": args.data,
        "train.out": args.out,
        "train.steps": args.steps,
        "train.seed": args.seed,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
        "train.log_every": args.log_every,
        "train.checkpoint_every": args.checkpoint_every,
        "train.deterministic": args.deterministic,
        "model.variant": args.variant,
        "model.k": args.k,
        "model.image_size": args.image_size,
    }
    defaults = {
        "train.steps": 10_000,
        "train.seed": 0,
        "train.batch_size": 32,
        "train.lr": 1e-4,
        "train.log_every": 100,
        "train.checkpoint_every": 1000,
        "train.deterministic": _env_deterministic(),
        "train.grad_clip": 5.0,
        "train.geco_beta": 1.0,
        "train.geco_goal_nll": 0.5655,
        **_MODEL_DEFAULTS,
    }
    values = _merge_config(args.config, cli_values, defaults)
    if not values.get("train.data") or not values.get("train.out"):
        raise ValueError("train: --data and --out are required")
    config = trainer_mod.TrainConfig(
        dataset=values["train.data"],
        out_dir=values["train.out"],
        model=_model_config(values),
        batch_size=int(values["train.batch_size"]),
        lr=float(values["train.lr"]),
        max_steps=int(values["train.steps"]),
        seed=int(values["train.seed"]),
        checkpoint_every=int(values["train.checkpoint_every"]),
        log_every=int(values["train.log_every"]),
        deterministic=bool(values["train.deterministic"]),
        grad_clip=float(values["train.grad_clip"]),
        geco_beta=float(values["train.geco_beta"]),
        geco_goal_nll=float(values["train.geco_goal_nll"]),
    )
    result = trainer_mod.train(config, resume_from=args.resume)
    print(f"finished at step {result.step}; checkpoint: {result.checkpoint_path}")
    return 0


def _model_for_sampling(args, values: dict):
    if args.ckpt:
        model, train_config = trainer_mod.load_model(args.ckpt)
        return model, train_config.to_json()
    # untrained model: initialisation is seeded so outputs stay reproducible
    torch.manual_seed(int(values["sample.seed"]))
    model = build_model(_model_config(values))
    model.eval()
    return model, None


def cmd_sample(args) -> int:
    values = _merge_config(
        args.config,
        {"sample.n": args.n, "sample.seed": args.seed, "sample.out": args.out,
         "model.variant": args.variant, "model.k": args.k, "model.image_size": args.image_size},
        {"sample.n": 8, "sample.seed": 0, **_MODEL_DEFAULTS},
    )
    if not values.get("sample.out"):
        raise ValueError("sample: --out is required")
    model, ckpt_config = _model_for_sampling(args, values)
    if not hasattr(model, "generate"):
        raise ValueError("sample: this variant has no component-wise generator; use a scene model")
    generator = torch.Generator().manual_seed(int(values["sample.seed"]))
    n = int(values["sample.n"])
    composite, log_mixing, components, _ = model.generate(n, generator)
    mixing = log_mixing.exp()
    panels = []
    for i in range(n):
        row = [_chw_to_hwc(composite[i])]
        for k in range(components.shape[1]):
            row.append(_chw_to_hwc(mixing[i, k] * components[i, k]))
        panels.append(row)
    run_config = dict(values)
    if ckpt_config is not None:
        run_config["checkpoint_config"] = ckpt_config
    save_grid_png(values["sample.out"], render_grid(panels), run_config)
    print(f"wrote {n}x{components.shape[1] + 1} sample grid to {values['sample.out']}")
    return 0


def cmd_decompose(args) -> int:
    values = _merge_config(
        args.config,
        {"decompose.n": args.n, "decompose.seed": args.seed, "decompose.out": args.out,
         "decompose.split": args.split},
        {"decompose.n": 8, "decompose.seed": 0, "decompose.split": "val"},
    )
    if not args.ckpt or not args.data or not values.get("decompose.out"):
        raise ValueError("decompose: --ckpt, --data and --out are required")
    model, train_config = trainer_mod.load_model(args.ckpt)
    ds = data_mod.SpriteDataset(args.data, values["decompose.split"], load_masks=False)
    rng = np.random.default_rng(int(values["decompose.seed"]))
    n = min(int(values["decompose.n"]), len(ds))
    idx = rng.choice(len(ds), size=n, replace=False)
    images = trainer_mod.images_to_tensor(ds.images(idx))
    output = model.decompose(images, use_mean=True)
    mixing = output.mixing
    panels = []
    for i in range(n):
        row = [_chw_to_hwc(images[i]), _chw_to_hwc(output.reconstruction[i])]
        for k in range(output.components.shape[1]):
            row.append(_chw_to_hwc(mixing[i, k] * output.components[i, k]))
        panels.append(row)
    run_config = dict(values)
    run_config["checkpoint_config"] = train_config.to_json()
    save_grid_png(values["decompose.out"], render_grid(panels), run_config)
    print(f"wrote decomposition grid to {values['decompose.out']}")
    return 0


def cmd_eval_seg(args) -> int:
    values = _merge_config(
        args.config,
        {"eval.n": args.n, "eval.seed": args.seed, "eval.split": args.split, "eval.out": args.out},
        {"eval.n": 300, "eval.seed": 0, "eval.split": "test"},
    )
    if not args.ckpt or not args.data or not values.get("eval.out"):
        raise ValueError("eval-seg: --ckpt, --data and --out are required")
    models = [trainer_mod.load_model(path)[0] for path in args.ckpt]
    scores = metrics_mod.evaluate_segmentation(
        models,
        args.data,
        split=values["eval.split"],
        n_images=int(values["eval.n"]),
        seed=int(values["eval.seed"]),
    )
    scores["run_config"] = values
    scores["checkpoints"] = list(args.ckpt)
    _write_json(values["eval.out"], scores)
    agg = scores["aggregate"]
    print(
        f"ARI {agg['ari']['mean']:.3f}+-{agg['ari']['std']:.3f}  "
        f"SC {agg['sc']['mean']:.3f}+-{agg['sc']['std']:.3f}  "
        f"mSC {agg['msc']['mean']:.3f}+-{agg['msc']['std']:.3f}"
    )
    return 0


def cmd_probe(args) -> int:
    values = _merge_config(
        args.config,
        {
            "probe.task": args.task,
            "probe.out": args.out,
            "probe.epochs": args.epochs,
            "probe.train_size": args.train_size,
            "probe.seed": args.seed,
        },
        {"probe.task": "sprite_count", "probe.epochs": 100, "probe.train_size": 50_000,
         "probe.seed": 0},
    )
    if not args.ckpt or not args.data or not values.get("probe.out"):
        raise ValueError("probe: --ckpt, --data and --out are required")
    model, _ = trainer_mod.load_model(args.ckpt)
    config = probe_mod.ProbeConfig(
        task=values["probe.task"],
        epochs=int(values["probe.epochs"]),
        train_size=int(values["probe.train_size"]),
        seed=int(values["probe.seed"]),
    )
    result = probe_mod.run_probe(model, args.data, config)
    result["run_config"] = values
    _write_json(values["probe.out"], result)
    print(f"probe accuracy {result['accuracy']:.3f} (chance {result['chance']:.3f})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genesis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_gen = data_sub.add_parser("gen", help="generate the sprite dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--size", type=int)
    p_gen.add_argument("--counts", help="train,val,test record counts")
    p_gen.add_argument("--config")
    p_gen.set_defaults(func=cmd_data_gen)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--data")
    p_train.add_argument("--out")
    p_train.add_argument("--variant", choices=["genesis", "genesis_s", "bd_vae", "dc_vae"])
    p_train.add_argument("--k", type=int)
    p_train.add_argument("--image-size", type=int)
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--log-every", type=int)
    p_train.add_argument("--checkpoint-every", type=int)
    p_train.add_argument("--deterministic", action=argparse.BooleanOptionalAction)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--config")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="generate novel scenes from the prior")
    p_sample.add_argument("--ckpt")
    p_sample.add_argument("--variant", choices=["genesis", "genesis_s"])
    p_sample.add_argument("--k", type=int)
    p_sample.add_argument("--image-size", type=int)
    p_sample.add_argument("--n", type=int)
    p_sample.add_argument("--seed", type=int)
    p_sample.add_argument("--out")
    p_sample.add_argument("--config")
    p_sample.set_defaults(func=cmd_sample)

    p_dec = sub.add_parser("decompose", help="decompose dataset images into components")
    p_dec.add_argument("--ckpt")
    p_dec.add_argument("--data")
    p_dec.add_argument("--split", choices=list(data_mod.SPLITS))
    p_dec.add_argument("--n", type=int)
    p_dec.add_argument("--seed", type=int)
    p_dec.add_argument("--out")
    p_dec.add_argument("--config")
    p_dec.set_defaults(func=cmd_decompose)

    p_eval = sub.add_parser("eval-seg", help="segmentation metrics on a trained model")
    p_eval.add_argument("--ckpt", action="append", help="repeat for multiple seeds")
    p_eval.add_argument("--data")
    p_eval.add_argument("--split", choices=list(data_mod.SPLITS))
    p_eval.add_argument("--n", type=int)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--out")
    p_eval.add_argument("--config")
    p_eval.set_defaults(func=cmd_eval_seg)

    p_probe = sub.add_parser("probe", help="train a classifier probe on frozen latents")
    p_probe.add_argument("--ckpt")
    p_probe.add_argument("--data")
    p_probe.add_argument("--task", choices=list(probe_mod.TASKS))
    p_probe.add_argument("--epochs", type=int)
    p_probe.add_argument("--train-size", type=int)
    p_probe.add_argument("--seed", type=int)
    p_probe.add_argument("--out")
    p_probe.add_argument("--config")
    p_probe.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"genesis: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
