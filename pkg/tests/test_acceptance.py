"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The training smoke test
(criterion 6) trains 2,000 steps and is the slow one; criterion 7 is soft
(logged, not gated) and needs a completed 10,000-step run directory in
GENESIS_LONG_RUN_DIR, otherwise it reports SKIPPED.
"""

import json
import math
import os
import time

import numpy as np
import pytest
import torch
from scipy import stats
from sklearn.metrics import adjusted_rand_score

from genesis.cli import main as cli_main
from genesis.metrics import (
    foreground_ari,
    mean_segmentation_covering,
    segmentation_covering,
)
from genesis.model import build_model, hard_segmentation, mixture_log_likelihood, stick_breaking
from genesis.objective import GecoState, elbo, gaussian_kl, geco_update
from genesis.trainer import load_checkpoint, load_model, train

from conftest import gradcheck_config, tiny_model_config
from helpers import check_gradients, seeded_generator
from smoke import smoke_model_config, smoke_train_config
from test_metrics import brute_force_covering, disjoint_instance_masks, random_masks
from test_objective import kl_quadrature_1d


def report(criterion: int, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion:02d} PASS: {detail}", flush=True)


def test_criterion_01_stick_breaking_validity():
    """10^6 random logit configurations per K in {2, 5, 9}: mixing sums to 1
    within 1e-5 at every pixel and every scope is non-negative; < 1 min."""
    t0 = time.time()
    worst_sum = 0.0
    for k in (2, 5, 9):
        torch.manual_seed(k)
        # 100 x 100 x 100 = 10^6 pixel configurations, wide logit range
        logits = torch.randn(100, k - 1, 1, 100, 100) * 20.0
        log_pi = stick_breaking(logits)
        pi = log_pi.exp()
        total = pi.sum(dim=1)
        worst_sum = max(worst_sum, (total - 1.0).abs().max().item())
        assert (total - 1.0).abs().max() <= 1e-5
        scopes = 1.0 - pi.cumsum(dim=1)
        assert (scopes >= -1e-5).all()
        assert (pi >= 0).all()
    elapsed = time.time() - t0
    assert elapsed < 60.0, f"stick-breaking validity took {elapsed:.1f}s"
    report(1, f"3x10^6 configurations, max |sum-1| = {worst_sum:.2e}, {elapsed:.1f}s")


def test_criterion_02_mixture_likelihood_oracle():
    """Log-space mixture likelihood matches float64 direct-density brute force
    within 1e-8 on 1,000 random tiny instances (<= 4x4x3, K <= 4)."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 5))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        sigma = float(rng.uniform(0.3, 1.5))
        x = rng.random((1, 3, h, w))
        comps = rng.random((1, k, 3, h, w))
        raw = rng.random((1, k, 1, h, w)) + 1e-4
        pi = raw / raw.sum(axis=1, keepdims=True)
        density = np.zeros((1, 3, h, w))
        for kk in range(k):
            pdf = np.exp(-0.5 * ((x - comps[:, kk]) / sigma) ** 2) / (
                sigma * math.sqrt(2 * math.pi)
            )
            density += pi[:, kk] * pdf
        oracle = np.log(density).sum()
        got = mixture_log_likelihood(
            torch.from_numpy(x), torch.from_numpy(np.log(pi)), torch.from_numpy(comps), sigma
        ).item()
        worst = max(worst, abs(got - oracle))
        assert abs(got - oracle) <= 1e-8
    report(2, f"1,000 tiny instances, max |delta| = {worst:.2e}")


@pytest.mark.parametrize("variant", ["genesis", "genesis_s", "bd_vae", "dc_vae"])
def test_criterion_03_elbo_gradient_checks(variant):
    """ELBO gradients on a 4x4, K=2, D=2 instance match central finite
    differences (step 1e-5, float64, shared reparameterisation noise) with
    max relative error <= 1e-3, for all four variants."""
    torch.manual_seed(0)
    model = build_model(gradcheck_config(variant)).double()
    model.train()
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)

    def loss():
        return -elbo(x, model, generator=seeded_generator(42)).elbo

    worst, info = check_gradients(
        loss,
        list(model.parameters()),
        step=1e-5,
        rtol=1e-3,
        atol=1e-8,
        max_entries_per_tensor=4,
        seed=1,
    )
    assert worst <= 1.0, f"{variant}: worst gradient error ratio {worst:.3f} at {info}"
    report(3, f"{variant}: all sampled parameter entries within tolerance (worst ratio {worst:.3f})")


def test_criterion_04_kl_correctness():
    """Analytic per-step Gaussian KL matches quadrature within 1e-6 on 100
    random 1-D cases; KL(q||q) is exactly zero."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        mq, mp = rng.normal(0, 2, size=2)
        sq, sp = rng.uniform(0.1, 3.0, size=2)
        analytic = gaussian_kl(
            torch.tensor([mq]), torch.tensor([sq]), torch.tensor([mp]), torch.tensor([sp])
        ).item()
        numeric = kl_quadrature_1d(mq, sq, mp, sp)
        worst = max(worst, abs(analytic - numeric))
        assert abs(analytic - numeric) <= 1e-6
    mean = torch.randn(16)
    std = torch.rand(16) + 0.05
    assert (gaussian_kl(mean, std, mean, std) == 0).all()
    report(4, f"100 quadrature cases, max |delta| = {worst:.2e}; KL(q||q) == 0 exactly")


def test_criterion_05_geco_dynamics_and_feasibility():
    """Sustained constraint violation drives beta monotonically up, sustained
    satisfaction monotonically down; the closed-form likelihood ceiling
    (-0.5623/dim at sigma=0.7) is confirmed numerically to 4 decimals."""
    state = GecoState(goal=-100.0, beta=1.0)
    betas = []
    for _ in range(200):
        state = geco_update(state, recon_ll=-150.0)
        betas.append(state.beta)
    assert all(b2 > b1 for b1, b2 in zip(betas, betas[1:])), "violation must inflate beta"

    state = GecoState(goal=-100.0, beta=1.0)
    betas = []
    for _ in range(200):
        state = geco_update(state, recon_ll=-60.0)
        betas.append(state.beta)
    assert all(b2 < b1 for b1, b2 in zip(betas, betas[1:])), "satisfaction must deflate beta"

    closed_form = -math.log(0.7 * math.sqrt(2.0 * math.pi))
    numeric = float(stats.norm.logpdf(0.0, loc=0.0, scale=0.7))
    assert round(closed_form, 4) == -0.5623
    assert round(numeric, 4) == -0.5623
    goal_per_dim = -0.5655
    assert goal_per_dim < closed_form, "goal must sit below the likelihood ceiling"
    residual = math.sqrt(2 * 0.7**2 * (closed_form - goal_per_dim))
    assert abs(residual - 0.056) < 5e-4
    report(
        5,
        f"beta monotone both ways; ceiling {closed_form:.4f} == numeric {numeric:.4f}, "
        f"goal {goal_per_dim} feasible at |residual| ~ {residual:.3f}",
    )


def test_criterion_08_metric_oracles():
    """SC/mSC/ARI agree with independent brute-force implementations on
    10,000 random <= 8x8 instances to 1e-12; splitting a predicted mask that
    over-segments an object never increases SC/mSC across 1,000 splits."""
    rng = np.random.default_rng(3)
    worst_sc, worst_ari = 0.0, 0.0
    for _ in range(10_000):
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        gt = disjoint_instance_masks(rng, int(rng.integers(1, 5)), shape)
        if not gt:
            continue
        pred = random_masks(rng, int(rng.integers(1, 5)), shape)
        sc = segmentation_covering(gt, pred)
        msc = mean_segmentation_covering(gt, pred)
        worst_sc = max(
            worst_sc,
            abs(sc - brute_force_covering(gt, pred, True)),
            abs(msc - brute_force_covering(gt, pred, False)),
        )
        assert worst_sc <= 1e-12

        # foreground ARI vs the independent contingency implementation
        gt_labels = np.zeros(shape, dtype=int)
        for i, m in enumerate(gt):
            gt_labels[m] = i + 1
        pred_labels = rng.integers(0, 5, size=shape)
        fg = gt_labels > 0
        mine = foreground_ari(gt, pred_labels)
        oracle = adjusted_rand_score(gt_labels[fg], pred_labels[fg])
        worst_ari = max(worst_ari, abs(mine - oracle))
        assert worst_ari <= 1e-12

    splits_checked = 0
    while splits_checked < 1000:
        shape = (8, 8)
        gt = disjoint_instance_masks(rng, int(rng.integers(1, 4)), shape)
        if not gt:
            continue
        pred = [m for m in random_masks(rng, 2, shape) if m.any()]
        host = gt[int(rng.integers(0, len(gt)))]
        part_of_object = host & (rng.random(shape) < 0.8)
        coords = np.argwhere(part_of_object)
        if len(coords) < 2:
            continue
        pred = pred + [part_of_object]
        half = rng.permutation(len(coords))[: len(coords) // 2]
        part_a = np.zeros(shape, dtype=bool)
        part_a[tuple(coords[half].T)] = True
        part_b = part_of_object & ~part_a
        if not part_a.any() or not part_b.any():
            continue
        split_pred = pred[:-1] + [part_a, part_b]
        assert segmentation_covering(gt, split_pred) <= segmentation_covering(gt, pred) + 1e-12
        assert (
            mean_segmentation_covering(gt, split_pred)
            <= mean_segmentation_covering(gt, pred) + 1e-12
        )
        splits_checked += 1
    report(
        8,
        f"10,000 oracle instances (max SC/mSC delta {worst_sc:.1e}, max ARI delta "
        f"{worst_ari:.1e}); 1,000 over-segmentation splits never increased SC/mSC",
    )


TINY_CLI_KEYS = {
    "model.k": 3,
    "model.image_size": 16,
    "model.mask_latent_dim": 8,
    "model.component_latent_dim": 8,
    "model.feature_dim": 16,
    "model.enc_filters": [4, 4, 8, 8, 8],
    "model.dec_filters": [8, 4, 4, 4, 4],
    "model.broadcast_filters": 8,
    "model.broadcast_layers": 2,
    "model.prior_hidden": 16,
    "model.mlp_hidden": 16,
}


def test_criterion_09_training_determinism(tiny_dataset, tmp_path):
    """Two deterministic 200-step CLI runs with the same seed produce
    byte-identical metric logs; resuming from the step-100 checkpoint
    reproduces steps 101-200 exactly."""
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_CLI_KEYS))

    def run(out, steps, resume=None):
        args = [
            "train", "--data", tiny_dataset, "--out", out, "--config", str(cfg_path),
            "--steps", str(steps), "--batch-size", "8", "--seed", "0",
            "--log-every", "1", "--checkpoint-every", "100", "--deterministic",
        ]
        if resume:
            args += ["--resume", resume]
        assert cli_main(args) == 0

    dir_a, dir_b, dir_c = (str(tmp_path / d) for d in ("a", "b", "c"))
    run(dir_a, 200)
    run(dir_b, 200)
    log_a = open(os.path.join(dir_a, "metrics.jsonl"), "rb").read()
    log_b = open(os.path.join(dir_b, "metrics.jsonl"), "rb").read()
    assert log_a == log_b, "same-seed runs must produce byte-identical logs"

    run(dir_c, 100)
    run(dir_c, 200, resume=os.path.join(dir_c, "ckpt_000100.bin"))
    log_c = open(os.path.join(dir_c, "metrics.jsonl"), "rb").read()
    assert log_c == log_a, "resumed run must replay steps 101-200 exactly"
    bin_a = open(os.path.join(dir_a, "ckpt_000200.bin"), "rb").read()
    bin_c = open(os.path.join(dir_c, "ckpt_000200.bin"), "rb").read()
    assert bin_a == bin_c, "resumed final state must be bit-identical"
    report(9, "byte-identical logs across runs; resume at step 100 replays exactly")


@pytest.mark.parametrize("k", [5, 7, 9])
def test_criterion_10_sampling_pipeline(k, tmp_path):
    """`sample` from an untrained model yields valid mixing probabilities and
    composites in [0, 1] for K in {5, 7, 9}; fixed-seed outputs are
    byte-identical."""
    keys = dict(TINY_CLI_KEYS)
    keys["model.k"] = k
    cfg_path = tmp_path / f"k{k}.json"
    cfg_path.write_text(json.dumps(keys))
    out_a = str(tmp_path / f"a{k}.png")
    out_b = str(tmp_path / f"b{k}.png")
    for out in (out_a, out_b):
        assert cli_main(["sample", "--config", str(cfg_path), "--n", "4",
                         "--seed", "11", "--out", out]) == 0
    assert open(out_a, "rb").read() == open(out_b, "rb").read()

    # same seeded construction through the API: check the mixing invariants
    torch.manual_seed(11)
    model = build_model(tiny_model_config("genesis", k=k))
    model.eval()
    composite, log_mixing, components, _ = model.generate(4, seeded_generator(11))
    pi = log_mixing.exp()
    assert ((pi.sum(dim=1) - 1).abs().max() <= 1e-5) and (pi >= 0).all()
    assert composite.min() >= 0 and composite.max() <= 1
    report(10, f"K={k}: valid mixing, composite in [0,1], byte-identical PNGs")


@pytest.mark.slow
def test_criterion_06_training_smoke(tmp_path):
    """2,000 steps on 32x32 scenes, K=5, batch 32, seed 0: per-pixel-channel
    reconstruction error (MSE) improves >= 30% over the step-50 average, the
    beta trajectory stays finite, and no logged value is NaN."""
    data_root = str(tmp_path / "data32")
    from smoke import SMOKE_DATASET_MANIFEST
    from genesis.dataset import build_dataset

    build_dataset(SMOKE_DATASET_MANIFEST, data_root)
    config = smoke_train_config(data_root, str(tmp_path / "run"), max_steps=2000)
    t0 = time.time()
    result = train(config)
    elapsed = time.time() - t0

    records = result.history
    assert len(records) == 2000
    for r in records:
        assert all(np.isfinite(v) for v in r.values()), f"non-finite metric at step {r['step']}"
    baseline = float(np.mean([r["recon_err"] for r in records[:50]]))
    final = float(np.mean([r["recon_err"] for r in records[-100:]]))
    improvement = 1.0 - final / baseline
    assert improvement >= 0.30, (
        f"reconstruction error improved only {improvement:.1%} "
        f"(step-50 avg {baseline:.4f} -> final {final:.4f})"
    )
    report(
        6,
        f"recon error {baseline:.4f} -> {final:.4f} ({improvement:.1%} improvement), "
        f"beta finite, {elapsed / 60:.1f} min",
    )


def test_criterion_07_decomposition_emergence():
    """Soft criterion (logged, not gated): after 10,000 steps the mean
    foreground ARI on 100 validation scenes should beat the permutation
    chance level by >= 0.2."""
    run_dir = os.environ.get("GENESIS_LONG_RUN_DIR")
    if not run_dir:
        pytest.skip("soft criterion: set GENESIS_LONG_RUN_DIR to a completed 10,000-step run")
    ckpt_path = os.path.join(run_dir, "ckpt_010000.bin")
    assert os.path.exists(ckpt_path), f"no 10,000-step checkpoint in {run_dir}"
    ckpt = load_checkpoint(ckpt_path)
    assert ckpt.config.model == smoke_model_config(), "long run must use the smoke config"
    model, train_config = load_model(ckpt_path)

    from genesis.dataset import SpriteDataset
    from genesis.trainer import images_to_tensor

    dataset = SpriteDataset(train_config.dataset, "val")
    rng = np.random.default_rng(0)
    indices = rng.choice(len(dataset), size=100, replace=False)
    images = images_to_tensor(dataset.images(indices))
    label_maps = dataset.label_maps(indices)
    output = model.decompose(images, use_mean=True)
    pred = hard_segmentation(output.log_mixing).cpu().numpy()
    k = output.log_mixing.shape[1]

    def mean_ari(labelings):
        scores = []
        for i in range(100):
            gt_masks = [label_maps[i] == v for v in range(1, label_maps[i].max() + 1)]
            gt_masks = [m for m in gt_masks if m.any()]
            scores.append(foreground_ari(gt_masks, labelings[i]))
        return float(np.mean(scores))

    model_ari = mean_ari(pred)
    chance_ari = np.mean(
        [mean_ari(rng.integers(0, k, size=pred.shape)) for _ in range(5)]
    )
    margin = model_ari - chance_ari
    outcome = "PASS" if margin >= 0.2 else "FAIL"
    print(
        f"\nACCEPTANCE 07 SOFT {outcome} (logged, not gated): foreground ARI "
        f"{model_ari:.3f} vs permutation chance {chance_ari:.3f} (margin {margin:+.3f})",
        flush=True,
    )
    assert np.isfinite(model_ari) and np.isfinite(chance_ari)
