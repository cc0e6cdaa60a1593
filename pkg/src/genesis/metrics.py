"""Unsupervised-segmentation metrics.

Three scores compare a predicted segmentation against ground-truth instance
masks:

* adjusted Rand index restricted to ground-truth foreground pixels
  (permutation-invariant, but blind to over-segmentation),
* segmentation covering: the |R|-weighted mean over non-empty ground-truth
  masks R of the best IOU against any predicted mask,
* its unweighted counterpart (equal importance per object).

Both covering variants penalise splitting an object across predicted masks,
since the best single-mask IOU drops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class MaskSet:
    """A list of binary (H, W) masks; ground-truth sets are expected to be
    pairwise disjoint, predicted sets may be arbitrary. Empty masks are
    allowed and skipped where the metric says so."""

    masks: list[np.ndarray]
    ground_truth: bool = False

    def non_empty(self) -> list[np.ndarray]:
        return [m for m in self.masks if m.any()]


def _as_masks(masks) -> list[np.ndarray]:
    if isinstance(masks, MaskSet):
        masks = masks.masks
    return [np.asarray(m, dtype=bool) for m in masks]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricsError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _covering(gt_masks, pred_masks, weighted: bool) -> float:
    gt = [m for m in _as_masks(gt_masks) if m.any()]
    pred = _as_masks(pred_masks)
    if not gt:
        raise MetricsError("segmentation covering needs at least one non-empty ground-truth mask")
    best = [max((iou(r, p) for p in pred), default=0.0) for r in gt]
    if weighted:
        sizes = np.array([m.sum() for m in gt], dtype=np.float64)
        return float((sizes * best).sum() / sizes.sum())
    return float(np.mean(best))


def segmentation_covering(gt_masks, pred_masks) -> float:
    """Pixel-count-weighted mean of the best IOU per ground-truth mask."""
    return _covering(gt_masks, pred_masks, weighted=True)


def mean_segmentation_covering(gt_masks, pred_masks) -> float:
    """Unweighted mean of the best IOU per non-empty ground-truth mask."""
    return _covering(gt_masks, pred_masks, weighted=False)


def adjusted_rand_index(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """ARI from the contingency table between two labelings of the same
    pixels. Degenerate cases with zero denominator (e.g. a single cluster on
    both sides) return 1 by convention."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise MetricsError("labelings must cover the same pixels")
    if a.size == 0:
        raise MetricsError("empty labeling")
    _, a_idx = np.unique(a, return_inverse=True)
    _, b_idx = np.unique(b, return_inverse=True)
    n_a = a_idx.max() + 1
    n_b = b_idx.max() + 1
    table = np.zeros((n_a, n_b), dtype=np.int64)
    np.add.at(table, (a_idx, b_idx), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(a.size)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def foreground_ari(gt_instances, pred_labels: np.ndarray) -> float:
    """ARI between ground-truth instance ids and predicted labels, evaluated
    only on pixels covered by some ground-truth instance."""
    masks = _as_masks(gt_instances)
    pred = np.asarray(pred_labels)
    if not masks:
        raise MetricsError("no ground-truth instances")
    gt_labels = np.zeros(masks[0].shape, dtype=np.int64)
    for i, m in enumerate(masks):
        if m.shape != pred.shape:
            raise MetricsError(f"mask shape {m.shape} != labeling shape {pred.shape}")
        gt_labels[m] = i + 1
    fg = gt_labels > 0
    if not fg.any():
        raise MetricsError("no foreground pixels in ground truth")
    return adjusted_rand_index(gt_labels[fg], pred[fg])


def masks_from_label_map(labels: np.ndarray, include_zero: bool = False) -> list[np.ndarray]:
    """Split a label map into per-label binary masks (0 is background unless
    include_zero)."""
    values = np.unique(labels)
    if not include_zero:
        values = values[values != 0]
    return [labels == v for v in values]


@dataclass
class SegScores:
    ari: float
    sc: float
    msc: float


def score_single_image(gt_label_map: np.ndarray, pred_labels: np.ndarray, num_slots: int) -> SegScores:
    """Scores for one image given its ground-truth label map and the
    predicted per-pixel slot assignment (argmax of the mixing probabilities,
    so predicted masks form a partition)."""
    gt_masks = masks_from_label_map(gt_label_map)
    pred_masks = [pred_labels == k for k in range(num_slots)]
    return SegScores(
        ari=foreground_ari(gt_masks, pred_labels),
        sc=segmentation_covering(gt_masks, pred_masks),
        msc=mean_segmentation_covering(gt_masks, pred_masks),
    )


def evaluate_segmentation(
    models,
    data_root: str,
    split: str = "test",
    n_images: int = 300,
    seed: int = 0,
    use_mean: bool = True,
) -> dict:
    """Score one or more trained models (e.g. seeds) on random images.

    Returns per-image scores per model plus aggregates: mean and std across
    models of the per-model means (std across images if only one model).
    """
    from .dataset import SpriteDataset
    from .model import hard_segmentation
    from .trainer import images_to_tensor

    models = list(models)
    if not models:
        raise MetricsError("need at least one model to evaluate")
    dataset = SpriteDataset(data_root, split)
    n_images = min(n_images, len(dataset))
    rng = np.random.default_rng(seed)
    indices = rng.choice(len(dataset), size=n_images, replace=False)
    images = images_to_tensor(dataset.images(indices))
    label_maps = dataset.label_maps(indices)

    per_model: list[dict] = []
    for model in models:
        model.eval()
        generator = None
        if not use_mean:
            import torch

            generator = torch.Generator().manual_seed(seed)
        output = model.decompose(images, generator=generator, use_mean=use_mean)
        if output.log_mixing is None:
            raise MetricsError("model does not produce mixing probabilities (VAE baseline?)")
        pred = hard_segmentation(output.log_mixing).cpu().numpy()
        k = output.log_mixing.shape[1]
        scores = [score_single_image(label_maps[i], pred[i], k) for i in range(n_images)]
        per_model.append(
            {
                "ari": [s.ari for s in scores],
                "sc": [s.sc for s in scores],
                "msc": [s.msc for s in scores],
            }
        )

    aggregate = {}
    for key in ("ari", "sc", "msc"):
        means = np.array([np.mean(m[key]) for m in per_model])
        if len(models) > 1:
            aggregate[key] = {"mean": float(means.mean()), "std": float(means.std())}
        else:
            values = np.array(per_model[0][key])
            aggregate[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return {
        "n_images": n_images,
        "n_models": len(models),
        "split": split,
        "per_model": per_model,
        "aggregate": aggregate,
    }
