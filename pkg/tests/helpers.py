"""Shared test utilities: central finite differences against autograd."""

import numpy as np
import torch


def central_difference_grad(fn, tensor: torch.Tensor, index: int, step: float) -> float:
    """d fn / d tensor.flat[index] by central differences; restores the entry."""
    flat = tensor.view(-1)
    old = flat[index].item()
    with torch.no_grad():
        flat[index] = old + step
    plus = fn().item()
    with torch.no_grad():
        flat[index] = old - step
    minus = fn().item()
    with torch.no_grad():
        flat[index] = old
    return (plus - minus) / (2.0 * step)


def check_gradients(
    fn,
    tensors,
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-9,
    max_entries_per_tensor: int | None = None,
    seed: int = 0,
):
    """Compare autograd gradients of the scalar fn() against central finite
    differences on the given (float64, leaf) tensors.

    Entry i passes when |analytic - numeric| <= atol + rtol * max(|a|, |n|).
    Returns the worst error ratio |a - n| / (atol + rtol * max(|a|, |n|));
    values <= 1 pass. Optionally checks a deterministic random subset of
    entries per tensor to keep large parameter sets tractable.
    """
    tensors = list(tensors)
    for t in tensors:
        assert t.dtype == torch.float64, "finite differences need float64"
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_info = None
    for t, grad in zip(tensors, analytic):
        n = t.numel()
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            indices = rng.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            indices = range(n)
        for i in indices:
            a = grad.view(-1)[i].item()
            f = central_difference_grad(fn, t, int(i), step)
            ratio = abs(a - f) / (atol + rtol * max(abs(a), abs(f)))
            if ratio > worst:
                worst = ratio
                worst_info = (tuple(t.shape), int(i), a, f)
    return worst, worst_info


def seeded_generator(seed: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g
