"""Differentiable building blocks: gated conv encoder/decoder, spatial
broadcast decoder, LSTM cells, and diagonal-Gaussian parameter heads.

All blocks are pure functions of (parameters, inputs). Standard deviations
are emitted as softplus(raw) + STD_FLOOR so they stay strictly positive.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

STD_FLOOR = 1e-4

# BatchNorm running-statistics decay 0.9 (torch's `momentum` is 1 - decay)
_BN_MOMENTUM = 0.1


def _check_image_size(image_size: int) -> None:
    if image_size % 4 != 0:
        raise ValueError(f"image size must be divisible by 4, got {image_size}")


class GatedConvEncoder(nn.Module):
    """Five conv stages (kernel 5, strides [1,2,1,2,1]) with batch norm before
    GLU gating, then a gated fully connected layer to a feature vector."""

    STRIDES = (1, 2, 1, 2, 1)

    def __init__(
        self,
        in_channels: int = 3,
        feature_dim: int = 256,
        image_size: int = 64,
        filters: tuple[int, ...] = (32, 32, 64, 64, 64),
    ):
        super().__init__()
        _check_image_size(image_size)
        if len(filters) != len(self.STRIDES):
            raise ValueError("encoder needs one filter count per stage")
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.image_size = image_size
        stages = []
        c_in = in_channels
        for f, s in zip(filters, self.STRIDES):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, 2 * f, kernel_size=5, stride=s, padding=2),
                    nn.BatchNorm2d(2 * f, momentum=_BN_MOMENTUM),
                    nn.GLU(dim=1),
                )
            )
            c_in = f
        self.stages = nn.ModuleList(stages)
        low = image_size // 4
        self.fc = nn.Linear(filters[-1] * low * low, 2 * feature_dim)

    def forward(self, x: torch.Tensor, return_stages: bool = False):
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[-1] != self.image_size:
            raise ValueError(
                f"encoder expects (B, {self.in_channels}, {self.image_size}, "
                f"{self.image_size}), got {tuple(x.shape)}"
            )
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        out = F.glu(self.fc(h.flatten(start_dim=1)), dim=-1)
        if return_stages:
            return out, feats
        return out


class GatedConvDecoder(nn.Module):
    """Mirror of the encoder: gated FC input stage, five gated conv stages
    (transposed at the mirrored stride-2 positions), 1x1 head to logits."""

    UPSAMPLE = (False, True, False, True, False)

    def __init__(
        self,
        latent_dim: int,
        out_channels: int = 1,
        image_size: int = 64,
        filters: tuple[int, ...] = (64, 32, 32, 32, 32),
    ):
        super().__init__()
        _check_image_size(image_size)
        if len(filters) != len(self.UPSAMPLE):
            raise ValueError("decoder needs one filter count per stage")
        self.latent_dim = latent_dim
        self.out_channels = out_channels
        self.image_size = image_size
        self._low = image_size // 4
        self._fc_channels = filters[0]
        self.fc = nn.Linear(latent_dim, 2 * self._fc_channels * self._low * self._low)
        stages = []
        c_in = self._fc_channels
        for f, up in zip(filters, self.UPSAMPLE):
            if up:
                conv = nn.ConvTranspose2d(
                    c_in, 2 * f, kernel_size=5, stride=2, padding=2, output_padding=1
                )
            else:
                conv = nn.Conv2d(c_in, 2 * f, kernel_size=5, stride=1, padding=2)
            stages.append(
                nn.Sequential(conv, nn.BatchNorm2d(2 * f, momentum=_BN_MOMENTUM), nn.GLU(dim=1))
            )
            c_in = f
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(filters[-1], out_channels, kernel_size=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"decoder expects (B, {self.latent_dim}), got {tuple(z.shape)}")
        h = F.glu(self.fc(z), dim=-1)
        h = h.view(z.shape[0], self._fc_channels, self._low, self._low)
        for stage in self.stages:
            h = stage(h)
        return self.head(h)  # (B, out_channels, H, W) logits


def coordinate_channels(height: int, width: int, dtype=None, device=None) -> torch.Tensor:
    """(2, H, W) linear coordinate grids spanning [-1, 1] (0 for size-1 axes)."""
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device) if height > 1 else torch.zeros(1, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device) if width > 1 else torch.zeros(1, dtype=dtype, device=device)
    yy = ys[:, None].expand(height, width)
    xx = xs[None, :].expand(height, width)
    return torch.stack((xx, yy), dim=0)


class BroadcastDecoder(nn.Module):
    """Tile the latent over the image grid, append coordinate channels, then
    size-preserving 3x3 convs with ELUs. The first `squash_channels` output
    channels are squashed to [0, 1]; any remaining channels stay raw logits."""

    def __init__(
        self,
        latent_dim: int,
        out_channels: int = 3,
        image_size: int = 64,
        filters: int = 64,
        n_layers: int = 4,
        squash_channels: int = 3,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.out_channels = out_channels
        self.image_size = image_size
        self.squash_channels = squash_channels
        layers = []
        c_in = latent_dim + 2
        for _ in range(n_layers):
            layers += [nn.Conv2d(c_in, filters, kernel_size=3, padding=1), nn.ELU()]
            c_in = filters
        self.convs = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, out_channels, kernel_size=1)

    def forward(self, z: torch.Tensor, height: int | None = None, width: int | None = None):
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"broadcast decoder expects (B, {self.latent_dim}), got {tuple(z.shape)}")
        h = height if height is not None else self.image_size
        w = width if width is not None else self.image_size
        b = z.shape[0]
        tiled = z[:, :, None, None].expand(b, z.shape[1], h, w)
        coords = coordinate_channels(h, w, dtype=z.dtype, device=z.device)
        out = self.head(self.convs(torch.cat((tiled, coords[None].expand(b, 2, h, w)), dim=1)))
        if self.squash_channels:
            s = self.squash_channels
            out = torch.cat((torch.sigmoid(out[:, :s]), out[:, s:]), dim=1)
        return out


class RecurrentCell(nn.Module):
    """LSTM cell with an optional learned initial state."""

    def __init__(self, input_size: int, hidden_size: int, learned_init: bool = False):
        super().__init__()
        self.cell = nn.LSTMCell(input_size, hidden_size)
        self.hidden_size = hidden_size
        if learned_init:
            self.h0 = nn.Parameter(torch.zeros(hidden_size))
            self.c0 = nn.Parameter(torch.zeros(hidden_size))
        else:
            self.register_buffer("h0", torch.zeros(hidden_size))
            self.register_buffer("c0", torch.zeros(hidden_size))

    def initial_state(self, batch: int):
        return (
            self.h0[None].expand(batch, self.hidden_size),
            self.c0[None].expand(batch, self.hidden_size),
        )

    def forward(self, inputs: torch.Tensor, state=None):
        if state is None:
            state = self.initial_state(inputs.shape[0])
        h, c = self.cell(inputs, state)
        return h, (h, c)


def split_gaussian_params(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a (B, 2D) raw output into (mean, std) with std > 0."""
    mean, raw_std = raw.chunk(2, dim=-1)
    return mean, F.softplus(raw_std) + STD_FLOOR


class GaussianHead(nn.Module):
    """Linear map to the mean and pre-softplus scale of a diagonal Gaussian."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, 2 * out_dim)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor):
        return split_gaussian_params(self.fc(x))


class GaussianHeadMLP(nn.Module):
    """Two ELU hidden layers then a Gaussian parameter head."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ELU(),
            nn.Linear(hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, 2 * out_dim),
        )
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor):
        return split_gaussian_params(self.net(x))
