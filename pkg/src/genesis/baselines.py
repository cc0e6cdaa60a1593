"""Single-latent VAE baselines sharing the scene models' encoder architecture
and Gaussian image likelihood: one with a spatial broadcast decoder (wider,
twice the filters), one with the mirrored deconvolutional decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .model import LatentChain, ModelConfig, ModelOutput, _reparam_sample
from .nets import BroadcastDecoder, GatedConvDecoder, GatedConvEncoder, GaussianHead
from .objective import kl_chain


@dataclass
class VaeConfig:
    latent_dim: int = 64
    decoder: str = "broadcast"  # "broadcast" | "deconv"
    broadcast_filter_multiplier: int = 2

    @classmethod
    def from_model_config(cls, config: ModelConfig) -> "VaeConfig":
        decoder = "broadcast" if config.variant == "bd_vae" else "deconv"
        return cls(latent_dim=config.component_latent_dim, decoder=decoder)


def gaussian_image_log_likelihood(x, mean, pixel_std) -> torch.Tensor:
    """Sum over pixels/channels of log N(x; mean, pixel_std^2), per image."""
    log_norm = -0.5 * math.log(2.0 * math.pi) - math.log(pixel_std)
    ll = log_norm - 0.5 * ((x - mean) / pixel_std) ** 2
    return ll.flatten(start_dim=1).sum(dim=-1)


class VaeBaseline(nn.Module):
    """Standard-normal-prior VAE trained under the same constrained objective
    as the scene models."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        if config.variant not in ("bd_vae", "dc_vae"):
            raise ValueError(f"VaeBaseline cannot build variant {config.variant!r}")
        self.config = config
        self.vae_config = VaeConfig.from_model_config(config)
        c = config
        d = self.vae_config.latent_dim
        self.encoder = GatedConvEncoder(3, c.feature_dim, c.image_size, c.enc_filters)
        self.head = GaussianHead(c.feature_dim, d)
        if self.vae_config.decoder == "broadcast":
            self.decoder = BroadcastDecoder(
                d,
                3,
                c.image_size,
                self.vae_config.broadcast_filter_multiplier * c.broadcast_filters,
                c.broadcast_layers,
            )
        else:
            self.decoder = GatedConvDecoder(d, 3, c.image_size, c.dec_filters)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent -> image mean in [0, 1]."""
        out = self.decoder(z)
        if self.vae_config.decoder == "deconv":
            out = torch.sigmoid(out)  # same squashing as the scene components
        return out

    def forward(self, x: torch.Tensor, generator=None, use_mean: bool = False) -> ModelOutput:
        mean, std = self.head(self.encoder(x))
        z = _reparam_sample(mean, std, generator, use_mean)
        recon = self.decode(z)
        chain = LatentChain(
            post_mean=mean[:, None],
            post_std=std[:, None],
            sample=z[:, None],
            prior_mean=torch.zeros_like(mean)[:, None],
            prior_std=torch.ones_like(std)[:, None],
        )
        recon_ll = gaussian_image_log_likelihood(x, recon, self.config.pixel_std)
        kl = kl_chain(chain)
        return ModelOutput(
            reconstruction=recon,
            recon_ll=recon_ll,
            kl_mask=torch.zeros_like(kl),
            kl_component=kl,
            mask_chain=None,
            component_chain=chain,
        )

    def sample(self, batch: int, generator=None) -> torch.Tensor:
        """Decode z ~ N(0, I); deterministic for a fixed generator."""
        with torch.no_grad():
            p = next(self.parameters())
            z = torch.empty(
                batch, self.vae_config.latent_dim, dtype=p.dtype, device=p.device
            ).normal_(generator=generator)
            return self.decode(z)

    def decompose(self, x: torch.Tensor, generator=None, use_mean: bool = False) -> ModelOutput:
        with torch.no_grad():
            return self.forward(x, generator=generator, use_mean=use_mean)
