"""Object-centric scene models.

The full model infers an autoregressive chain of mask latents that carve the
image into per-pixel mixing probabilities via a stick-breaking process, then
infers one appearance latent per component; the image likelihood is a spatial
Gaussian mixture over the decoded components. A simplified single-chain
variant drives both the mixing probabilities and the appearances from one
latent per step, through two separate decoders.

Novel scenes are generated ancestrally: mask latents roll out from a learned
recurrent prior, appearance latents follow from their per-step conditional.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import (
    BroadcastDecoder,
    GatedConvDecoder,
    GatedConvEncoder,
    GaussianHead,
    GaussianHeadMLP,
    RecurrentCell,
)

LOG_CLAMP = -1e10

VARIANTS = ("genesis", "genesis_s", "bd_vae", "dc_vae")


@dataclass
class ModelConfig:
    variant: str = "genesis"
    num_components: int = 5  # max scene components (5 / 7 / 9 depending on dataset)
    mask_latent_dim: int = 64
    component_latent_dim: int = 64
    pixel_std: float = 0.7  # shared std of the Gaussian image likelihood
    image_size: int = 64
    feature_dim: int = 256
    enc_filters: tuple[int, ...] = (32, 32, 64, 64, 64)
    dec_filters: tuple[int, ...] = (64, 32, 32, 32, 32)
    broadcast_filters: int = 64
    broadcast_layers: int = 4
    prior_hidden: int = 256
    mlp_hidden: int = 256
    component_encoder_input: str = "log_mask"  # "log_mask" | "mask"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.variant in ("genesis", "genesis_s") and self.num_components < 2:
            raise ValueError("num_components must be >= 2")
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")
        if self.component_encoder_input not in ("log_mask", "mask"):
            raise ValueError("component_encoder_input must be 'log_mask' or 'mask'")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_filters"] = list(self.enc_filters)
        d["dec_filters"] = list(self.dec_filters)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        for key in ("enc_filters", "dec_filters"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class LatentChain:
    """One chain of diagonal-Gaussian latents, with the conditional prior
    parameters evaluated along the same sampled chain (teacher forcing).

    For prior rollouts the sampling distribution *is* the prior, so the
    posterior fields duplicate the prior fields there.
    """

    post_mean: torch.Tensor  # (B, K, D)
    post_std: torch.Tensor  # (B, K, D)
    sample: torch.Tensor  # (B, K, D)
    prior_mean: torch.Tensor  # (B, K, D)
    prior_std: torch.Tensor  # (B, K, D)

    @property
    def length(self) -> int:
        return self.post_mean.shape[1]


@dataclass
class ModelOutput:
    """Everything one posterior (or prior) pass produces."""

    reconstruction: torch.Tensor  # (B, 3, H, W) expected image under the mixing
    recon_ll: torch.Tensor  # (B,) image log-likelihood
    kl_mask: torch.Tensor  # (B,)
    kl_component: torch.Tensor  # (B,)
    log_mixing: torch.Tensor | None = None  # (B, K, 1, H, W)
    components: torch.Tensor | None = None  # (B, K, 3, H, W)
    mask_chain: LatentChain | None = None
    component_chain: LatentChain | None = None

    @property
    def mixing(self) -> torch.Tensor:
        return self.log_mixing.exp()


def stick_breaking(mask_logits: torch.Tensor) -> torch.Tensor:
    """Turn K-1 logit maps into K log mixing probabilities.

    The first component takes sigmoid(l_1) of the stick, each later one takes
    sigmoid(l_k) of what is left, and the last component absorbs the
    remainder. Everything stays in log space, clamped at LOG_CLAMP, so the
    probabilities sum to one and every scope is non-negative for arbitrary
    logits.

    mask_logits: (B, K-1, 1, H, W) -> log mixing: (B, K, 1, H, W)
    """
    if mask_logits.dim() != 5:
        raise ValueError(f"expected (B, K-1, 1, H, W) logits, got {tuple(mask_logits.shape)}")
    log_take = F.logsigmoid(mask_logits)  # log sigmoid(l_k)
    log_keep = F.logsigmoid(-mask_logits)  # log (1 - sigmoid(l_k))
    log_pi = []
    log_scope = torch.zeros_like(mask_logits[:, 0])
    for k in range(mask_logits.shape[1]):
        log_pi.append(log_scope + log_take[:, k])
        log_scope = log_scope + log_keep[:, k]
    log_pi.append(log_scope)
    return torch.stack(log_pi, dim=1).clamp(min=LOG_CLAMP)


def mixture_log_likelihood(
    x: torch.Tensor,
    log_mixing: torch.Tensor,
    components: torch.Tensor,
    pixel_std: float,
) -> torch.Tensor:
    """Per-image log-likelihood of the spatial Gaussian mixture.

    Each pixel-channel is a K-way mixture of Gaussians with shared std,
    weighted by that pixel's mixing probabilities; evaluated with
    log-sum-exp and summed over pixels and channels.

    x: (B, 3, H, W); log_mixing: (B, K, 1, H, W); components: (B, K, 3, H, W)
    -> (B,)
    """
    log_norm = -0.5 * math.log(2.0 * math.pi) - math.log(pixel_std)
    sq = ((x[:, None] - components) / pixel_std) ** 2  # (B, K, 3, H, W)
    log_pdf = log_norm - 0.5 * sq
    per_pixel = torch.logsumexp(log_mixing + log_pdf, dim=1)  # (B, 3, H, W)
    return per_pixel.flatten(start_dim=1).sum(dim=-1)


def hard_segmentation(log_mixing: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over components: (B, K, 1, H, W) -> (B, H, W) int64."""
    return log_mixing.squeeze(2).argmax(dim=1)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise RuntimeError(f"non-finite posterior parameters at {what}")


def _reparam_sample(mean, std, generator=None, use_mean: bool = False):
    if use_mean:
        return mean
    eps = torch.empty_like(mean).normal_(generator=generator)
    return mean + std * eps


class _SceneModel(nn.Module):
    """Shared machinery for the two chain-structured variants."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config

    # -- pieces both variants share ------------------------------------

    def _decode_mask_logits(self, chain_samples: torch.Tensor) -> torch.Tensor:
        """Decode latents 1..K-1 to one logit map each; the K-th component is
        the stick remainder and needs no map."""
        b, k, d = chain_samples.shape
        flat = chain_samples[:, : k - 1].reshape(b * (k - 1), d)
        logits = self.mask_decoder(flat)  # (B*(K-1), 1, H, W)
        return logits.view(b, k - 1, 1, *logits.shape[-2:])

    def _run_posterior_chain(
        self, features: torch.Tensor, steps: int, generator=None, use_mean=False, name="mask chain"
    ):
        """Autoregressive posterior: feed (image features, previous sample)
        through the recurrent cell, then the Gaussian head."""
        b = features.shape[0]
        z_prev = features.new_zeros(b, self.chain_latent_dim)
        state = None
        means, stds, samples = [], [], []
        for k in range(steps):
            h, state = self.posterior_cell(torch.cat((features, z_prev), dim=-1), state)
            mean, std = self.posterior_head(h)
            _check_finite(mean, f"{name} step {k + 1}")
            _check_finite(std, f"{name} step {k + 1}")
            z_prev = _reparam_sample(mean, std, generator, use_mean)
            means.append(mean)
            stds.append(std)
            samples.append(z_prev)
        return torch.stack(means, 1), torch.stack(stds, 1), torch.stack(samples, 1)

    def _chain_prior_params(self, chain_samples: torch.Tensor):
        """Conditional prior parameters along a given chain: the head applied
        to the learned initial state gives step 1, each later step conditions
        on the provided samples through the prior cell."""
        b, k, _ = chain_samples.shape
        state = self.prior_cell.initial_state(b)
        means, stds = [], []
        for step in range(k):
            mean, std = self.prior_head(state[0])
            means.append(mean)
            stds.append(std)
            if step + 1 < k:
                _, state = self.prior_cell(chain_samples[:, step], state)
        return torch.stack(means, 1), torch.stack(stds, 1)

    def _rollout_chain(self, batch: int, steps: int, generator=None) -> LatentChain:
        """Ancestral sampling from the autoregressive prior."""
        state = self.prior_cell.initial_state(batch)
        means, stds, samples = [], [], []
        for step in range(steps):
            mean, std = self.prior_head(state[0])
            z = _reparam_sample(mean, std, generator)
            means.append(mean)
            stds.append(std)
            samples.append(z)
            if step + 1 < steps:
                _, state = self.prior_cell(z, state)
        mean = torch.stack(means, 1)
        std = torch.stack(stds, 1)
        sample = torch.stack(samples, 1)
        return LatentChain(mean, std, sample, mean, std)

    def infer_mask_chain(
        self, x: torch.Tensor, steps: int | None = None, generator=None, use_mean=False
    ) -> LatentChain:
        """Posterior chain over mask latents (prior params teacher-forced)."""
        steps = steps if steps is not None else self.config.num_components
        features = self.image_encoder(x)
        mean, std, sample = self._run_posterior_chain(features, steps, generator, use_mean)
        p_mean, p_std = self._chain_prior_params(sample)
        return LatentChain(mean, std, sample, p_mean, p_std)

    # -- generation -----------------------------------------------------

    def generate(self, batch: int, generator=None):
        """Sample novel scenes component by component from the prior.

        Returns (composite image, log mixing, components, chains dict).
        """
        with torch.no_grad():
            chains = self.prior_rollout(batch, generator)
            log_mixing, components = self._decode_scene(chains)
            composite = (log_mixing.exp() * components).sum(dim=1)
        return composite, log_mixing, components, chains

    def decompose(self, x: torch.Tensor, generator=None, use_mean: bool = False) -> ModelOutput:
        """Full posterior pass without gradients (slots in inference order);
        use_mean replaces every latent sample with its posterior mean."""
        with torch.no_grad():
            return self.forward(x, generator=generator, use_mean=use_mean)


class Genesis(_SceneModel):
    """Two-chain model: mask latents define where components live, appearance
    latents (conditioned per step on their mask latent) define what they look
    like."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        c = config
        self.chain_latent_dim = c.mask_latent_dim
        self.image_encoder = GatedConvEncoder(
            3, c.feature_dim, c.image_size, c.enc_filters
        )
        self.posterior_cell = RecurrentCell(
            c.feature_dim + c.mask_latent_dim, 2 * c.mask_latent_dim
        )
        self.posterior_head = GaussianHead(2 * c.mask_latent_dim, c.mask_latent_dim)
        self.mask_decoder = GatedConvDecoder(c.mask_latent_dim, 1, c.image_size, c.dec_filters)
        self.component_encoder = GatedConvEncoder(4, c.feature_dim, c.image_size, c.enc_filters)
        self.component_head = GaussianHead(c.feature_dim, c.component_latent_dim)
        self.component_decoder = BroadcastDecoder(
            c.component_latent_dim, 3, c.image_size, c.broadcast_filters, c.broadcast_layers
        )
        self.prior_cell = RecurrentCell(c.mask_latent_dim, c.prior_hidden, learned_init=True)
        self.prior_head = GaussianHead(c.prior_hidden, c.mask_latent_dim)
        self.component_prior_head = GaussianHeadMLP(
            c.mask_latent_dim, c.component_latent_dim, c.mlp_hidden
        )

    def infer_component_chain(
        self, x: torch.Tensor, log_mixing: torch.Tensor, generator=None, use_mean=False
    ):
        """Appearance posterior per slot: encode the image concatenated with
        that slot's (log) mixing map; all K slots batch through the encoder."""
        b, k = log_mixing.shape[:2]
        mask_in = log_mixing if self.config.component_encoder_input == "log_mask" else log_mixing.exp()
        x_rep = x[:, None].expand(b, k, *x.shape[1:])
        enc_in = torch.cat((x_rep, mask_in), dim=2).reshape(b * k, 4, *x.shape[-2:])
        mean, std = self.component_head(self.component_encoder(enc_in))
        mean = mean.view(b, k, -1)
        std = std.view(b, k, -1)
        _check_finite(mean, "component chain")
        _check_finite(std, "component chain")
        sample = _reparam_sample(mean, std, generator, use_mean)
        return mean, std, sample

    def decode_components(self, component_samples: torch.Tensor) -> torch.Tensor:
        """(B, K, D) appearance latents -> (B, K, 3, H, W) means in [0, 1]."""
        b, k, d = component_samples.shape
        out = self.component_decoder(component_samples.reshape(b * k, d))
        return out.view(b, k, 3, *out.shape[-2:])

    def _component_prior_params(self, mask_samples: torch.Tensor):
        b, k, d = mask_samples.shape
        mean, std = self.component_prior_head(mask_samples.reshape(b * k, d))
        return mean.view(b, k, -1), std.view(b, k, -1)

    def forward(self, x: torch.Tensor, generator=None, use_mean: bool = False) -> ModelOutput:
        from .objective import kl_chain

        mask_chain = self.infer_mask_chain(x, generator=generator, use_mean=use_mean)
        logits = self._decode_mask_logits(mask_chain.sample)
        log_mixing = stick_breaking(logits)
        c_mean, c_std, c_sample = self.infer_component_chain(x, log_mixing, generator, use_mean)
        cp_mean, cp_std = self._component_prior_params(mask_chain.sample)
        component_chain = LatentChain(c_mean, c_std, c_sample, cp_mean, cp_std)
        components = self.decode_components(c_sample)
        recon = (log_mixing.exp() * components).sum(dim=1)
        recon_ll = mixture_log_likelihood(x, log_mixing, components, self.config.pixel_std)
        return ModelOutput(
            reconstruction=recon,
            recon_ll=recon_ll,
            kl_mask=kl_chain(mask_chain),
            kl_component=kl_chain(component_chain),
            log_mixing=log_mixing,
            components=components,
            mask_chain=mask_chain,
            component_chain=component_chain,
        )

    def prior_rollout(self, batch: int, generator=None) -> dict[str, LatentChain]:
        """Ancestral samples: mask chain from the recurrent prior, then one
        appearance latent per step from its conditional."""
        mask_chain = self._rollout_chain(batch, self.config.num_components, generator)
        cp_mean, cp_std = self._component_prior_params(mask_chain.sample)
        c_sample = _reparam_sample(cp_mean, cp_std, generator)
        component_chain = LatentChain(cp_mean, cp_std, c_sample, cp_mean, cp_std)
        return {"mask": mask_chain, "component": component_chain}

    def _decode_scene(self, chains: dict[str, LatentChain]):
        logits = self._decode_mask_logits(chains["mask"].sample)
        log_mixing = stick_breaking(logits)
        components = self.decode_components(chains["component"].sample)
        return log_mixing, components


class GenesisS(_SceneModel):
    """Single-chain variant: each step's latent feeds two separate decoders,
    one for its mask logits and one for its appearance."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        c = config
        self.chain_latent_dim = c.mask_latent_dim
        self.image_encoder = GatedConvEncoder(3, c.feature_dim, c.image_size, c.enc_filters)
        self.posterior_cell = RecurrentCell(
            c.feature_dim + c.mask_latent_dim, 2 * c.mask_latent_dim
        )
        self.posterior_head = GaussianHead(2 * c.mask_latent_dim, c.mask_latent_dim)
        self.mask_decoder = GatedConvDecoder(c.mask_latent_dim, 1, c.image_size, c.dec_filters)
        self.appearance_decoder = BroadcastDecoder(
            c.mask_latent_dim, 3, c.image_size, c.broadcast_filters, c.broadcast_layers
        )
        self.prior_cell = RecurrentCell(c.mask_latent_dim, c.prior_hidden, learned_init=True)
        self.prior_head = GaussianHead(c.prior_hidden, c.mask_latent_dim)

    def decode_components(self, samples: torch.Tensor) -> torch.Tensor:
        b, k, d = samples.shape
        out = self.appearance_decoder(samples.reshape(b * k, d))
        return out.view(b, k, 3, *out.shape[-2:])

    def forward(self, x: torch.Tensor, generator=None, use_mean: bool = False) -> ModelOutput:
        from .objective import kl_chain

        chain = self.infer_mask_chain(x, generator=generator, use_mean=use_mean)
        logits = self._decode_mask_logits(chain.sample)
        log_mixing = stick_breaking(logits)
        components = self.decode_components(chain.sample)
        recon = (log_mixing.exp() * components).sum(dim=1)
        recon_ll = mixture_log_likelihood(x, log_mixing, components, self.config.pixel_std)
        zero = torch.zeros_like(recon_ll)
        return ModelOutput(
            reconstruction=recon,
            recon_ll=recon_ll,
            kl_mask=kl_chain(chain),
            kl_component=zero,
            log_mixing=log_mixing,
            components=components,
            mask_chain=chain,
            component_chain=None,
        )

    def prior_rollout(self, batch: int, generator=None) -> dict[str, LatentChain]:
        return {"mask": self._rollout_chain(batch, self.config.num_components, generator)}

    def _decode_scene(self, chains: dict[str, LatentChain]):
        logits = self._decode_mask_logits(chains["mask"].sample)
        log_mixing = stick_breaking(logits)
        components = self.decode_components(chains["mask"].sample)
        return log_mixing, components


def build_model(config: ModelConfig) -> nn.Module:
    """Instantiate any variant (scene models here, single-latent baselines in
    the baselines module) from one config."""
    config.validate()
    if config.variant == "genesis":
        return Genesis(config)
    if config.variant == "genesis_s":
        return GenesisS(config)
    from .baselines import VaeBaseline

    return VaeBaseline(config)
