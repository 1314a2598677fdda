"""Dual-branch super-resolution generator.

Pipeline: hierarchical encoder (x8 spatial reduction, 256 channels) -> two
transformer branches (a deeper deterministic one and a shallower
noise-injected one) -> 1x1 fusion -> two RRDB decoders -> contrastive
projection heads. A forward pass returns the six-tuple
(sr_final, sr_aux, v_denoised, v_noise, z_denoised, z_noise).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn

from .substrate import Conv2dLayer, ContractError, TransformerBlock, check_tensor4, time_embedding

__all__ = [
    "GeneratorConfig",
    "GeneratorOutput",
    "ResidualBlock",
    "Encoder",
    "TransformerBranch",
    "ResidualDenseBlock",
    "RRDB",
    "Decoder",
    "ProjectionHead",
    "Generator",
]


@dataclass
class GeneratorConfig:
    image_size: int = 128
    latent_channels: int = 256
    encoder_channels: tuple[int, int, int] = (64, 128, 256)
    main_tx_layers: int = 4
    main_tx_heads: int = 8
    noise_tx_layers: int = 2
    noise_tx_heads: int = 4
    rrdb_main_per_stage: int = 8
    rrdb_aux_per_stage: int = 4
    rrdb_growth: int = 32
    proj_dim: int = 128
    sigma: float = 0.1
    residual_scale: float = 0.2
    plain_decoder: bool = False

    def __post_init__(self):
        if self.image_size % 8 != 0:
            raise ContractError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.encoder_channels[-1] != self.latent_channels:
            raise ContractError(
                f"encoder_channels must end at latent_channels "
                f"({self.encoder_channels} vs {self.latent_channels})"
            )
        if self.latent_channels % self.main_tx_heads or self.latent_channels % self.noise_tx_heads:
            raise ContractError("latent_channels must be divisible by both head counts")
        if self.sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    @classmethod
    def tiny(cls, image_size: int = 32, **overrides) -> "GeneratorConfig":
        """Desk-scale config: latent 64, 1 transformer layer per branch, 2 RRDB per stage."""
        base = dict(
            image_size=image_size,
            latent_channels=64,
            encoder_channels=(16, 32, 64),
            main_tx_layers=1,
            main_tx_heads=4,
            noise_tx_layers=1,
            noise_tx_heads=4,
            rrdb_main_per_stage=2,
            rrdb_aux_per_stage=1,
            rrdb_growth=16,
            proj_dim=32,
        )
        base.update(overrides)
        return cls(**base)


class GeneratorOutput(NamedTuple):
    sr_final: Tensor
    sr_aux: Tensor
    v_denoised: Tensor
    v_noise: Tensor
    z_denoised: Tensor
    z_noise: Tensor


def _scale_last_conv(conv: Conv2dLayer, factor: float = 0.1) -> None:
    # Residual-path final convs start small to keep deep stacks stable.
    with torch.no_grad():
        conv.weight.mul_(factor)
        if conv.bias is not None:
            conv.bias.zero_()


class ResidualBlock(nn.Module):
    """x + scale * Conv(ReLU(Conv(x))) with channel-preserving 3x3 convs."""

    def __init__(self, channels: int, scale: float = 0.2):
        super().__init__()
        self.scale = scale
        self.conv1 = Conv2dLayer(channels, channels, 3, 1, 1)
        self.conv2 = Conv2dLayer(channels, channels, 3, 1, 1)
        _scale_last_conv(self.conv2)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.scale * self.conv2(torch.relu(self.conv1(x)))


class Encoder(nn.Module):
    """Three (conv k4 s2 p1 + ReLU + residual block) stages, 3 -> 64 -> 128 -> 256."""

    def __init__(self, channels: tuple[int, int, int], residual_scale: float = 0.2):
        super().__init__()
        stages = []
        c_in = 3
        for c_out in channels:
            stages.append(nn.ModuleDict({
                "conv": Conv2dLayer(c_in, c_out, 4, 2, 1),
                "rb": ResidualBlock(c_out, residual_scale),
            }))
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor) -> Tensor:
        check_tensor4(x, "encoder input")
        if x.shape[1] != 3:
            raise ContractError(f"encoder expects 3 channels, got {x.shape[1]}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ContractError(f"spatial dims must be divisible by 8, got {tuple(x.shape[2:])}")
        for stage in self.stages:
            x = stage["rb"](torch.relu(stage["conv"](x)))
        return x


class TransformerBranch(nn.Module):
    """Latent refinement branch: conditioning add, tokens + learned positions,
    transformer blocks, then a conv decoder with a residual skip of the
    conditioned input. Preserves the latent shape.
    """

    def __init__(self, channels: int, grid: int, layers: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.channels = channels
        self.grid = grid
        self.embed = Conv2dLayer(channels, channels, 3, 1, 1)
        self.pos_table = nn.Parameter(0.02 * torch.randn(1, grid * grid, channels))
        self.blocks = nn.ModuleList(TransformerBlock(channels, heads, mlp_ratio) for _ in range(layers))
        self.dec_conv1 = Conv2dLayer(2 * channels, channels, 3, 1, 1)
        self.dec_conv2 = Conv2dLayer(channels, channels, 3, 1, 1)
        _scale_last_conv(self.dec_conv2)

    def forward(self, z: Tensor, e_t: Tensor) -> Tensor:
        check_tensor4(z, "branch input")
        if z.shape[1] != self.channels:
            raise ContractError(f"branch expects {self.channels} channels, got {z.shape[1]}")
        if e_t.shape[-1] != self.channels:
            raise ContractError(
                f"conditioning dim {e_t.shape[-1]} != latent channels {self.channels}"
            )
        b, c, h, w = z.shape
        if h * w != self.pos_table.shape[1]:
            raise ContractError(
                f"branch built for a {self.grid}x{self.grid} token grid, got {h}x{w}"
            )
        z_cond = z + e_t.reshape(1, c, 1, 1)
        tokens = self.embed(z_cond).flatten(2).transpose(1, 2) + self.pos_table
        for blk in self.blocks:
            tokens = blk(tokens)
        m = tokens.transpose(1, 2).reshape(b, c, h, w)
        refined = self.dec_conv2(torch.relu(self.dec_conv1(torch.cat([m, z_cond], dim=1))))
        return z_cond + refined


class ResidualDenseBlock(nn.Module):
    """Five densely connected 3x3 convs at `growth` channels, scaled residual."""

    def __init__(self, channels: int, growth: int, scale: float = 0.2):
        super().__init__()
        self.scale = scale
        self.convs = nn.ModuleList(
            Conv2dLayer(channels + i * growth, growth, 3, 1, 1) for i in range(4)
        )
        self.conv_out = Conv2dLayer(channels + 4 * growth, channels, 3, 1, 1)
        _scale_last_conv(self.conv_out)
        self.lrelu = nn.LeakyReLU(0.2)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(self.lrelu(conv(torch.cat(feats, dim=1))))
        return x + self.scale * self.conv_out(torch.cat(feats, dim=1))


class RRDB(nn.Module):
    """Residual-in-residual dense block: three dense sub-blocks, outer scaled residual.

    The outer residual adds the chain's net delta, so the block is exactly
    the identity when all weights are zero.
    """

    def __init__(self, channels: int, growth: int, scale: float = 0.2):
        super().__init__()
        self.scale = scale
        self.rdb1 = ResidualDenseBlock(channels, growth, scale)
        self.rdb2 = ResidualDenseBlock(channels, growth, scale)
        self.rdb3 = ResidualDenseBlock(channels, growth, scale)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.scale * (self.rdb3(self.rdb2(self.rdb1(x))) - x)


class Decoder(nn.Module):
    """Three x2 upsampling stages to an RGB image in [-1, 1].

    Each stage: `rrdb_per_stage` RRDB blocks, nearest-neighbor upsample, 3x3
    conv, LeakyReLU; channels taper latent -> latent/2 -> latent/4 (floor 8).
    `plain=True` drops every RRDB for a purely convolutional upsampling path.
    """

    def __init__(self, latent_channels: int, rrdb_per_stage: int, growth: int,
                 plain: bool = False, residual_scale: float = 0.2):
        super().__init__()
        c0 = latent_channels
        c1 = max(c0 // 2, 8)
        c2 = max(c0 // 4, 8)
        plan = [(c0, c1), (c1, c2), (c2, c2)]
        self.stages = nn.ModuleList()
        for c_in, c_out in plan:
            blocks = [] if plain else [
                RRDB(c_in, growth, residual_scale) for _ in range(rrdb_per_stage)
            ]
            self.stages.append(nn.ModuleDict({
                "rrdbs": nn.Sequential(*blocks),
                "up_conv": Conv2dLayer(c_in, c_out, 3, 1, 1),
            }))
        self.final_conv = Conv2dLayer(plan[-1][1], 3, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2)

    def forward(self, z: Tensor) -> Tensor:
        x = z
        for stage in self.stages:
            x = stage["rrdbs"](x)
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = self.lrelu(stage["up_conv"](x))
        return torch.tanh(self.final_conv(x))


class ProjectionHead(nn.Module):
    """Global average pool -> linear -> ReLU -> linear, to a compact vector."""

    def __init__(self, channels: int, proj_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, proj_dim)

    def forward(self, z: Tensor) -> Tensor:
        pooled = z.mean(dim=(2, 3))
        return self.fc2(torch.relu(self.fc1(pooled)))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        c = config.latent_channels
        self.encoder = Encoder(config.encoder_channels, config.residual_scale)
        self.main_branch = TransformerBranch(c, config.latent_size,
                                             config.main_tx_layers, config.main_tx_heads)
        self.noise_branch = TransformerBranch(c, config.latent_size,
                                              config.noise_tx_layers, config.noise_tx_heads)
        self.main_time_proj = nn.Linear(c, c)
        self.noise_time_proj = nn.Linear(c, c)
        self.fuse_conv = Conv2dLayer(2 * c, c, 1, 1, 0)
        self.decoder_main = Decoder(c, config.rrdb_main_per_stage, config.rrdb_growth,
                                    config.plain_decoder, config.residual_scale)
        self.decoder_aux = Decoder(c, config.rrdb_aux_per_stage, config.rrdb_growth,
                                   config.plain_decoder, config.residual_scale)
        self.proj_main = ProjectionHead(c, config.proj_dim)
        self.proj_noise = ProjectionHead(c, config.proj_dim)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def time_embeddings(self, t: float) -> tuple[Tensor, Tensor]:
        """Raw sinusoidal embedding projected separately for each branch."""
        p = self.main_time_proj.weight
        emb = time_embedding(t, self.config.latent_channels, dtype=p.dtype).to(p.device)
        return self.main_time_proj(emb), self.noise_time_proj(emb)

    def inject_noise(self, z: Tensor, sigma: float, rng: torch.Generator | None = None) -> Tensor:
        if sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {sigma}")
        if sigma == 0:
            return z
        noise = torch.randn(z.shape, generator=rng, dtype=z.dtype, device=z.device)
        return z + sigma * noise

    def fuse(self, z_denoised: Tensor, z_noise: Tensor) -> Tensor:
        if z_denoised.shape != z_noise.shape:
            raise ContractError(
                f"fusion inputs must match: {tuple(z_denoised.shape)} vs {tuple(z_noise.shape)}"
            )
        return self.fuse_conv(torch.cat([z_denoised, z_noise], dim=1))

    def forward(self, x_lr: Tensor, t: float = 0.0, sigma: float | None = None,
                rng: torch.Generator | None = None) -> GeneratorOutput:
        sigma = self.config.sigma if sigma is None else sigma
        z = self.encode(x_lr)
        e_main, e_noise = self.time_embeddings(t)
        z_denoised = self.main_branch(z, e_main)
        z_noisy = self.inject_noise(z, sigma, rng)
        z_noise = self.noise_branch(z_noisy, e_noise)
        z_fused = self.fuse(z_denoised, z_noise)
        return GeneratorOutput(
            sr_final=self.decoder_main(z_fused),
            sr_aux=self.decoder_aux(z_noise),
            v_denoised=self.proj_main(z_denoised),
            v_noise=self.proj_noise(z_noise),
            z_denoised=z_denoised,
            z_noise=z_noise,
        )

    def target_projection(self, hr: Tensor, t: float = 0.0) -> Tensor:
        """Contrastive target: HR through encode -> main branch -> projection, detached."""
        with torch.no_grad():
            e_main, _ = self.time_embeddings(t)
            return self.proj_main(self.main_branch(self.encode(hr), e_main))
