"""Spectrally-normalized convolutional patch discriminator.

Emits a raw logit map (B, 1, h', w'), never a scalar: realism is judged per
region. Power-iteration vectors are advanced explicitly via
`power_iterate`, normally once per discriminator training step.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .substrate import Conv2dLayer, ContractError, SNConv2d, check_tensor4

__all__ = ["DiscriminatorConfig", "Discriminator"]


@dataclass
class DiscriminatorConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.2
    spectral_norm: bool = True
    in_channels: int = 3


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()

        def make_conv(c_in, c_out, k, s, p):
            if config.spectral_norm:
                return SNConv2d(c_in, c_out, k, s, p)
            return Conv2dLayer(c_in, c_out, k, s, p)

        convs = []
        c_in = config.in_channels
        for c_out in config.channels:
            convs.append(make_conv(c_in, c_out, config.kernel, config.stride, config.padding))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.head = make_conv(c_in, 1, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(config.leaky_slope)

    def sn_layers(self) -> list[SNConv2d]:
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def power_iterate(self, n: int = 1) -> None:
        for layer in self.sn_layers():
            layer.power_iterate(n)

    def forward(self, x: Tensor) -> Tensor:
        check_tensor4(x, "discriminator input")
        if x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"discriminator expects {self.config.in_channels} channels, got {x.shape[1]}"
            )
        for conv in self.convs:
            x = self.lrelu(conv(x))
        return self.head(x)
