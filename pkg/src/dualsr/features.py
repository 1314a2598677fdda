"""Pluggable multi-layer feature extractors for perceptual comparisons.

The default "random_pyramid" extractor is a frozen, fixed-seed conv stack —
a self-contained substitute for pretrained backbones that keeps the
perceptual loss and the LPIPS-style metric structurally intact and fully
reproducible. A pretrained extractor can be registered at runtime.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import Tensor, nn

__all__ = [
    "register_extractor",
    "get_extractor",
    "available_extractors",
    "IdentityExtractor",
    "RandomPyramid",
    "channel_unit_normalize",
    "lpips_terms",
    "feature_l1_terms",
]

_REGISTRY: dict[str, Callable[[], nn.Module]] = {}


def register_extractor(name: str, factory: Callable[[], nn.Module]) -> None:
    _REGISTRY[name] = factory


def available_extractors() -> list[str]:
    return sorted(_REGISTRY)


def get_extractor(name: str) -> nn.Module:
    if name not in _REGISTRY:
        raise KeyError(
            f"no feature extractor registered under {name!r}; available: {available_extractors()}"
        )
    return _REGISTRY[name]()


class IdentityExtractor(nn.Module):
    """Single layer whose features are the pixels themselves (testing oracle)."""

    def forward(self, x: Tensor) -> list[Tensor]:
        return [x]


class RandomPyramid(nn.Module):
    """Frozen 3-stage stride-2 conv pyramid (16/32/64 channels) with fixed-seed weights."""

    def __init__(self, seed: int = 1234, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (c_in * 9) ** -0.5)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.act = nn.GELU()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv in self.convs:
            x = self.act(conv(x))
            feats.append(x)
        return feats


register_extractor("identity", IdentityExtractor)
register_extractor("random_pyramid", RandomPyramid)


def channel_unit_normalize(feat: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each spatial position's channel vector to unit L2 norm."""
    return feat / torch.sqrt((feat * feat).sum(dim=1, keepdim=True) + eps)


def _resolve_weights(n_layers: int, weights) -> list[float]:
    if weights is None:
        return [1.0 / n_layers] * n_layers
    if len(weights) != n_layers:
        raise ValueError(f"{len(weights)} layer weights for {n_layers} layers")
    return list(weights)


def lpips_terms(feats_a: list[Tensor], feats_b: list[Tensor], weights=None) -> Tensor:
    """Sum over layers of w_l * mean squared distance between unit-normalized features.

    The squared L2 runs across channels at each position; means run over
    batch and positions.
    """
    ws = _resolve_weights(len(feats_a), weights)
    total = feats_a[0].new_zeros(())
    for w, fa, fb in zip(ws, feats_a, feats_b):
        diff = channel_unit_normalize(fa) - channel_unit_normalize(fb)
        total = total + w * (diff * diff).sum(dim=1).mean()
    return total


def feature_l1_terms(feats_a: list[Tensor], feats_b: list[Tensor]) -> Tensor:
    """Sum over layers of the mean absolute feature difference."""
    total = feats_a[0].new_zeros(())
    for fa, fb in zip(feats_a, feats_b):
        total = total + (fa - fb).abs().mean()
    return total
