"""Generator and discriminator training objectives.

Every term is an independently testable pure function over tensors; all
L1/L2 reductions are means so the default weights are
resolution-independent. Adversarial terms use the softplus form of
binary cross-entropy, finite for logits far into saturation.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .features import feature_l1_terms, get_extractor, lpips_terms
from .substrate import ContractError

__all__ = [
    "LossWeights",
    "LossReport",
    "adv_loss_g",
    "pixel_loss",
    "lr_consistency_loss",
    "contrastive_loss",
    "perceptual_loss",
    "edge_loss",
    "sobel_magnitude",
    "latent_consistency_loss",
    "branch_consistency_loss",
    "generator_total",
    "discriminator_loss",
]


@dataclass
class LossWeights:
    lambda_adv: float = 0.005
    lambda_pixel: float = 1.0
    lambda_aux: float = 0.5
    lambda_lr: float = 0.5
    lambda_contrastive: float = 0.1
    lambda_perceptual: float = 1.0
    lambda_vgg: float = 0.1
    lambda_edge: float = 0.1
    lambda_latent: float = 0.01
    lambda_branch: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ContractError(f"{f.name} must be >= 0")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    """Per-term scalars plus the weighted total of the generator objective."""

    adv: float = 0.0
    pixel: float = 0.0
    lr_consistency: float = 0.0
    contrastive: float = 0.0
    perceptual: float = 0.0
    edge: float = 0.0
    latent_consistency: float = 0.0
    branch_consistency: float = 0.0
    total: float = 0.0

    TERM_NAMES = ("adv", "pixel", "lr_consistency", "contrastive", "perceptual",
                  "edge", "latent_consistency", "branch_consistency")

    def as_dict(self) -> dict:
        return asdict(self)


def adv_loss_g(logits_fake: Tensor) -> Tensor:
    """Mean of -log(sigmoid(logit)) over the fake logit map, softplus form."""
    return F.softplus(-logits_fake).mean()


def pixel_loss(sr_final: Tensor, sr_aux: Tensor, hr: Tensor, lambda_aux: float = 0.5) -> Tensor:
    return (sr_final - hr).abs().mean() + lambda_aux * (sr_aux - hr).abs().mean()


def lr_consistency_loss(sr_final: Tensor, lr_native: Tensor, factor: int = 4) -> Tensor:
    """L1 between the area-average x`factor` downsample of sr_final and the native LR."""
    down = F.avg_pool2d(sr_final, factor)
    if down.shape != lr_native.shape:
        raise ContractError(
            f"downsampled SR {tuple(down.shape)} does not match native LR {tuple(lr_native.shape)}"
        )
    return (down - lr_native).abs().mean()


def contrastive_loss(v_denoised: Tensor, v_hr: Tensor, eps: float = 1e-8) -> Tensor:
    """1 - cosine similarity, averaged over the batch; range [0, 2]."""
    dot = (v_denoised * v_hr).sum(dim=-1)
    denom = v_denoised.norm(dim=-1) * v_hr.norm(dim=-1) + eps
    return (1.0 - dot / denom).mean()


def perceptual_loss(sr_final: Tensor, hr: Tensor, extractor: nn.Module | str = "random_pyramid",
                    layer_weights=None, lambda_vgg: float = 0.1) -> Tensor:
    """LPIPS-style normalized-feature distance plus a weighted feature-L1 term."""
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    feats_sr = extractor(sr_final)
    feats_hr = extractor(hr)
    return (lpips_terms(feats_sr, feats_hr, layer_weights)
            + lambda_vgg * feature_l1_terms(feats_sr, feats_hr))


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_magnitude(img: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-channel Sobel gradient magnitude with reflect padding."""
    c = img.shape[1]
    kx = _SOBEL_X.to(img.dtype).expand(c, 1, 3, 3).contiguous()
    ky = kx.transpose(-2, -1).contiguous()
    padded = F.pad(img, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    return torch.sqrt(gx * gx + gy * gy + eps)


def edge_loss(sr_final: Tensor, hr: Tensor) -> Tensor:
    """L1 between Sobel gradient magnitudes; blind to DC offsets by construction."""
    return (sobel_magnitude(sr_final) - sobel_magnitude(hr)).abs().mean()


def latent_consistency_loss(v_denoised: Tensor, v_noise: Tensor,
                            z_denoised: Tensor, z_noise: Tensor) -> Tensor:
    """Mean-squared projection gap plus mean-squared latent gap between branches."""
    return ((v_denoised - v_noise) ** 2).mean() + ((z_denoised - z_noise) ** 2).mean()


def branch_consistency_loss(sr_final: Tensor, sr_aux: Tensor) -> Tensor:
    return ((sr_final - sr_aux) ** 2).mean()


def generator_total(adv: Tensor, pixel: Tensor, lr_consistency: Tensor, contrastive: Tensor,
                    perceptual: Tensor, edge: Tensor, latent_consistency: Tensor,
                    branch_consistency: Tensor, weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum of the eight terms; returns (total tensor, float report)."""
    total = (weights.lambda_adv * adv
             + weights.lambda_pixel * pixel
             + weights.lambda_lr * lr_consistency
             + weights.lambda_contrastive * contrastive
             + weights.lambda_perceptual * perceptual
             + weights.lambda_edge * edge
             + weights.lambda_latent * latent_consistency
             + weights.lambda_branch * branch_consistency)
    report = LossReport(
        adv=float(adv), pixel=float(pixel), lr_consistency=float(lr_consistency),
        contrastive=float(contrastive), perceptual=float(perceptual), edge=float(edge),
        latent_consistency=float(latent_consistency),
        branch_consistency=float(branch_consistency), total=float(total),
    )
    return total, report


def discriminator_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    """Half the sum of BCE(real, 1) and BCE(fake, 0), softplus form.

    The training step guarantees fake logits are detached from the
    generator; this function itself is pure.
    """
    return 0.5 * (F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean())
