"""Quantitative evaluation: MSE, PSNR, SSIM, LPIPS-style distance, timing.

MSE/PSNR/SSIM are computed on denormalized [0, 1] images (`denormalize`
maps the model's [-1, 1] space back via (x + 1) / 2); the LPIPS-style
distance runs on the [-1, 1] space its extractors expect. PSNR of
identical images is reported as +inf, never an exception.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .features import get_extractor, lpips_terms
from .substrate import ContractError

__all__ = [
    "SsimConstants",
    "MetricReport",
    "denormalize",
    "normalize",
    "mse",
    "psnr",
    "ssim",
    "ssim_global",
    "lpips_distance",
    "rgb_to_luma",
    "timed_batch",
    "write_metrics_csv",
    "METRICS_CSV_COLUMNS",
]


@dataclass(frozen=True)
class SsimConstants:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window_size: int = 11
    window_sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    lpips: float
    mse: float
    batch_time_s: float = 0.0

    def as_dict(self) -> dict:
        return {"psnr": self.psnr_db, "ssim": self.ssim, "lpips": self.lpips,
                "mse": self.mse, "time_s": self.batch_time_s}


def denormalize(x: Tensor) -> Tensor:
    """Model space [-1, 1] -> display space [0, 1]."""
    return (x + 1.0) / 2.0


def normalize(x: Tensor) -> Tensor:
    """Display space [0, 1] -> model space [-1, 1]: (x - 0.5) / 0.5."""
    return (x - 0.5) / 0.5


def mse(a: Tensor, b: Tensor) -> float:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(((a - b) ** 2).mean())


def psnr(a: Tensor, b: Tensor, max_val: float = 1.0) -> float:
    """10 log10(max_val^2 / MSE); +inf when the images are identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / err)


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def _ssim_from_moments(mu_a, mu_b, var_a, var_b, cov, constants: SsimConstants):
    c1, c2 = constants.c1, constants.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim(a: Tensor, b: Tensor, constants: SsimConstants | None = None) -> float:
    """Windowed SSIM: Gaussian-weighted local moments, mean over map and channels.

    Uses an 11x11 sigma-1.5 window and population (Gaussian-weighted)
    statistics over the valid interior.
    """
    constants = constants or SsimConstants()
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    win = constants.window_size
    if min(a.shape[-2:]) < win:
        raise ContractError(
            f"windowed SSIM needs images of at least {win}x{win}, got {tuple(a.shape[-2:])}"
        )
    c = a.shape[1]
    kernel = _gaussian_window(win, constants.window_sigma, a.dtype)
    kernel = kernel.expand(c, 1, win, win).contiguous()

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    return float(_ssim_from_moments(mu_a, mu_b, var_a, var_b, cov, constants).mean())


def ssim_global(a: Tensor, b: Tensor, constants: SsimConstants | None = None) -> float:
    """Single-window SSIM over the whole image: the literal global-statistics formula."""
    constants = constants or SsimConstants()
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    af, bf = a.double().reshape(-1), b.double().reshape(-1)
    mu_a, mu_b = af.mean(), bf.mean()
    var_a = ((af - mu_a) ** 2).mean()
    var_b = ((bf - mu_b) ** 2).mean()
    cov = ((af - mu_a) * (bf - mu_b)).mean()
    return float(_ssim_from_moments(mu_a, mu_b, var_a, var_b, cov, constants))


def lpips_distance(a: Tensor, b: Tensor, extractor: nn.Module | str = "random_pyramid",
                   weights=None) -> float:
    """Layer-weighted squared distance between unit-normalized deep features."""
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    with torch.no_grad():
        return float(lpips_terms(extractor(a), extractor(b), weights))


def rgb_to_luma(img: Tensor) -> Tensor:
    """BT.601 luma from an RGB image tensor (..., 3, H, W)."""
    w = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype)
    return (img * w.view(3, 1, 1)).sum(dim=-3, keepdim=True)


def timed_batch(model_handle, batch):
    """Run `model_handle(batch)` and return (outputs, wall-clock seconds)."""
    start = time.perf_counter()
    out = model_handle(batch)
    return out, time.perf_counter() - start


METRICS_CSV_COLUMNS = ("sample_id", "psnr", "ssim", "lpips", "mse", "time_s")


def write_metrics_csv(rows: list[dict], path) -> None:
    """Per-sample metric rows plus a `mean` summary row over the numeric columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_CSV_COLUMNS})
        if rows:
            summary = {"sample_id": "mean"}
            for col in METRICS_CSV_COLUMNS[1:]:
                summary[col] = sum(float(r[col]) for r in rows) / len(rows)
            writer.writerow(summary)
