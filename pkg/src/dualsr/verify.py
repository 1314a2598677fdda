"""Built-in invariant suite: the release gate behind `dualsr verify`.

Each check is a named (value <= tolerance) assertion over analytic
identities, zero-weight reductions, SVD-checked spectral norms, and
finite-difference gradchecks. Checks run on freshly built desk-scale
modules, so a regression anywhere in the substrate or architecture shows
up as a named failure with its measured error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig, ResidualBlock, RRDB
from .metrics import SsimConstants, psnr, ssim
from .imaging import denormalize_unit, normalize_unit
from .substrate import (ConvSpec, MultiHeadSelfAttention, conv2d, gradcheck,
                        init_spectral_state, module_gradcheck, spectral_normalize,
                        time_embedding)

__all__ = ["CheckResult", "run_verification", "format_report"]


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value <= self.tolerance


def _identity_kernel(channels: int, dtype=torch.float64) -> torch.Tensor:
    w = torch.zeros(channels, channels, 3, 3, dtype=dtype)
    for c in range(channels):
        w[c, c, 1, 1] = 1.0
    return w


def _set_identity_convs(block: ResidualBlock) -> None:
    with torch.no_grad():
        for conv in (block.conv1, block.conv2):
            conv.weight.copy_(_identity_kernel(conv.weight.shape[0], conv.weight.dtype))
            conv.bias.zero_()


def run_verification(gen_config: GeneratorConfig | None = None, seed: int = 0) -> list[CheckResult]:
    torch.manual_seed(seed)
    cfg = gen_config or GeneratorConfig.tiny(image_size=16, latent_channels=16,
                                             encoder_channels=(8, 8, 16), main_tx_heads=2,
                                             noise_tx_heads=2, rrdb_growth=8, proj_dim=8)
    checks: list[CheckResult] = []

    def add(name: str, value: float, tol: float) -> None:
        checks.append(CheckResult(name, float(value), tol))

    # analytic formula identities
    a = torch.zeros(1, 1, 4, 4)
    b = torch.full((1, 1, 4, 4), 0.5)
    add("psnr(max=1, mse=0.25) == 6.0206 dB", abs(psnr(a, b) - 6.0206), 1e-4)
    cst = SsimConstants()
    const_ssim = ssim(torch.zeros(3, 16, 16).double(), torch.ones(3, 16, 16).double(), cst)
    add("constant-vs-constant SSIM == C1/(1+C1)", abs(const_ssim - cst.c1 / (1 + cst.c1)), 1e-8)
    add("BCE at zero logits == ln 2", abs(float(L.adv_loss_g(torch.zeros(2, 1, 3, 3))) - math.log(2)), 1e-9)
    v = torch.tensor([[1.0, 0.0]])
    add("cosine loss aligned == 0", abs(float(L.contrastive_loss(v, v))), 1e-7)
    add("cosine loss orthogonal == 1", abs(float(L.contrastive_loss(v, torch.tensor([[0.0, 1.0]]))) - 1), 1e-7)
    add("cosine loss antiparallel == 2", abs(float(L.contrastive_loss(v, -v)) - 2), 1e-7)
    add("softplus(1) adversarial value", abs(float(L.adv_loss_g(torch.tensor([-1.0]))) - 1.313262), 1e-6)
    emb0 = time_embedding(0.0, 16, dtype=torch.float64)
    add("time embedding at t=0 is (0, 1) pairs",
        float(max((emb0[0::2] - 0).abs().max(), (emb0[1::2] - 1).abs().max())), 0.0)

    # normalization round trip
    unit = np.linspace(0, 1, 64, dtype=np.float32).reshape(1, 8, 8)
    add("denormalize(normalize(x)) round trip", float(np.abs(denormalize_unit(normalize_unit(unit)) - unit).max()), 1e-7)

    # conv contract
    x = torch.randn(1, 1, 5, 5, dtype=torch.float64)
    w = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    add("conv2d identity kernel", float((conv2d(x, ConvSpec(1, 1, (1, 1), 1, 0, False), w) - x).abs().max()), 0.0)
    spec = ConvSpec(3, 4, (4, 4), 2, 1, False)
    out = conv2d(torch.randn(2, 3, 16, 16, dtype=torch.float64), spec,
                 torch.randn(4, 3, 4, 4, dtype=torch.float64))
    add("conv2d k4 s2 p1 halves spatial dims", float(out.shape[-1] != 8 or out.shape[-2] != 8), 0.0)

    # zero-weight reductions
    rb = ResidualBlock(8, scale=cfg.residual_scale).double()
    with torch.no_grad():
        for p in rb.parameters():
            p.zero_()
    xz = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    add("residual block zero-weight identity", float((rb(xz) - xz).abs().max()), 0.0)

    rb2 = ResidualBlock(4, scale=cfg.residual_scale).double()
    _set_identity_convs(rb2)
    ones = torch.ones(1, 4, 6, 6, dtype=torch.float64)
    add("residual block 1.2-constant identity", float((rb2(ones) - 1.2).abs().max()), 1e-6)

    rrdb = RRDB(8, 4).double()
    with torch.no_grad():
        for p in rrdb.parameters():
            p.zero_()
    add("RRDB zero-weight identity", float((rrdb(xz) - xz).abs().max()), 0.0)

    gen = Generator(cfg).double()
    c = cfg.latent_channels
    z1 = torch.randn(2, c, cfg.latent_size, cfg.latent_size, dtype=torch.float64)
    z2 = torch.randn(2, c, cfg.latent_size, cfg.latent_size, dtype=torch.float64)
    with torch.no_grad():
        gen.fuse_conv.weight.zero_()
        gen.fuse_conv.bias.zero_()
        for i in range(c):
            gen.fuse_conv.weight[i, i, 0, 0] = 1.0
    add("fusion identity selects first branch", float((gen.fuse(z1, z2) - z1).abs().max()), 0.0)
    with torch.no_grad():
        gen.fuse_conv.weight.zero_()
        for i in range(c):
            gen.fuse_conv.weight[i, c + i, 0, 0] = 1.0
    add("fusion identity selects second branch", float((gen.fuse(z1, z2) - z2).abs().max()), 0.0)

    branch = gen.main_branch
    with torch.no_grad():
        branch.dec_conv1.weight.zero_(); branch.dec_conv1.bias.zero_()
        branch.dec_conv2.weight.zero_(); branch.dec_conv2.bias.zero_()
    e_t = torch.randn(c, dtype=torch.float64)
    z = z1[:1]
    add("main branch skip reduction to z + e_t",
        float((branch(z, e_t) - (z + e_t.view(1, -1, 1, 1))).abs().max()), 1e-7)

    sr = gen.decoder_main(z1)
    add("decoder output within tanh range", float(max(sr.max().item() - 1.0, -1.0 - sr.min().item(), 0.0)), 0.0)

    # spectral normalization vs SVD oracle
    gen_rng = torch.Generator().manual_seed(seed)
    wmat = torch.randn(64, 64, dtype=torch.float64, generator=gen_rng)
    norm_w, _ = spectral_normalize(init_spectral_state(wmat, gen_rng), n_power_iters=50)
    sigma_max = float(np.linalg.svd(norm_w.numpy(), compute_uv=False)[0])
    add("spectral norm sigma_max vs SVD (64x64, 50 iters)", abs(sigma_max - 1.0), 1e-3)

    disc = Discriminator(DiscriminatorConfig(channels=(8, 8, 8, 8)))
    disc.power_iterate(50)
    worst = max(abs(float(np.linalg.svd(layer.normalized_weight().detach()
                                        .reshape(layer.weight.shape[0], -1).numpy(),
                                        compute_uv=False)[0]) - 1.0)
                for layer in disc.sn_layers())
    add("discriminator layers sigma_max vs SVD", worst, 1e-3)

    # gradchecks (double precision, sampled coordinates)
    spec = ConvSpec(2, 3, (3, 3), 1, 1, True)
    wc = torch.randn(3, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    bc = torch.randn(3, dtype=torch.float64, requires_grad=True)
    xc = torch.randn(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)
    add("gradcheck conv2d", gradcheck(lambda x, w, b: conv2d(x, spec, w, b),
                                      [xc, wc, bc], eps=1e-5, n_samples=120), 1e-3)
    attn = MultiHeadSelfAttention(8, 2).double()
    add("gradcheck attention", module_gradcheck(attn, [torch.randn(1, 5, 8, dtype=torch.float64)],
                                                eps=1e-5, n_samples=120), 1e-3)
    rb3 = ResidualBlock(4).double()
    add("gradcheck residual block", module_gradcheck(rb3, [torch.randn(1, 4, 6, 6, dtype=torch.float64)],
                                                     eps=1e-5, n_samples=120), 1e-3)
    sr_t = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    hr_t = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    add("gradcheck edge loss", gradcheck(lambda s: L.edge_loss(s, hr_t), [sr_t],
                                         eps=1e-5, n_samples=120), 1e-3)
    va = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
    vb = torch.randn(2, 6, dtype=torch.float64)
    add("gradcheck contrastive loss", gradcheck(lambda v: L.contrastive_loss(v, vb), [va],
                                                eps=1e-5, n_samples=None), 1e-3)
    return checks


def format_report(checks: list[CheckResult]) -> str:
    lines = []
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"[{status}] {c.name}: value={c.value:.3e} tolerance={c.tolerance:.1e}")
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines)
