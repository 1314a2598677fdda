"""Adversarial training loop: alternating D/G steps, validation, checkpoints.

One discriminator step then one generator step per batch. Runs are
deterministic given (config, seed, dataset) under serial execution; loss
CSVs contain no wall-clock fields so identical runs produce identical
bytes. A non-finite loss aborts the step with the offending term named.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import losses as L
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .discriminator import Discriminator, DiscriminatorConfig
from .features import get_extractor
from .generator import Generator, GeneratorConfig
from .imaging import Batch, DatasetManifest, batch_iter
from .metrics import MetricReport, denormalize, lpips_distance, mse, psnr, rgb_to_luma, ssim
from .substrate import ContractError

__all__ = [
    "TrainConfig",
    "CheckpointRecord",
    "RunResult",
    "NonFiniteLossError",
    "train_step_d",
    "train_step_g",
    "train",
    "validate",
    "build_models",
    "generator_config_from_dict",
    "load_generator",
    "LOSS_CSV_COLUMNS",
]

ABLATIONS = ("none", "low_lr", "plain_decoder")

LOSS_CSV_COLUMNS = ("step", "lr", "d_loss", *L.LossReport.TERM_NAMES, "total")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1000
    val_every: int = 100
    seed: int = 0
    ablation: str = "none"
    clip_grad_norm: float | None = 1.0
    timestep_range: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.ablation not in ABLATIONS:
            raise ContractError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def effective_lr(self) -> float:
        return 1e-5 if self.ablation == "low_lr" else self.learning_rate


@dataclass
class CheckpointRecord:
    step: int
    psnr: float
    ssim: float
    lpips: float
    path: str


@dataclass
class RunResult:
    run_dir: Path
    records: list[CheckpointRecord]
    best: CheckpointRecord | None
    final_checkpoint: Path
    steps_run: int


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


def _check_finite(term: str, value: Tensor) -> Tensor:
    v = float(value.detach())
    if not np.isfinite(v):
        raise NonFiniteLossError(term, v)
    return value


def _batch_tensors(batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
    return (torch.from_numpy(batch.hr), torch.from_numpy(batch.lr_up),
            torch.from_numpy(batch.lr_native))


def train_step_d(batch: Batch, gen: Generator, disc: Discriminator,
                 opt_d: torch.optim.Optimizer, t: float, sigma: float,
                 noise_rng: torch.Generator, clip: float | None = 1.0) -> float:
    """One Adam update of the discriminator; generator untouched by contract."""
    hr, lr_up, _ = _batch_tensors(batch)
    disc.power_iterate(1)
    with torch.no_grad():
        fake = gen(lr_up, t, sigma, noise_rng).sr_final
    loss = L.discriminator_loss(disc(hr), disc(fake))
    _check_finite("discriminator_loss", loss)
    opt_d.zero_grad()
    loss.backward()
    if clip is not None:
        torch.nn.utils.clip_grad_norm_(disc.parameters(), clip)
    opt_d.step()
    return float(loss)


def train_step_g(batch: Batch, gen: Generator, disc: Discriminator,
                 opt_g: torch.optim.Optimizer, weights: L.LossWeights, extractor,
                 t: float, sigma: float, noise_rng: torch.Generator,
                 clip: float | None = 1.0) -> L.LossReport:
    """One Adam update of the generator against the full weighted objective."""
    hr, lr_up, lr_native = _batch_tensors(batch)
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        out = gen(lr_up, t, sigma, noise_rng)
        v_hr = gen.target_projection(hr, t)
        terms = {
            "adv": L.adv_loss_g(disc(out.sr_final)),
            "pixel": L.pixel_loss(out.sr_final, out.sr_aux, hr, weights.lambda_aux),
            "lr_consistency": L.lr_consistency_loss(out.sr_final, lr_native),
            "contrastive": L.contrastive_loss(out.v_denoised, v_hr),
            "perceptual": L.perceptual_loss(out.sr_final, hr, extractor,
                                            lambda_vgg=weights.lambda_vgg),
            "edge": L.edge_loss(out.sr_final, hr),
            "latent_consistency": L.latent_consistency_loss(
                out.v_denoised, out.v_noise, out.z_denoised, out.z_noise),
            "branch_consistency": L.branch_consistency_loss(out.sr_final, out.sr_aux),
        }
        for name, value in terms.items():
            _check_finite(name, value)
        total, report = L.generator_total(weights=weights, **terms)
        _check_finite("total", total)
        opt_g.zero_grad()
        total.backward()
        if clip is not None:
            torch.nn.utils.clip_grad_norm_(gen.parameters(), clip)
        opt_g.step()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    return report


def validate(gen: Generator, manifest: DatasetManifest, extractor="random_pyramid",
             batch_size: int = 8, t: float = 0.0, sigma: float = 0.0,
             use_luma: bool = False) -> MetricReport:
    """Mean metrics over a validation set; deterministic (t fixed, noise off)."""
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    rows = []
    with torch.no_grad():
        for batch in batch_iter(manifest, batch_size, shuffle_seed=0):
            hr, lr_up, _ = _batch_tensors(batch)
            sr = gen(lr_up, t, sigma).sr_final
            sr01, hr01 = denormalize(sr), denormalize(hr)
            if use_luma:
                sr01, hr01 = rgb_to_luma(sr01), rgb_to_luma(hr01)
            for i in range(sr.shape[0]):
                rows.append((
                    psnr(sr01[i], hr01[i], max_val=1.0),
                    ssim(sr01[i], hr01[i]),
                    lpips_distance(sr[i], hr[i], extractor),
                    mse(sr01[i], hr01[i]),
                ))
    cols = list(zip(*rows))
    return MetricReport(
        psnr_db=float(np.mean(cols[0])), ssim=float(np.mean(cols[1])),
        lpips=float(np.mean(cols[2])), mse=float(np.mean(cols[3])),
    )


def build_models(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig,
                 train_config: TrainConfig) -> tuple[Generator, Discriminator]:
    """Seeded model construction with the ablation applied to the generator."""
    if train_config.ablation == "plain_decoder":
        gen_config = dataclasses.replace(gen_config, plain_decoder=True)
    torch.manual_seed(train_config.seed)
    return Generator(gen_config), Discriminator(disc_config)


def generator_config_from_dict(data: dict) -> GeneratorConfig:
    kwargs = dict(data)
    if "encoder_channels" in kwargs:
        kwargs["encoder_channels"] = tuple(kwargs["encoder_channels"])
    return GeneratorConfig(**kwargs)


def _save_models(path: Path, gen: Generator, disc: Discriminator, configs: dict, step: int) -> None:
    save_checkpoint(path, gen.state_dict(), disc.state_dict(),
                    config=configs, extra={"step": step})


def load_generator(path) -> tuple[Generator, CheckpointData]:
    """Rebuild a generator from a checkpoint's embedded config and weights."""
    data = load_checkpoint(path)
    gen = Generator(generator_config_from_dict(data.config["generator"]))
    gen.load_state_dict(data.generator_state)
    return gen, data


def train(manifest: DatasetManifest, run_dir,
          gen_config: GeneratorConfig | None = None,
          disc_config: DiscriminatorConfig | None = None,
          weights: L.LossWeights | None = None,
          train_config: TrainConfig | None = None,
          val_manifest: DatasetManifest | None = None,
          extractor_name: str = "random_pyramid") -> RunResult:
    """Run the full adversarial loop, writing all run artifacts into run_dir.

    Artifacts: config_snapshot.json, losses.csv (one row per step, no
    wall-clock fields), validations.csv, checkpoints/step_*.ckpt,
    summary.json. Validation runs at step 1, every val_every steps, and at
    the final step; the best checkpoint maximizes validation PSNR.
    """
    gen_config = gen_config or GeneratorConfig()
    disc_config = disc_config or DiscriminatorConfig()
    weights = weights or L.LossWeights()
    cfg = train_config or TrainConfig()
    val_manifest = val_manifest or manifest

    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    gen, disc = build_models(gen_config, disc_config, cfg)
    if cfg.ablation == "plain_decoder":
        gen_config = gen.config
    configs = {
        "generator": dataclasses.asdict(gen_config),
        "discriminator": dataclasses.asdict(disc_config),
        "loss_weights": weights.as_dict(),
        "train": dataclasses.asdict(cfg),
        "effective_lr": cfg.effective_lr,
        "extractor": extractor_name,
    }
    (run_dir / "config_snapshot.json").write_text(json.dumps(configs, indent=2, sort_keys=True))

    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.effective_lr,
                             betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.effective_lr,
                             betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    extractor = get_extractor(extractor_name)
    noise_rng = torch.Generator().manual_seed(cfg.seed + 1)
    t_rng = torch.Generator().manual_seed(cfg.seed + 2)

    initial_ckpt = ckpt_dir / "step_000000.ckpt"
    _save_models(initial_ckpt, gen, disc, configs, step=0)

    records: list[CheckpointRecord] = []
    final_ckpt = initial_ckpt
    sigma = gen_config.sigma
    step = 0
    epoch = 0

    def run_validation(step: int) -> None:
        nonlocal final_ckpt
        report = validate(gen, val_manifest, extractor, batch_size=cfg.batch_size)
        path = ckpt_dir / f"step_{step:06d}.ckpt"
        _save_models(path, gen, disc, configs, step=step)
        final_ckpt = path
        records.append(CheckpointRecord(step=step, psnr=report.psnr_db,
                                        ssim=report.ssim, lpips=report.lpips, path=str(path)))
        val_writer.writerow({"step": step, "psnr": repr(report.psnr_db),
                             "ssim": repr(report.ssim), "lpips": repr(report.lpips),
                             "mse": repr(report.mse)})
        val_fh.flush()

    with open(run_dir / "losses.csv", "w", newline="") as loss_fh, \
         open(run_dir / "validations.csv", "w", newline="") as val_fh:
        loss_writer = csv.DictWriter(loss_fh, fieldnames=LOSS_CSV_COLUMNS)
        loss_writer.writeheader()
        val_writer = csv.DictWriter(val_fh, fieldnames=("step", "psnr", "ssim", "lpips", "mse"))
        val_writer.writeheader()

        while step < cfg.max_steps and manifest.n_valid > 0:
            for batch in batch_iter(manifest, cfg.batch_size, cfg.seed + 1000 + epoch):
                step += 1
                t = float(torch.randint(0, cfg.timestep_range, (1,), generator=t_rng).item())
                d_loss = train_step_d(batch, gen, disc, opt_d, t, sigma, noise_rng,
                                      cfg.clip_grad_norm)
                report = train_step_g(batch, gen, disc, opt_g, weights, extractor, t,
                                      sigma, noise_rng, cfg.clip_grad_norm)
                row = {"step": step, "lr": repr(cfg.effective_lr), "d_loss": repr(d_loss),
                       "total": repr(report.total)}
                for name in L.LossReport.TERM_NAMES:
                    row[name] = repr(getattr(report, name))
                loss_writer.writerow(row)
                if step == 1 or step == cfg.max_steps or (
                        cfg.val_every > 0 and step % cfg.val_every == 0):
                    run_validation(step)
                if step >= cfg.max_steps:
                    break
            epoch += 1

    best = max(records, key=lambda r: r.psnr) if records else None
    summary = {
        "steps_run": step,
        "final_checkpoint": str(final_ckpt),
        "best": dataclasses.asdict(best) if best else None,
        "validations": [dataclasses.asdict(r) for r in records],
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return RunResult(run_dir=run_dir, records=records, best=best,
                     final_checkpoint=final_ckpt, steps_run=step)
