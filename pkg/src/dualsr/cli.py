"""Operator surface: synth / train / eval / infer / verify subcommands.

Run configuration is a strict JSON document (unknown keys rejected, every
field defaulted); tabular output is CSV. Exit codes: 0 success, 1 runtime
failure, 2 usage error. The run-directory root comes from --run-root or
the DUALSR_RUN_ROOT environment variable (default ./runs).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import imaging, metrics
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .losses import LossWeights
from .training import (NonFiniteLossError, TrainConfig, load_generator, train, validate)
from .verify import format_report, run_verification

__all__ = ["main", "RunConfig", "DataConfig", "ConfigError", "load_run_config"]


class ConfigError(ValueError):
    """Malformed run configuration (treated as a usage error, exit 2)."""


@dataclass
class DataConfig:
    hr_dir: str | None = None
    lr_dir: str | None = None
    lr_suffix: str = "x4"
    image_size: int = 128
    synthetic: bool = False
    synthetic_seed: int = 0
    synthetic_n: int = 16
    val_fraction: float = 0.25
    validate_on_train: bool = False


@dataclass
class RunConfig:
    run_name: str = "run"
    generator: GeneratorConfig = dataclasses.field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = dataclasses.field(default_factory=DiscriminatorConfig)
    loss_weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)


def _dataclass_from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except Exception as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "loss_weights": LossWeights,
    "train": TrainConfig,
    "data": DataConfig,
}


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    allowed = set(_SECTIONS) | {"run_name"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {unknown}; allowed: {sorted(allowed)}")
    kwargs = {"run_name": doc.get("run_name", "run")}
    for section, cls in _SECTIONS.items():
        kwargs[section] = _dataclass_from_dict(cls, doc.get(section, {}), f"{path}:{section}")
    return RunConfig(**kwargs)


def build_manifests(data: DataConfig) -> tuple[imaging.DatasetManifest, imaging.DatasetManifest]:
    """Training and validation manifests from a data config."""
    if data.synthetic:
        manifest = imaging.synth_dataset(data.synthetic_seed, data.synthetic_n, data.image_size)
    else:
        if not data.hr_dir or not data.lr_dir:
            raise ConfigError("data: hr_dir and lr_dir are required unless synthetic=true")
        manifest = imaging.scan_and_pair(data.hr_dir, data.lr_dir, data.lr_suffix, data.image_size)
    if data.validate_on_train or manifest.n_valid < 2:
        return manifest, manifest
    n_val = max(1, int(round(manifest.n_valid * data.val_fraction)))
    n_val = min(n_val, manifest.n_valid - 1)
    val = dataclasses.replace(manifest, pairs=manifest.pairs[-n_val:])
    tr = dataclasses.replace(manifest, pairs=manifest.pairs[:-n_val])
    return tr, val


def cmd_synth(args) -> int:
    manifest = imaging.synth_dataset(args.seed, args.n, args.size)
    hr_dir, lr_dir = imaging.save_dataset_to_disk(manifest, args.out, args.suffix)
    rescanned = imaging.scan_and_pair(hr_dir, lr_dir, args.suffix, args.size)
    imaging.export_manifest_json(rescanned, Path(args.out) / "manifest.json")
    print(f"wrote {rescanned.n_valid} HR/LR pairs under {args.out} "
          f"(hr={hr_dir}, lr={lr_dir})")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    if args.ablation is not None:
        config.train = dataclasses.replace(config.train, ablation=args.ablation)
    run_root = Path(args.run_root or os.environ.get("DUALSR_RUN_ROOT", "runs"))
    run_dir = Path(args.run_dir) if args.run_dir else run_root / config.run_name
    train_manifest, val_manifest = build_manifests(config.data)
    if train_manifest.n_valid == 0:
        print("error: no valid training pairs", file=sys.stderr)
        return 1
    try:
        result = train(train_manifest, run_dir, gen_config=config.generator,
                       disc_config=config.discriminator, weights=config.loss_weights,
                       train_config=config.train, val_manifest=val_manifest)
    except NonFiniteLossError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    best = f"best step {result.best.step} (PSNR {result.best.psnr:.2f} dB)" if result.best else "no validation"
    print(f"run complete: {result.steps_run} steps, {best}, artifacts in {result.run_dir}")
    return 0


def _eval_manifest(args) -> imaging.DatasetManifest:
    if args.synthetic_n:
        return imaging.synth_dataset(args.synthetic_seed, args.synthetic_n, args.image_size)
    if not args.hr_dir or not args.lr_dir:
        raise ConfigError("eval needs --hr-dir/--lr-dir or --synthetic-n")
    return imaging.scan_and_pair(args.hr_dir, args.lr_dir, args.suffix, args.image_size)


def cmd_eval(args) -> int:
    gen, _ = load_generator(args.checkpoint)
    manifest = _eval_manifest(args)
    if manifest.n_valid == 0:
        print("error: no valid pairs to evaluate", file=sys.stderr)
        return 1
    rows = []
    with torch.no_grad():
        for batch in imaging.batch_iter(manifest, args.batch_size, shuffle_seed=0):
            lr_up = torch.from_numpy(batch.lr_up)
            out, seconds = metrics.timed_batch(lambda x: gen(x, t=0.0, sigma=0.0), lr_up)
            hr = torch.from_numpy(batch.hr)
            sr01, hr01 = metrics.denormalize(out.sr_final), metrics.denormalize(hr)
            if args.luma:
                sr01, hr01 = metrics.rgb_to_luma(sr01), metrics.rgb_to_luma(hr01)
            per_image = seconds / len(batch.sample_ids)
            for i, sid in enumerate(batch.sample_ids):
                rows.append({
                    "sample_id": sid,
                    "psnr": metrics.psnr(sr01[i], hr01[i]),
                    "ssim": metrics.ssim(sr01[i], hr01[i]),
                    "lpips": metrics.lpips_distance(out.sr_final[i], hr[i]),
                    "mse": metrics.mse(sr01[i], hr01[i]),
                    "time_s": per_image,
                })
    metrics.write_metrics_csv(rows, args.out)
    mean_psnr = sum(float(r["psnr"]) for r in rows) / len(rows)
    print(f"evaluated {len(rows)} images, mean PSNR {mean_psnr:.2f} dB -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    gen, _ = load_generator(args.checkpoint)
    size = gen.config.image_size
    with Image.open(args.image) as img:
        lr = img.convert("RGB").resize((size, size), Image.BILINEAR)
    x = imaging.normalize_unit(np.transpose(np.asarray(lr, dtype=np.float32) / 255.0, (2, 0, 1)))
    with torch.no_grad():
        sr = gen(torch.from_numpy(x).unsqueeze(0), t=0.0, sigma=0.0).sr_final[0]
    unit = np.clip(metrics.denormalize(sr).numpy(), 0.0, 1.0)
    u8 = np.round(unit * 255.0).astype(np.uint8)
    Image.fromarray(np.transpose(u8, (1, 2, 0))).save(args.out)
    print(f"wrote {args.out} ({size}x{size})")
    return 0


def cmd_verify(args) -> int:
    checks = run_verification(seed=args.seed)
    print(format_report(checks))
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualsr",
                                     description="dual-branch super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a procedural HR/LR dataset to disk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--suffix", default="x4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=["none", "low_lr", "plain_decoder"], default=None)
    p.add_argument("--run-root", default=None)
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, emit a metric CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hr-dir")
    p.add_argument("--lr-dir")
    p.add_argument("--suffix", default="x4")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--synthetic-n", type=int, default=0)
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--luma", action="store_true", help="PSNR/SSIM/MSE on the Y channel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", help="run the built-in invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
