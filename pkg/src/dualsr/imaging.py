"""Dataset construction: HR/LR pairing, integrity filtering, preprocessing.

Pairs are matched on filename stems after stripping the LR suffix
(default "x4"); undecodable files are excluded and counted. Images are
decoded to RGB, resized to the working resolution, and normalized to
[-1, 1] with mean/std 0.5. The native-resolution LR (working size / 4) is
kept alongside the upsampled model input for the LR-consistency loss.
A procedural synthetic dataset provides reproducible desk-scale pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

__all__ = [
    "SamplePair",
    "DatasetManifest",
    "Batch",
    "scan_and_pair",
    "load_and_preprocess",
    "synth_dataset",
    "batch_iter",
    "export_manifest_json",
    "save_dataset_to_disk",
    "normalize_unit",
    "denormalize_unit",
]

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}

STATUS_VALID = "valid"
STATUS_CORRUPT = "corrupt"
STATUS_UNPAIRED = "unpaired"


def normalize_unit(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1] with mean/std 0.5 per channel."""
    return ((x - 0.5) / 0.5).astype(np.float32)


def denormalize_unit(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (x.astype(np.float64) * 0.5 + 0.5).astype(np.float32)


@dataclass
class SamplePair:
    hr_path: str
    lr_path: str
    status: str = STATUS_VALID
    hr: np.ndarray | None = None
    lr_up: np.ndarray | None = None
    lr_native: np.ndarray | None = None


@dataclass
class DatasetManifest:
    pairs: list[SamplePair] = field(default_factory=list)
    n_corrupt: int = 0
    n_unpaired: int = 0
    excluded: list[SamplePair] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    shuffle_seed: int = 0
    image_size: int = 128

    @property
    def n_valid(self) -> int:
        return len(self.pairs)

    @property
    def n_scanned(self) -> int:
        return self.n_valid + self.n_corrupt + self.n_unpaired


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.convert("RGB").load()
        return True
    except Exception:
        return False


def _strip_suffix(stem: str, suffix: str) -> str:
    if suffix and stem.endswith(suffix):
        return stem[: -len(suffix)]
    return stem


def scan_and_pair(hr_dir, lr_dir, lr_suffix: str = "x4", image_size: int = 128) -> DatasetManifest:
    """Match HR and LR files on stems (LR suffix stripped) and verify integrity."""
    hr_dir, lr_dir = Path(hr_dir), Path(lr_dir)
    manifest = DatasetManifest(image_size=image_size)
    hr_files = _image_files(hr_dir)
    lr_files = _image_files(lr_dir)
    if not hr_files:
        manifest.warnings.append(f"no images found in HR directory {hr_dir}")
    if not lr_files:
        manifest.warnings.append(f"no images found in LR directory {lr_dir}")

    lr_by_stem = {_strip_suffix(p.stem, lr_suffix): p for p in lr_files}
    matched_lr = set()
    for hr_path in hr_files:
        lr_path = lr_by_stem.get(hr_path.stem)
        if lr_path is None:
            manifest.excluded.append(SamplePair(str(hr_path), "", status=STATUS_UNPAIRED))
            manifest.n_unpaired += 1
            continue
        matched_lr.add(lr_path)
        pair = SamplePair(str(hr_path), str(lr_path))
        if _decodable(hr_path) and _decodable(lr_path):
            manifest.pairs.append(pair)
        else:
            pair.status = STATUS_CORRUPT
            manifest.excluded.append(pair)
            manifest.n_corrupt += 1
    for lr_path in lr_files:
        if lr_path not in matched_lr:
            manifest.excluded.append(SamplePair("", str(lr_path), status=STATUS_UNPAIRED))
            manifest.n_unpaired += 1
    return manifest


def _to_chw_unit(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1))


def load_and_preprocess(pair: SamplePair, size: int = 128) -> SamplePair:
    """Decode, convert to RGB, resize, normalize; populate the pair's tensors.

    hr and lr_up land at `size`x`size`; lr_native is an area (box) resize of
    the LR source to size/4. Decode failure flips the status to corrupt.
    """
    try:
        with Image.open(pair.hr_path) as img:
            hr = img.convert("RGB").resize((size, size), Image.BILINEAR)
        with Image.open(pair.lr_path) as img:
            lr_img = img.convert("RGB")
            lr_up = lr_img.resize((size, size), Image.BILINEAR)
            lr_native = lr_img.resize((size // 4, size // 4), Image.BOX)
    except Exception:
        pair.status = STATUS_CORRUPT
        return pair
    pair.hr = normalize_unit(_to_chw_unit(hr))
    pair.lr_up = normalize_unit(_to_chw_unit(lr_up))
    pair.lr_native = normalize_unit(_to_chw_unit(lr_native))
    return pair


def _block_mean(chw: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = chw.shape
    blocks = chw.astype(np.float64).reshape(c, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(2, 4)).astype(np.float32)


def _bilinear_resize_chw(chw: np.ndarray, size: int) -> np.ndarray:
    channels = [
        np.asarray(Image.fromarray(ch, mode="F").resize((size, size), Image.BILINEAR))
        for ch in np.ascontiguousarray(chw, dtype=np.float32)
    ]
    return np.stack(channels).astype(np.float32)


def _synth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One procedural HR image in [0, 1]: gradient base, stripes, soft ellipses."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))

    # linear gradient between two random colors
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (xs * math.cos(theta) + ys * math.sin(theta) + 1.0) / 2.0
    c_a, c_b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    for ch in range(3):
        img[ch] = c_a[ch] + (c_b[ch] - c_a[ch]) * ramp

    # Gabor-like stripe field
    theta = rng.uniform(0, 2 * math.pi)
    freq = rng.uniform(2.0, 6.0) * 2 * math.pi
    phase = rng.uniform(0, 2 * math.pi)
    cx, cy = rng.uniform(0.2, 0.8, 2)
    envelope = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * 0.15 ** 2))
    stripes = np.sin(freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase) * envelope
    img += 0.25 * stripes * rng.uniform(0.5, 1.0, (3, 1, 1))

    # soft-edged ellipses
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        rx, ry = rng.uniform(0.05, 0.25, 2)
        color = rng.uniform(0, 1, 3)
        d = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2
        mask = np.clip(1.5 - d, 0.0, 1.0)
        for ch in range(3):
            img[ch] = img[ch] * (1 - mask) + color[ch] * mask

    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, n: int, size: int = 32) -> DatasetManifest:
    """In-memory procedural dataset; lr_native is the exact 4x4 block mean of hr."""
    if size % 8 != 0:
        raise ValueError(f"size must be divisible by 8, got {size}")
    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(shuffle_seed=seed, image_size=size)
    for i in range(n):
        hr = normalize_unit(_synth_image(rng, size))
        lr_native = _block_mean(hr, 4)
        lr_up = _bilinear_resize_chw(lr_native, size)
        manifest.pairs.append(SamplePair(
            hr_path=f"synth_{i:04d}", lr_path=f"synth_{i:04d}x4",
            hr=hr, lr_up=lr_up, lr_native=lr_native,
        ))
    return manifest


@dataclass
class Batch:
    hr: np.ndarray
    lr_up: np.ndarray
    lr_native: np.ndarray
    sample_ids: list[str]


def batch_iter(manifest: DatasetManifest, batch_size: int,
               shuffle_seed: int | None = None) -> Iterator[Batch]:
    """One epoch of batches in a seed-deterministic order; partial tail kept."""
    valid = [p for p in manifest.pairs if p.status == STATUS_VALID]
    seed = manifest.shuffle_seed if shuffle_seed is None else shuffle_seed
    order = np.random.default_rng(seed).permutation(len(valid))
    for start in range(0, len(valid), batch_size):
        chunk = [valid[i] for i in order[start:start + batch_size]]
        loaded = []
        for pair in chunk:
            if pair.hr is None:
                pair = load_and_preprocess(pair, manifest.image_size)
            if pair.status == STATUS_VALID:
                loaded.append(pair)
        if not loaded:
            continue
        yield Batch(
            hr=np.stack([p.hr for p in loaded]),
            lr_up=np.stack([p.lr_up for p in loaded]),
            lr_native=np.stack([p.lr_native for p in loaded]),
            sample_ids=[Path(p.hr_path).stem for p in loaded],
        )


def export_manifest_json(manifest: DatasetManifest, path) -> None:
    doc = {
        "image_size": manifest.image_size,
        "shuffle_seed": manifest.shuffle_seed,
        "counts": {"valid": manifest.n_valid, "corrupt": manifest.n_corrupt,
                   "unpaired": manifest.n_unpaired},
        "warnings": manifest.warnings,
        "files": [
            {"hr": p.hr_path, "lr": p.lr_path, "status": p.status}
            for p in list(manifest.pairs) + list(manifest.excluded)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def _save_chw_png(chw: np.ndarray, path: Path) -> None:
    unit = np.clip(denormalize_unit(chw), 0.0, 1.0)
    u8 = np.round(unit * 255.0).astype(np.uint8)
    Image.fromarray(np.transpose(u8, (1, 2, 0))).save(path)


def save_dataset_to_disk(manifest: DatasetManifest, out_dir, lr_suffix: str = "x4") -> tuple[Path, Path]:
    """Write HR and native-LR PNGs honoring the LR suffix convention."""
    out_dir = Path(out_dir)
    hr_dir, lr_dir = out_dir / "hr", out_dir / "lr"
    hr_dir.mkdir(parents=True, exist_ok=True)
    lr_dir.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(manifest.pairs):
        name = f"img{i:04d}"
        _save_chw_png(pair.hr, hr_dir / f"{name}.png")
        _save_chw_png(pair.lr_native, lr_dir / f"{name}{lr_suffix}.png")
    return hr_dir, lr_dir
