"""Dataset ingestion, synthetic blob corpora, augmentation and region masking."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SCALES = (0.75, 1.0, 1.25)
MIN_CANVAS = 64


class DatasetError(Exception):
    """Malformed dataset directory (missing folders, orphan files)."""


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    source: Literal["disk", "synthetic"] = "disk"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask must contain only 0 and 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class RegionPair:
    polyp_input: np.ndarray
    nonpolyp_input: np.ndarray


@dataclass
class SynthSpec:
    count: int = 200
    canvas: int = 128
    blob_count_range: tuple[int, int] = (1, 3)
    boundary_noise: float = 2.0
    contrast: float = 0.5
    seed: int = 0
    texture_noise: float = 0.15
    edge_blur: float = 0.0

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.canvas < MIN_CANVAS:
            raise ValueError(
                f"canvas {self.canvas} too small: need >= {MIN_CANVAS} for four 2x downsamplings"
            )
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid blob_count_range {self.blob_count_range}")
        if self.boundary_noise < 0 or self.texture_noise < 0 or self.edge_blur < 0:
            raise ValueError("noise amplitudes must be non-negative")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float
    harmonics: tuple[tuple[int, float, float], ...] = field(default=())  # (k, amplitude, phase)


# --------------------------------------------------------------------------- loading


def _split_root(root: Path, split: str) -> Path:
    if (root / split / "images").is_dir():
        return root / split
    return root


def _read_mask(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "I", "I;16", "1"):
        img = img.convert("L")
    arr = np.asarray(img)
    full = 1 if img.mode == "1" else (65535 if arr.dtype == np.uint16 or img.mode.startswith("I") else 255)
    arr = arr.astype(np.float64)
    if not np.isin(arr, (0, full)).all():
        warnings.warn(f"mask {path.name} is not binary; binarizing at half intensity", stacklevel=3)
    return (arr >= 0.5 * full).astype(np.uint8)


def load_dataset(root: str | Path, split: Literal["train", "test"] = "train") -> list[ImageSample]:
    """Load filename-matched image/mask pairs.

    ``root`` may either hold ``images/`` and ``masks/`` directly or contain
    per-split subdirectories (``root/train/images`` ...).
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    base = _split_root(Path(root), split)
    img_dir, mask_dir = base / "images", base / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory: {d}")

    images = {p.stem: p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
    orphans = sorted(images.keys() - masks.keys())
    if orphans:
        raise DatasetError(f"image {images[orphans[0]].name} has no matching mask in {mask_dir}")
    orphans = sorted(masks.keys() - images.keys())
    if orphans:
        raise DatasetError(f"mask {masks[orphans[0]].name} has no matching image in {img_dir}")

    samples = []
    for stem in sorted(images):
        image = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.float32) / 255.0
        mask = _read_mask(masks[stem])
        samples.append(ImageSample(stem, image, mask, "disk"))
    return samples


def write_dataset(samples: Sequence[ImageSample], root: str | Path) -> None:
    """Write samples in the ``images/`` + ``masks/`` layout as 8-bit PNGs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(np.floor(s.image * 255.0 + 0.5), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{s.id}.png")


# --------------------------------------------------------------------------- synthetic corpus


def _random_blob(rng: np.random.Generator, canvas: int, boundary_noise: float) -> Blob:
    cy, cx = rng.uniform(0.25, 0.75, size=2) * canvas
    a, b = rng.uniform(0.08, 0.22, size=2) * canvas
    theta = rng.uniform(0, math.pi)
    harmonics: tuple = ()
    if boundary_noise > 0:
        ks = np.arange(2, 7)
        amps = rng.uniform(-1, 1, size=ks.size)
        amps /= np.abs(amps).sum()  # peak jitter is bounded by boundary_noise
        phases = rng.uniform(0, 2 * math.pi, size=ks.size)
        harmonics = tuple(
            (int(k), float(boundary_noise * am), float(ph)) for k, am, ph in zip(ks, amps, phases)
        )
    return Blob(float(cy), float(cx), float(a), float(b), float(theta), harmonics)


def blob_mask(blob: Blob, shape: tuple[int, int]) -> np.ndarray:
    """Pixel-centre support of one (optionally perturbed) ellipse."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy + 0.5 - blob.cy, xx + 0.5 - blob.cx
    c, s = math.cos(blob.theta), math.sin(blob.theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    phi = np.arctan2(v, u)
    # polar radius of the ellipse in direction phi
    radius = blob.a * blob.b / np.sqrt((blob.b * np.cos(phi)) ** 2 + (blob.a * np.sin(phi)) ** 2)
    for k, amp, ph in blob.harmonics:
        radius = radius + amp * np.cos(k * phi + ph)
    return (np.hypot(u, v) <= radius).astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    sigmas = (sigma, sigma) + (0,) * (len(shape) - 2)
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigmas, mode="wrap")
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def synthesize_one(
    rng: np.random.Generator, synth: SynthSpec
) -> tuple[np.ndarray, np.ndarray, list[Blob]]:
    n = synth.canvas
    lo, hi = synth.blob_count_range
    blobs = [_random_blob(rng, n, synth.boundary_noise) for _ in range(rng.integers(lo, hi + 1))]
    mask = np.zeros((n, n), dtype=np.uint8)
    for blob in blobs:
        mask |= blob_mask(blob, (n, n))

    lo_level = 0.5 - synth.contrast / 2
    intensity = lo_level + synth.contrast * mask.astype(np.float64)
    if synth.edge_blur > 0:
        intensity = ndimage.gaussian_filter(intensity, synth.edge_blur, mode="nearest")
    image = np.repeat(intensity[..., None], 3, axis=2)
    if synth.texture_noise > 0:
        smooth = _smooth_noise(rng, (n, n, 3), sigma=n / 32)
        fine = rng.uniform(-1, 1, size=(n, n, 3))
        image = image + synth.texture_noise * (0.7 * smooth + 0.3 * fine)
    return np.clip(image, 0, 1).astype(np.float32), mask, blobs


def generate_synthetic(synth: SynthSpec, prefix: str = "synth") -> list[ImageSample]:
    """Deterministic corpus of textured blob images; sample i depends only on (seed, i)."""
    synth.validate()
    out = []
    for i in range(synth.count):
        rng = np.random.default_rng([synth.seed, i])
        image, mask, _ = synthesize_one(rng, synth)
        out.append(ImageSample(f"{prefix}_{i:05d}", image, mask, "synthetic"))
    return out


def write_synthetic(
    root: str | Path, train: SynthSpec, test_count: int = 0
) -> dict[str, list[ImageSample]]:
    """Write ``train/`` (and optionally ``test/``) splits plus ``provenance.json``."""
    root = Path(root)
    splits = {"train": generate_synthetic(train, prefix="train")}
    if test_count > 0:
        test_synth = SynthSpec(**{**asdict(train), "count": test_count, "seed": train.seed + 1_000_003})
        splits["test"] = generate_synthetic(test_synth, prefix="test")
    for name, samples in splits.items():
        write_dataset(samples, root / name)
    prov = {"generator": asdict(train), "test_count": test_count, "test_seed_offset": 1_000_003}
    (root / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True))
    return splits


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugParams:
    hflip: bool = False
    vflip: bool = False
    scale: float = 1.0

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        return scaled_size(h, self.scale), scaled_size(w, self.scale)


IDENTITY_AUG = AugParams()


def scaled_size(n: int, scale: float) -> int:
    return int(math.floor(n * scale + 0.5))


def draw_augmentation(seed: int) -> AugParams:
    rng = np.random.default_rng(seed)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    scale = float(SCALES[rng.integers(len(SCALES))])
    return AugParams(hflip, vflip, scale)


def _resize(arr: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    """Resize an H x W x C array (channel-last) with torch's interpolators."""
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]
    if mode == "bilinear":
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    else:
        t = F.interpolate(t, size=size, mode="nearest-exact")
    return t[0].permute(1, 2, 0).numpy()


def apply_augmentation(sample: ImageSample, params: AugParams) -> ImageSample:
    image, mask = sample.image, sample.mask
    if params.hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if params.vflip:
        image, mask = image[::-1], mask[::-1]
    if params.scale != 1.0:
        size = params.output_shape(*sample.shape)
        image = np.clip(_resize(image.astype(np.float32), size, "bilinear"), 0, 1)
        mask = _resize(mask[..., None].astype(np.float32), size, "nearest")[..., 0]
        mask = (mask > 0.5).astype(np.uint8)
    return ImageSample(
        sample.id, np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask), sample.source
    )


def augment(sample: ImageSample, seed: int) -> ImageSample:
    """Random h/v flips (p=0.5 each) and one scale from {0.75, 1.0, 1.25}."""
    return apply_augmentation(sample, draw_augmentation(seed))


def augment_features(features: torch.Tensor, params: AugParams, size: tuple[int, int]) -> torch.Tensor:
    """Carry a ``(..., C, h, w)`` feature map through the same geometric transform.

    Flips are exact; the scale change is a bilinear resize to ``size`` (the
    student's bottleneck size for the augmented image).
    """
    if params.hflip:
        features = features.flip(-1)
    if params.vflip:
        features = features.flip(-2)
    if tuple(features.shape[-2:]) != tuple(size):
        lead = features.shape[:-3]
        flat = features.reshape(-1, *features.shape[-3:])
        flat = F.interpolate(flat, size=size, mode="bilinear", align_corners=False, antialias=True)
        features = flat.reshape(*lead, *flat.shape[-3:])
    return features


# --------------------------------------------------------------------------- region masking


def region_split(sample: ImageSample) -> RegionPair:
    m = sample.mask.astype(sample.image.dtype)[..., None]
    polyp = m * sample.image
    # where m is 0 the original pixel survives untouched, so the halves sum exactly
    nonpolyp = (1 - m) * sample.image
    return RegionPair(polyp, nonpolyp)
