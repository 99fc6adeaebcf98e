"""Frozen teacher banks and distillation-target construction.

A teacher is anything with a ``teacher_id``, a fixed ``channels`` count and a
``__call__(image) -> H_i x W_i x C_i`` array.  Real foundation-model features
can be wrapped with :class:`FunctionTeacher` or written straight into the
feature cache; the mock teachers below let the whole pipeline run on a CPU.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import ImageSample, region_split

# Reserved projection seed meaning "identity map" (requires D == C_total).
IDENTITY_SEED = 2**64 - 1


class TeacherError(RuntimeError):
    pass


class Teacher(Protocol):
    teacher_id: str
    channels: int

    def __call__(self, image: np.ndarray) -> np.ndarray: ...

    def fingerprint(self) -> str: ...


@dataclass
class AggregatedFeatures:
    features: np.ndarray  # H' x W' x C_total
    component_channels: list[tuple[str, int]]

    @property
    def channels(self) -> int:
        return self.features.shape[-1]


@dataclass
class BoundaryFeatures:
    features: np.ndarray  # H' x W' x C_total


@dataclass
class DistillTarget:
    semantic: np.ndarray  # H' x W' x D, float32
    boundary: np.ndarray
    projection_seed: int

    @property
    def width(self) -> int:
        return self.semantic.shape[-1]


# --------------------------------------------------------------------------- teachers


class FunctionTeacher:
    """Wrap a plain callable ``image -> H_i x W_i x C_i`` as a teacher."""

    def __init__(self, teacher_id: str, fn: Callable[[np.ndarray], np.ndarray], channels: int, tag: str = ""):
        self.teacher_id = teacher_id
        self.fn = fn
        self.channels = channels
        self.tag = tag

    def __call__(self, image):
        return np.asarray(self.fn(image), dtype=np.float64)

    def fingerprint(self) -> str:
        return f"function:{self.teacher_id}:{self.channels}:{self.tag}"


def _gray(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def _avg_pool(arr: np.ndarray, k: int) -> np.ndarray:
    h, w = arr.shape[0] // k * k, arr.shape[1] // k * k
    arr = arr[:h, :w]
    return arr.reshape(h // k, k, w // k, k, *arr.shape[2:]).mean(axis=(1, 3))


class IntensityPyramidTeacher:
    """Semantic proxy: Gaussian-blurred colour channels at three scales.

    Linear and bias-free: blurring and pooling commute with addition.
    """

    teacher_id = "intensity_pyramid"

    def __init__(self, sigmas: Sequence[float] = (1.0, 2.0, 4.0), stride: int = 4, gain: float = 4.0):
        self.sigmas = tuple(sigmas)
        self.stride = stride
        self.gain = gain
        self.channels = 3 * len(self.sigmas)

    def __call__(self, image):
        img = image.astype(np.float64)
        levels = [ndimage.gaussian_filter(img, sigma=(s, s, 0), mode="constant") for s in self.sigmas]
        return self.gain * _avg_pool(np.concatenate(levels, axis=2), self.stride)

    def fingerprint(self):
        return f"{self.teacher_id}:sigmas={self.sigmas}:stride={self.stride}:gain={self.gain}"


class EdgeBankTeacher:
    """Boundary proxy: rectified oriented derivative-of-Gaussian responses."""

    teacher_id = "edge_bank"

    def __init__(
        self, orientations: int = 4, sigmas: Sequence[float] = (1.0, 2.0), stride: int = 4, gain: float = 8.0
    ):
        self.orientations = orientations
        self.sigmas = tuple(sigmas)
        self.stride = stride
        self.gain = gain
        self.channels = orientations * len(self.sigmas)

    def __call__(self, image):
        g = _gray(image)
        maps = []
        for s in self.sigmas:
            gy = ndimage.gaussian_filter(g, s, order=(1, 0), mode="constant")
            gx = ndimage.gaussian_filter(g, s, order=(0, 1), mode="constant")
            for k in range(self.orientations):
                t = np.pi * k / self.orientations
                maps.append(np.abs(np.cos(t) * gx + np.sin(t) * gy) * s)
        return self.gain * _avg_pool(np.stack(maps, axis=2), self.stride)

    def fingerprint(self):
        return (
            f"{self.teacher_id}:orient={self.orientations}:sigmas={self.sigmas}"
            f":stride={self.stride}:gain={self.gain}"
        )


class RandomConvTeacher:
    """Generic proxy: seeded, frozen two-layer strided conv stack with ReLU."""

    teacher_id = "random_conv"

    def __init__(self, channels: int = 16, seed: int = 0, gain: float = 1.0):
        self.channels = channels
        self.seed = seed
        self.gain = gain
        g = torch.Generator().manual_seed(seed)
        # He-style init, float64 so outputs do not depend on float32 kernels
        self.w1 = torch.randn(channels, 3, 3, 3, generator=g, dtype=torch.float64) * (2 / 27) ** 0.5
        self.w2 = torch.randn(channels, channels, 3, 3, generator=g, dtype=torch.float64) * (
            2 / (9 * channels)
        ) ** 0.5

    @torch.no_grad()
    def __call__(self, image):
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
        x = F.relu(F.conv2d(x - 0.5, self.w1, stride=2, padding=1))
        x = F.relu(F.conv2d(x, self.w2, stride=2, padding=1))
        return self.gain * x[0].permute(1, 2, 0).numpy()

    def fingerprint(self):
        return f"{self.teacher_id}:channels={self.channels}:seed={self.seed}:gain={self.gain}"


MOCK_TEACHERS: dict[str, Callable[[], Teacher]] = {
    "intensity_pyramid": IntensityPyramidTeacher,
    "edge_bank": EdgeBankTeacher,
    "random_conv": RandomConvTeacher,
}


class TeacherBank:
    """Teachers ordered lexicographically by ``teacher_id``."""

    def __init__(self, teachers: Iterable[Teacher]):
        teachers = sorted(teachers, key=lambda t: t.teacher_id)
        if not teachers:
            raise TeacherError("teacher bank is empty")
        ids = [t.teacher_id for t in teachers]
        if len(set(ids)) != len(ids):
            raise TeacherError(f"duplicate teacher ids in bank: {ids}")
        self.teachers = teachers

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "TeacherBank":
        unknown = [n for n in names if n not in MOCK_TEACHERS]
        if unknown:
            raise TeacherError(f"unknown teachers {unknown}; available: {sorted(MOCK_TEACHERS)}")
        return cls(MOCK_TEACHERS[n]() for n in names)

    def __iter__(self):
        return iter(self.teachers)

    def __len__(self):
        return len(self.teachers)

    @property
    def channels(self) -> int:
        return sum(t.channels for t in self.teachers)

    def fingerprint(self) -> bytes:
        text = "|".join(t.fingerprint() for t in self.teachers)
        return hashlib.sha256(text.encode()).digest()


def default_bank() -> TeacherBank:
    return TeacherBank.from_names(MOCK_TEACHERS)


# --------------------------------------------------------------------------- extraction


def _resize_hw(feat: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if feat.shape[:2] == tuple(size):
        return feat
    t = torch.from_numpy(np.ascontiguousarray(feat, dtype=np.float64)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    return t[0].permute(1, 2, 0).numpy()


def extract_semantic(
    bank: TeacherBank | Sequence[Teacher], image: np.ndarray, size: tuple[int, int] | None = None
) -> AggregatedFeatures:
    """Resize every teacher map to ``size`` and concatenate along channels."""
    if not isinstance(bank, TeacherBank):
        bank = TeacherBank(bank)
    if size is None:
        size = (image.shape[0] // 16, image.shape[1] // 16)
    parts, comps = [], []
    for t in bank:
        try:
            out = np.asarray(t(image), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - rewrapped with the teacher name
            raise TeacherError(f"teacher {t.teacher_id!r} failed: {exc}") from exc
        if out.ndim != 3 or out.shape[2] != t.channels:
            raise TeacherError(
                f"teacher {t.teacher_id!r} returned shape {out.shape}, expected {t.channels} channels"
            )
        parts.append(_resize_hw(out, size))
        comps.append((t.teacher_id, t.channels))
    return AggregatedFeatures(np.concatenate(parts, axis=2), comps)


def cross_attention(
    f_polyp: np.ndarray, f_nonpolyp: np.ndarray, return_weights: bool = False
):
    """Single-head attention: keys from ``f_polyp``; queries and values from ``f_nonpolyp``."""
    if f_polyp.shape != f_nonpolyp.shape:
        raise ValueError(f"shape mismatch {f_polyp.shape} vs {f_nonpolyp.shape}")
    h, w, c = f_nonpolyp.shape
    q = f_nonpolyp.reshape(h * w, c).astype(np.float64)
    k = f_polyp.reshape(h * w, c).astype(np.float64)
    scores = q @ k.T / np.sqrt(c)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    out = (weights @ q).reshape(h, w, c)
    return (out, weights) if return_weights else out


def region_features(
    bank: TeacherBank | Sequence[Teacher], sample: ImageSample, size: tuple[int, int] | None = None
) -> tuple[AggregatedFeatures, AggregatedFeatures]:
    pair = region_split(sample)
    return extract_semantic(bank, pair.polyp_input, size), extract_semantic(bank, pair.nonpolyp_input, size)


def extract_boundary(
    bank: TeacherBank | Sequence[Teacher], sample: ImageSample, size: tuple[int, int] | None = None
) -> BoundaryFeatures:
    f_polyp, f_nonpolyp = region_features(bank, sample, size)
    return BoundaryFeatures(cross_attention(f_polyp.features, f_nonpolyp.features))


# --------------------------------------------------------------------------- projection


def projection_matrix(c: int, d: int, seed: int) -> np.ndarray:
    """Seeded ``c x d`` map with orthonormal columns (d <= c) or rows (d > c)."""
    if d < 1:
        raise ValueError("distillation width must be >= 1")
    if seed == IDENTITY_SEED:
        if c != d:
            raise ValueError(f"identity projection needs D == C_total ({d} != {c})")
        return np.eye(c)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((max(c, d), min(c, d)))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))  # unique QR: positive diagonal
    return q if d <= c else q.T


def project_targets(
    semantic: AggregatedFeatures, boundary: BoundaryFeatures, d: int, seed: int
) -> DistillTarget:
    if semantic.features.shape != boundary.features.shape:
        raise ValueError("semantic and boundary features differ in shape")
    p = projection_matrix(semantic.channels, d, seed)
    sem = (semantic.features @ p).astype(np.float32)
    bnd = (boundary.features @ p).astype(np.float32)
    return DistillTarget(sem, bnd, seed)


def compute_target(
    bank: TeacherBank, sample: ImageSample, d: int, seed: int, size: tuple[int, int] | None = None
) -> DistillTarget:
    sem = extract_semantic(bank, sample.image, size)
    bnd = extract_boundary(bank, sample, size)
    return project_targets(sem, bnd, d, seed)
