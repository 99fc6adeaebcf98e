"""Radial low/high frequency decomposition of feature maps.

All functions operate on torch tensors whose two trailing axes are spatial
(``(..., H, W)``), transform each leading channel independently and are
differentiable.  The DFT is unitary (``norm="ortho"``) with the zero-frequency
bin shifted to index ``(H // 2, W // 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

IMAG_DISCARD_TOL = 1e-6
IMAG_ERROR_TOL = 1e-4
DEFAULT_CUTOFF = 0.25


class FrequencyError(ValueError):
    pass


@dataclass
class BandMasks:
    low: torch.Tensor  # H x W in {0, 1}
    high: torch.Tensor
    cutoff_ratio: float

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.low.shape)


@dataclass
class FrequencyBands:
    low_spatial: torch.Tensor
    high_spatial: torch.Tensor


def dft2(features: torch.Tensor) -> torch.Tensor:
    """Centred, unitary per-channel 2D DFT over the last two axes."""
    if features.shape[-1] < 2 or features.shape[-2] < 2:
        raise FrequencyError(f"spatial dims must be >= 2, got {tuple(features.shape[-2:])}")
    if not torch.isfinite(features).all():
        raise FrequencyError("non-finite values in dft2 input")
    spectrum = torch.fft.fft2(features, norm="ortho")
    return torch.fft.fftshift(spectrum, dim=(-2, -1))


def idft2(spectrum: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`dft2`; returns a complex tensor."""
    return torch.fft.ifft2(torch.fft.ifftshift(spectrum, dim=(-2, -1)), norm="ortho")


def make_masks(h: int, w: int, cutoff_ratio: float = DEFAULT_CUTOFF) -> BandMasks:
    """Complementary binary masks; low keeps bins with normalized radius <= cutoff."""
    if not 0 < cutoff_ratio < 1:
        raise FrequencyError(f"cutoff_ratio must lie in (0, 1), got {cutoff_ratio}")
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    r2 = ((u[:, None] / (h / 2)) ** 2 + (v[None, :] / (w / 2)) ** 2) / 2
    # compare squared radii; bins exactly on the cutoff circle count as low
    low = r2 <= cutoff_ratio**2 * (1 + 1e-12)
    low_t = torch.from_numpy(low.astype(np.float64))
    return BandMasks(low_t, 1.0 - low_t, float(cutoff_ratio))


def split_bands(features: torch.Tensor, masks: BandMasks) -> FrequencyBands:
    if tuple(features.shape[-2:]) != masks.shape:
        raise FrequencyError(
            f"mask shape {masks.shape} does not match features {tuple(features.shape[-2:])}"
        )
    spectrum = dft2(features)
    low_m = masks.low.to(dtype=features.dtype, device=features.device)
    high_m = masks.high.to(dtype=features.dtype, device=features.device)
    bands = []
    scale = max(1.0, float(features.detach().abs().max()))
    for m in (low_m, high_m):
        z = idft2(spectrum * m)
        resid = float(z.imag.detach().abs().max()) / scale
        if resid > IMAG_ERROR_TOL:
            raise FrequencyError(f"imaginary residue {resid:.2e}: band mask is not point-symmetric")
        bands.append(z.real)
    return FrequencyBands(*bands)
