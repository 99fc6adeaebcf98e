"""Segmentation, latent-alignment and phase-composite losses.

Loss arithmetic is carried out in float64 regardless of the network dtype so
that logged totals recompose exactly from their logged components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .frequency import BandMasks, split_bands
from .student import LatentQuartet

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0
DEFAULT_LAMBDAS = (0.6, 0.1, 0.1, 0.1, 0.1)
LATENT_KEYS = ("L1", "L2", "L3", "L4")


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    bce: float
    dice: float
    align: dict[str, float] = field(default_factory=lambda: dict.fromkeys(LATENT_KEYS, 0.0))
    total: float = 0.0

    def row(self) -> dict[str, float]:
        return {
            "bce": self.bce,
            "dice": self.dice,
            **{k.lower(): self.align[k] for k in LATENT_KEYS},
            "total": self.total,
        }


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1) if x.dim() > 2 else x.reshape(1, -1)


def seg_loss(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean BCE and smoothed soft-Dice loss, each averaged over the batch.

    ``pred`` and ``gt`` are ``(B, 1, H, W)``, ``(B, H, W)`` or a single ``(H, W)``.
    """
    if pred.shape != gt.shape:
        raise LossError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = _per_sample(pred).double()
    g = _per_sample(gt).double()
    pc = p.clamp(BCE_EPS, 1 - BCE_EPS)
    bce = -(g * torch.log(pc) + (1 - g) * torch.log(1 - pc)).mean(dim=1)
    dice = 1 - (2 * (p * g).sum(dim=1) + DICE_SMOOTH) / (p.sum(dim=1) + g.sum(dim=1) + DICE_SMOOTH)
    return bce.mean(), dice.mean()


def align_loss(latent: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if latent.shape != target.shape:
        raise LossError(f"latent {tuple(latent.shape)} vs target {tuple(target.shape)}")
    return ((latent.double() - target.double()) ** 2).mean()


def assemble_targets(
    semantic: torch.Tensor, boundary: torch.Tensor, masks: BandMasks
) -> dict[str, torch.Tensor]:
    """Route frequency bands to latents: L1/L3 <- low band, L2/L4 <- high band.

    ``semantic`` and ``boundary`` are channel-first ``(..., D, H', W')`` tensors.
    """
    with torch.no_grad():
        sem = split_bands(semantic.detach(), masks)
        bnd = split_bands(boundary.detach(), masks)
    return {
        "L1": sem.low_spatial,
        "L2": sem.high_spatial,
        "L3": bnd.low_spatial,
        "L4": bnd.high_spatial,
    }


@dataclass(frozen=True)
class PhaseConfig:
    phase: int
    epoch_range: tuple[int, int]
    lambdas: tuple[float, float, float, float, float] = DEFAULT_LAMBDAS
    trainable: str = "all"  # or "decoder_and_heads_only"
    lr: float = 1e-4
    batch_size: int = 8
    distill: bool = True

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError(f"phase must be 1, 2 or 3, got {self.phase}")
        if len(self.lambdas) != 5:
            raise ValueError("lambda vector must have length 5")
        if self.phase == 3 and self.trainable != "decoder_and_heads_only":
            raise ValueError("phase 3 trains only the decoder and latent heads")
        lo, hi = self.epoch_range
        if lo > hi or lo < 1:
            raise ValueError(f"bad epoch range {self.epoch_range}")

    @property
    def epochs(self) -> range:
        return range(self.epoch_range[0], self.epoch_range[1] + 1)

    @property
    def uses_distillation(self) -> bool:
        return self.phase >= 2 and self.distill


def phase_loss(
    phase: PhaseConfig,
    pred: torch.Tensor,
    gt: torch.Tensor,
    latents: LatentQuartet | None = None,
    targets: dict[str, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    bce, dice = seg_loss(pred, gt)
    if not phase.uses_distillation:
        total = bce + dice
        return total, LossBreakdown(bce.item(), dice.item(), total=total.item())
    if targets is None or latents is None:
        raise LossError(f"phase {phase.phase} needs latents and distillation targets")
    lam = phase.lambdas
    terms = {k: align_loss(getattr(latents, k), targets[k]) for k in LATENT_KEYS}
    total = lam[0] * (bce + dice) + sum(w * terms[k] for w, k in zip(lam[1:], LATENT_KEYS))
    bd = LossBreakdown(bce.item(), dice.item(), {k: v.item() for k, v in terms.items()}, total.item())
    return total, bd


def recompose(row: dict[str, float], phase: PhaseConfig) -> float:
    """Recompute a logged total from its logged components."""
    if not phase.uses_distillation:
        return row["bce"] + row["dice"]
    lam = phase.lambdas
    return lam[0] * (row["bce"] + row["dice"]) + sum(
        w * row[k.lower()] for w, k in zip(lam[1:], LATENT_KEYS)
    )
