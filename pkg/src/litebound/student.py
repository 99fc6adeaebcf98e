"""Lightweight U-Net student with four bottleneck latent heads.

Tensors are NCHW.  With the default ``width=64`` the encoder pyramid has the
channel counts 64/128/256/512; desk-scale runs shrink ``width`` to fit a CPU.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class EncoderPyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


class LatentQuartet(NamedTuple):
    L1: torch.Tensor
    L2: torch.Tensor
    L3: torch.Tensor
    L4: torch.Tensor

    @property
    def semantic_pair(self):
        return self.L1, self.L2

    @property
    def boundary_pair(self):
        return self.L3, self.L4


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    """Four double-conv + max-pool stages; ``f_i`` lives at ``1/2**i`` resolution."""

    def __init__(self, width: int = 64, in_channels: int = 3):
        super().__init__()
        self.channels = (width, 2 * width, 4 * width, 8 * width)
        cins = (in_channels,) + self.channels[:-1]
        self.stages = nn.ModuleList(DoubleConv(ci, co) for ci, co in zip(cins, self.channels))

    def forward(self, x: torch.Tensor) -> EncoderPyramid:
        feats = []
        for stage in self.stages:
            x = F.max_pool2d(stage(x), 2)
            feats.append(x)
        return EncoderPyramid(*feats)


class LatentHeads(nn.Module):
    """L1 = 1x1 conv(f4); L2, L3, L4 = 3x3 conv of the previous latent."""

    def __init__(self, in_channels: int, depth: int):
        super().__init__()
        self.l1 = nn.Conv2d(in_channels, depth, 1)
        self.l2 = nn.Conv2d(depth, depth, 3, padding=1)
        self.l3 = nn.Conv2d(depth, depth, 3, padding=1)
        self.l4 = nn.Conv2d(depth, depth, 3, padding=1)

    def forward(self, f4: torch.Tensor) -> LatentQuartet:
        l1 = self.l1(f4)
        l2 = self.l2(l1)
        l3 = self.l3(l2)
        l4 = self.l4(l3)
        return LatentQuartet(l1, l2, l3, l4)


class BoundaryAwareDecoder(nn.Module):
    """U-Net decoder that fuses [L1; L3] at the bottleneck and [L2; L4] one stage up."""

    def __init__(self, channels: tuple[int, int, int, int], depth: int):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.fuse = DoubleConv(c4 + 2 * depth, c4)
        self.up1 = nn.ConvTranspose2d(c4, c3, 2, stride=2)
        self.dec1 = DoubleConv(c3 + c3 + 2 * depth, c3)
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.dec2 = DoubleConv(c2 + c2, c2)
        self.up3 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.dec3 = DoubleConv(c1 + c1, c1)
        half = max(c1 // 2, 1)
        self.up4 = nn.ConvTranspose2d(c1, half, 2, stride=2)
        self.dec4 = DoubleConv(half, half)
        self.head = nn.Conv2d(half, 1, 1)

    def forward(self, pyr: EncoderPyramid, lat: LatentQuartet) -> torch.Tensor:
        """Return logits at the input resolution (2x the size of ``f1``)."""
        if lat.L1.shape[-2:] != pyr.f4.shape[-2:]:
            raise ValueError(f"latents {tuple(lat.L1.shape)} do not match f4 {tuple(pyr.f4.shape)}")
        x = self.fuse(torch.cat([pyr.f4, lat.L1, lat.L3], dim=1))
        x = self.up1(x)
        guide = F.interpolate(
            torch.cat([lat.L2, lat.L4], dim=1), size=x.shape[-2:], mode="bilinear", align_corners=False
        )
        x = self.dec1(torch.cat([x, pyr.f3, guide], dim=1))
        x = self.dec2(torch.cat([self.up2(x), pyr.f2], dim=1))
        x = self.dec3(torch.cat([self.up3(x), pyr.f1], dim=1))
        x = self.dec4(self.up4(x))
        return self.head(x)


class Student(nn.Module):
    """Encoder -> latent heads -> boundary-aware decoder.

    Inference needs only the image: no teacher, no mask.
    """

    def __init__(self, width: int = 64, depth: int = 64, in_channels: int = 3):
        super().__init__()
        self.width = width
        self.depth = depth
        self.encoder = Encoder(width, in_channels)
        self.heads = LatentHeads(self.encoder.channels[-1], depth)
        self.decoder = BoundaryAwareDecoder(self.encoder.channels, depth)

    def encode(self, image: torch.Tensor) -> EncoderPyramid:
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} is not divisible by 16")
        return self.encoder(image)

    def latent_heads(self, f4: torch.Tensor) -> LatentQuartet:
        return self.heads(f4)

    def decode(self, pyr: EncoderPyramid, lat: LatentQuartet) -> torch.Tensor:
        return torch.sigmoid(self.decoder(pyr, lat))

    def forward_logits(self, image: torch.Tensor) -> tuple[torch.Tensor, LatentQuartet]:
        pyr = self.encode(image)
        lat = self.heads(pyr.f4)
        return self.decoder(pyr, lat), lat

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, LatentQuartet]:
        logits, lat = self.forward_logits(image)
        return torch.sigmoid(logits), lat

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "heads": list(self.heads.parameters()),
            "decoder": list(self.decoder.parameters()),
        }


BACKBONES = {"unet": Student}


def build_student(backbone: str = "unet", **kwargs) -> Student:
    try:
        cls = BACKBONES[backbone]
    except KeyError:
        raise ValueError(f"unknown backbone {backbone!r}; available: {sorted(BACKBONES)}") from None
    return cls(**kwargs)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
