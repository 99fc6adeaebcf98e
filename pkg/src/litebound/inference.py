"""Checkpoint loading and teacher-free prediction."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import ImageSample
from .student import Student, build_student

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def pad_to_multiple(x: torch.Tensor, k: int = 16) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).to(dtype).contiguous()


def build_model(cfg: RunConfig) -> Student:
    return build_student(cfg.model.backbone, width=cfg.model.width, depth=cfg.distill.width).to(
        DTYPES[cfg.train.dtype]
    )


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> tuple[Student, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = cfg or RunConfig.from_dict(ckpt["config"])
    model = build_model(cfg)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt


def latest_checkpoint(run_dir: str | Path, phase: int | None = None) -> Path | None:
    ck_dir = Path(run_dir) / "checkpoints"
    phases = (phase,) if phase is not None else (3, 2, 1)
    for p in phases:
        found = sorted(ck_dir.glob(f"phase{p}_epoch*.ckpt"), key=lambda q: int(q.stem.split("epoch")[1]))
        if found:
            return found[-1]
    return None


@torch.no_grad()
def predict_image(model: Student, image: np.ndarray) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = to_tensor([image], dtype)
    h, w = x.shape[-2:]
    prob, _ = model(pad_to_multiple(x))
    return prob[0, 0, :h, :w].double().numpy()


def predict_samples(model: Student, samples: Sequence[ImageSample]) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    try:
        return [predict_image(model, s.image) for s in samples]
    finally:
        model.train(was_training)
