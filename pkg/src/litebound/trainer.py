"""Three-phase training: segmentation pretraining, joint distillation, encoder-frozen refinement."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import featcache
from .config import RunConfig
from .data import IDENTITY_AUG, AugParams, ImageSample, apply_augmentation, augment_features, draw_augmentation
from .frequency import BandMasks, make_masks
from .inference import DTYPES, build_model, latest_checkpoint, pad_to_multiple, to_tensor
from .losses import LATENT_KEYS, LossBreakdown, PhaseConfig, assemble_targets, phase_loss
from .student import Student
from .teachers import DistillTarget, TeacherBank, TeacherError, compute_target

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "bce", "dice", "l1", "l2", "l3", "l4", "total")


class TrainingError(RuntimeError):
    pass


class MissingCacheError(TrainingError):
    pass


@dataclass
class RunState:
    phase: int
    epoch: int
    checkpoint: Path | None
    seed: int
    log_path: Path
    steps: int = 0


@dataclass
class CacheSummary:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    def __str__(self):
        s = f"cache: {len(self.written)} written, {len(self.skipped)} up to date, {len(self.failed)} failed"
        if self.failed:
            s += "\n" + "\n".join(f"  {k}: {v}" for k, v in sorted(self.failed.items()))
        return s


# --------------------------------------------------------------------------- teacher cache


def precompute_cache(
    bank: TeacherBank, samples: Sequence[ImageSample], cache_dir: str | Path, depth: int, seed: int
) -> CacheSummary:
    """Write one target file per sample; valid existing entries are left alone."""
    fp = bank.fingerprint()
    summary = CacheSummary()
    for s in samples:
        if featcache.is_valid_entry(cache_dir, s.id, fp, depth, seed):
            summary.skipped.append(s.id)
            continue
        try:
            target = compute_target(bank, s, depth, seed)
        except TeacherError as exc:
            summary.failed[s.id] = str(exc)
            log.warning("teacher failure on %s: %s", s.id, exc)
            continue
        featcache.cache_write(cache_dir, s.id, target, fp)
        summary.written.append(s.id)
    return summary


class TargetStore:
    """In-memory view of the cached targets for one run."""

    def __init__(self, cache_dir: str | Path, fingerprint: bytes, ids: Sequence[str], depth: int, seed: int):
        missing = [i for i in ids if not featcache.entry_path(cache_dir, i).exists()]
        if missing:
            raise MissingCacheError(
                f"{len(missing)} samples have no cached targets (run `cache` first): "
                + ", ".join(missing[:20])
                + (" ..." if len(missing) > 20 else "")
            )
        self.targets: dict[str, DistillTarget] = {}
        for i in ids:
            t = featcache.cache_read(cache_dir, i, fingerprint)
            if t.width != depth or t.projection_seed != seed:
                raise featcache.StaleCacheError(
                    f"cache entry {i} has D={t.width}, seed={t.projection_seed}; expected D={depth}, seed={seed}; rerun `cache`"
                )
            self.targets[i] = t

    def tensors(self, sample_id: str, dtype) -> tuple[torch.Tensor, torch.Tensor]:
        t = self.targets[sample_id]
        sem = torch.from_numpy(t.semantic).permute(2, 0, 1).to(dtype)
        bnd = torch.from_numpy(t.boundary).permute(2, 0, 1).to(dtype)
        return sem, bnd


# --------------------------------------------------------------------------- training log


class TrainingLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    def reset(self, keep_phases_below: int = 1) -> None:
        rows = [r for r in self.read() if int(r["phase"]) < keep_phases_below] if self.path.exists() else []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in rows:
                w.writerow([r[k] for k in LOG_FIELDS])

    def append(self, epoch: int, phase: int, bd: LossBreakdown) -> None:
        row = bd.row()
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, phase] + [repr(float(row[k])) for k in LOG_FIELDS[2:]])

    def read(self) -> list[dict]:
        with open(self.path, newline="") as fh:
            return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- one phase


def _set_trainable(model: Student, phase: PhaseConfig) -> list[torch.nn.Parameter]:
    frozen = phase.trainable == "decoder_and_heads_only"
    for p in model.encoder.parameters():
        p.requires_grad_(not frozen)
    model.train()
    if frozen:
        model.encoder.eval()  # running BN statistics stay frozen too
    return [p for p in model.parameters() if p.requires_grad]


def _assert_encoder_excluded(model: Student, optimizer: torch.optim.Optimizer) -> None:
    enc = {id(p) for p in model.encoder.parameters()}
    in_opt = {id(p) for g in optimizer.param_groups for p in g["params"]}
    if enc & in_opt:
        raise TrainingError("phase 3 optimizer still holds encoder parameters")


class _BandMaskCache(dict):
    def __init__(self, cutoff: float):
        super().__init__()
        self.cutoff = cutoff

    def __missing__(self, hw) -> BandMasks:
        m = self[hw] = make_masks(hw[0], hw[1], self.cutoff)
        return m


def _batch_loss(
    model: Student,
    phase: PhaseConfig,
    batch: list[tuple[ImageSample, AugParams]],
    store: TargetStore | None,
    band_masks: _BandMaskCache,
    dtype,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Loss of a batch whose samples may differ in size; equal sizes share a forward pass."""
    groups: dict[tuple[int, int], list] = defaultdict(list)
    for sample, params in batch:
        aug = apply_augmentation(sample, params)
        groups[aug.shape].append((sample, params, aug))
    n = len(batch)
    total = None
    acc = defaultdict(float)
    for members in groups.values():
        x = to_tensor([a.image for _, _, a in members], dtype)
        gt = torch.from_numpy(np.stack([a.mask for _, _, a in members])).to(dtype)[:, None]
        h, w = x.shape[-2:]
        prob, lat = model(pad_to_multiple(x))
        prob = prob[..., :h, :w]
        targets = None
        if phase.uses_distillation:
            size = tuple(lat.L1.shape[-2:])
            sem, bnd = zip(*(store.tensors(s.id, dtype) for s, _, _ in members))
            sem = torch.stack([augment_features(t, m[1], size) for t, m in zip(sem, members)])
            bnd = torch.stack([augment_features(t, m[1], size) for t, m in zip(bnd, members)])
            targets = assemble_targets(sem, bnd, band_masks[size])
        loss, bd = phase_loss(phase, prob, gt, lat, targets)
        wgt = len(members) / n
        total = wgt * loss if total is None else total + wgt * loss
        acc["bce"] += wgt * bd.bce
        acc["dice"] += wgt * bd.dice
        for k in LATENT_KEYS:
            acc[k] += wgt * bd.align[k]
    bd = LossBreakdown(acc["bce"], acc["dice"], {k: acc[k] for k in LATENT_KEYS}, total.item())
    return total, bd


def _dump_diagnostic(run_dir: Path, phase: PhaseConfig, epoch: int, ids: list[str], bd: LossBreakdown) -> Path:
    path = run_dir / "diagnostic.json"
    path.write_text(
        json.dumps({"phase": phase.phase, "epoch": epoch, "batch": ids, "loss": bd.row()}, indent=2)
    )
    return path


def run_phase(
    phase: PhaseConfig,
    model: Student,
    samples: Sequence[ImageSample],
    store: TargetStore | None,
    *,
    run_dir: str | Path,
    seed: int = 0,
    augment: bool = True,
    cutoff_ratio: float = 0.25,
    lr_decay: float = 1.0,
    config: RunConfig | None = None,
) -> RunState:
    if phase.uses_distillation and store is None:
        raise MissingCacheError(f"phase {phase.phase} needs cached teacher targets (run `cache` first)")
    run_dir = Path(run_dir)
    tlog = TrainingLog(run_dir / "train_log.csv")
    if not tlog.path.exists():
        tlog.reset()
    dtype = next(model.parameters()).dtype
    params = _set_trainable(model, phase)
    optimizer = torch.optim.Adam(params, lr=phase.lr)
    if phase.phase == 3:
        _assert_encoder_excluded(model, optimizer)
    band_masks = _BandMaskCache(cutoff_ratio)

    n = len(samples)
    steps = 0
    for k, epoch in enumerate(phase.epochs):
        for g in optimizer.param_groups:
            g["lr"] = phase.lr * lr_decay**k
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        aug_seeds = rng.integers(0, 2**63 - 1, size=n)
        for start in range(0, n, phase.batch_size):
            idx = order[start : start + phase.batch_size]
            batch = [
                (samples[i], draw_augmentation(int(aug_seeds[i])) if augment else IDENTITY_AUG) for i in idx
            ]
            total, bd = _batch_loss(model, phase, batch, store, band_masks, dtype)
            if not math.isfinite(bd.total):
                path = _dump_diagnostic(run_dir, phase, epoch, [samples[i].id for i in idx], bd)
                raise TrainingError(f"non-finite loss in phase {phase.phase}, epoch {epoch}; see {path}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            tlog.append(epoch, phase.phase, bd)
            steps += 1
        log.info("phase %d epoch %d: last total %.5f", phase.phase, epoch, bd.total)

    ckpt = run_dir / "checkpoints" / f"phase{phase.phase}_epoch{phase.epoch_range[1]}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "phase": phase.phase,
            "epoch": phase.epoch_range[1],
            "seed": seed,
            "config": config.to_dict() if config else None,
            "config_fingerprint": config.fingerprint() if config else None,
        },
        ckpt,
    )
    for p in model.parameters():
        p.requires_grad_(True)
    return RunState(phase.phase, phase.epoch_range[1], ckpt, seed, tlog.path, steps)


# --------------------------------------------------------------------------- full protocol


def _configure_torch(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.train.threads)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.train.seed)


def train(
    cfg: RunConfig,
    run_dir: str | Path,
    samples: Sequence[ImageSample],
    *,
    distill: bool | None = None,
    start_phase: int = 1,
    phase1_only: bool = False,
) -> RunState:
    """Run the phases in order, resuming from the previous phase's checkpoint when ``start_phase > 1``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _configure_torch(cfg)
    model = build_model(cfg)
    phases = cfg.phases(distill=distill, phase1_only=phase1_only)

    tlog = TrainingLog(run_dir / "train_log.csv")
    if start_phase > 1:
        prev = latest_checkpoint(run_dir, start_phase - 1)
        if prev is None:
            raise TrainingError(f"phase {start_phase} needs a phase-{start_phase - 1} checkpoint in {run_dir}")
        ckpt = torch.load(prev, map_location="cpu", weights_only=False)
        if ckpt.get("config_fingerprint") != cfg.fingerprint():
            raise TrainingError(f"{prev} was produced by a different configuration")
        model.load_state_dict(ckpt["model"])
    tlog.reset(keep_phases_below=start_phase)

    store = None
    if any(p.uses_distillation for p in phases if p.phase >= start_phase):
        bank = TeacherBank.from_names(cfg.teachers.bank)
        store = TargetStore(
            run_dir / "cache",
            bank.fingerprint(),
            [s.id for s in samples],
            cfg.distill.width,
            cfg.distill.projection_seed,
        )

    state = None
    for phase in phases:
        if phase.phase < start_phase:
            continue
        state = run_phase(
            phase,
            model,
            samples,
            store if phase.uses_distillation else None,
            run_dir=run_dir,
            seed=cfg.train.seed,
            augment=cfg.train.augment,
            cutoff_ratio=cfg.cutoff_ratio,
            lr_decay=cfg.train.lr_decay,
            config=cfg,
        )
    cfg.dump(run_dir / "config.yaml")
    return state
