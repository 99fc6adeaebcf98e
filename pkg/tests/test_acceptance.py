"""Acceptance criteria 1-10.

Each test records a one-line PASS/FAIL verdict that the terminal summary
prints in criterion order (see ``conftest.pytest_terminal_summary``).
"""

from __future__ import annotations

import csv
import itertools
import time

import numpy as np
import pytest
import torch
import yaml

from conftest import random_sample, record
from desk import cached_run, fd_grad, rel_err
from litebound import featcache
from litebound.cli import main as cli_main
from litebound.config import RunConfig
from litebound.data import SynthSpec, augment, draw_augmentation, generate_synthetic, region_split
from litebound.frequency import dft2, idft2, make_masks, split_bands
from litebound.inference import build_model, load_checkpoint
from litebound.student import LatentQuartet
from litebound.losses import LATENT_KEYS, LossBreakdown, PhaseConfig, phase_loss, recompose
from litebound.metrics import (
    dice_iou_mae,
    e_measure_at,
    e_measure_max,
    evaluate,
    mean_band_dice,
    s_measure,
    weighted_fmeasure,
)
from litebound.teachers import (
    cross_attention,
    default_bank,
    extract_boundary,
    extract_semantic,
    project_targets,
    region_features,
)
from litebound.trainer import precompute_cache, train

LAMBDAS = (0.6, 0.1, 0.1, 0.1, 0.1)


def _corpus_8x8x16():
    # channel-first (D, H', W') views of 8 x 8 x 16 tensors
    return [
        torch.from_numpy(np.random.default_rng([2024, i]).standard_normal((8, 8, 16)).astype(np.float32)).permute(
            2, 0, 1
        )
        for i in range(100)
    ]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- 1


def test_c1_band_additivity():
    t0 = time.perf_counter()
    masks = make_masks(8, 8, 0.25)
    worst_err = worst_cross = 0.0
    for x in _corpus_8x8x16():
        b = split_bands(x, masks)
        worst_err = max(worst_err, float((b.low_spatial + b.high_spatial - x).abs().max()))
        worst_cross = max(worst_cross, abs(float((b.low_spatial.double() * b.high_spatial.double()).sum())))
    elapsed = time.perf_counter() - t0
    ok = worst_err < 1e-5 and worst_cross < 1e-4 and elapsed < 10
    record(1, ok, f"max |low+high-x| = {worst_err:.2e} (<1e-5), max cross-term = {worst_cross:.2e} (<1e-4), {elapsed:.2f}s (<10s)")
    assert ok


# --------------------------------------------------------------------------- 2


def test_c2_dft_round_trip():
    worst = 0.0
    for x in _corpus_8x8x16():
        worst = max(worst, float((idft2(dft2(x)).real - x).abs().max()))
    ok = worst < 1e-5
    record(2, ok, f"max |idft2(dft2(x)) - x| = {worst:.2e} (<1e-5)")
    assert ok


# --------------------------------------------------------------------------- 3


def _oracle(p_bits: int, g_bits: int) -> tuple[float, float, float]:
    tp = bin(p_bits & g_bits).count("1")
    npred, ngt = bin(p_bits).count("1"), bin(g_bits).count("1")
    wrong = bin(p_bits ^ g_bits).count("1")
    dice = 1.0 if npred + ngt == 0 else 2 * tp / (npred + ngt)
    union = npred + ngt - tp
    iou = 1.0 if union == 0 else tp / union
    return dice, iou, wrong / 9


def _blob(rng, n):
    yy, xx = np.mgrid[:n, :n]
    cy, cx = rng.uniform(n * 0.3, n * 0.7, 2)
    a, b = rng.uniform(n * 0.12, n * 0.3, 2)
    return (((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1).astype(np.uint8)


def test_c3_metric_oracles():
    t0 = time.perf_counter()
    masks = [np.array([(k >> i) & 1 for i in range(9)], dtype=np.uint8).reshape(3, 3) for k in range(512)]
    preds = [m.astype(np.float64) for m in masks]
    mismatches = 0
    for (pk, p), (gk, g) in itertools.product(enumerate(preds), enumerate(masks)):
        if dice_iou_mae(p, g) != _oracle(pk, gk):
            mismatches += 1

    rng = np.random.default_rng(77)
    worst_perfect = 0.0
    worst_sym = 0.0
    dominance_ok = True
    for _ in range(50):
        n = int(rng.integers(12, 40))
        g = _blob(rng, n)
        if not g.any():
            g[n // 2, n // 2] = 1
        perfect = g.astype(np.float64)
        for f in (weighted_fmeasure, s_measure, e_measure_max):
            worst_perfect = max(worst_perfect, abs(f(perfect, g) - 1.0))
        p = np.clip(g * 0.6 + 0.2 + rng.normal(0, 0.25, g.shape), 0, 1)
        worst_sym = max(
            worst_sym,
            abs(weighted_fmeasure(p, g) - weighted_fmeasure(p[:, ::-1], g[:, ::-1])),
            abs(weighted_fmeasure(p, g) - weighted_fmeasure(p[::-1], g[::-1])),
            abs(s_measure(p, g) - s_measure(np.rot90(p, 2), np.rot90(g, 2))),
        )
        dominance_ok &= e_measure_max(p, g) >= e_measure_at(p, g, 0.5)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_perfect <= 1e-6 and worst_sym <= 1e-12 and dominance_ok and elapsed < 120
    record(
        3,
        ok,
        f"{mismatches} oracle mismatches over 512x512 pairs; perfect-pred max |1-score| = {worst_perfect:.1e} (<=1e-6); "
        f"symmetry gap {worst_sym:.1e}; E max>=E(0.5): {dominance_ok}; {elapsed:.0f}s (<120s)",
    )
    assert ok


# --------------------------------------------------------------------------- 4


def test_c4_gradient_fidelity():
    t0 = time.perf_counter()
    torch.manual_seed(4)
    cfg = RunConfig.from_dict({"model": {"width": 4}, "distill": {"width": 8}, "train": {"dtype": "float64"}})
    model = build_model(cfg).train()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    gt = (torch.rand(2, 1, 16, 16) > 0.5).double()
    phase = PhaseConfig(2, (1, 1), lambdas=LAMBDAS)
    # A 16x16 input has a 1x1 bottleneck, below the 2x2 minimum of the DFT, so the
    # (gradient-free) alignment targets are fixed random tensors of the latent shape.
    targets = {k: torch.randn(2, 8, 1, 1, dtype=torch.float64) for k in LATENT_KEYS}

    logits, lat = model.forward_logits(x)
    leaf = logits.detach().clone().requires_grad_(True)
    lat_fixed = type(lat)(*(t.detach() for t in lat))

    def f_logits():
        return phase_loss(phase, torch.sigmoid(leaf), gt, lat_fixed, targets)[0]

    f_logits().backward()
    with torch.no_grad():
        err_logits = rel_err(leaf.grad.numpy(), fd_grad(f_logits, leaf))

    def f_model():
        prob, lt = model(x)
        return phase_loss(phase, prob, gt, lt, targets)[0]

    model.zero_grad()
    f_model().backward()
    errs = {}
    with torch.no_grad():
        for name, p in model.heads.named_parameters():
            errs[name] = rel_err(p.grad.numpy(), fd_grad(f_model, p))
    worst_name = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    ok = err_logits < 1e-3 and errs[worst_name] < 1e-3 and elapsed < 120
    n_el = sum(p.numel() for p in model.heads.parameters())
    record(
        4,
        ok,
        f"rel err logits {err_logits:.1e}, latent heads ({n_el} params) worst {errs[worst_name]:.1e} "
        f"[{worst_name}] (<1e-3); {elapsed:.0f}s (<120s)",
    )
    assert ok


# --------------------------------------------------------------------------- 5


def test_c5_loss_composition():
    rng = np.random.default_rng(5)
    phase = PhaseConfig(2, (1, 1), lambdas=LAMBDAS)
    worst = 0.0
    for _ in range(200):
        comp = rng.uniform(0, 5, 6)
        row = LossBreakdown(comp[0], comp[1], dict(zip(LATENT_KEYS, comp[2:]))).row()
        expected = 0.6 * (comp[0] + comp[1]) + 0.1 * comp[2:].sum()
        worst = max(worst, abs(recompose(row, phase) - expected))
    for _ in range(50):
        p = torch.from_numpy(rng.random((2, 1, 8, 8)))
        g = torch.from_numpy((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64))
        lat = LatentQuartet(*(torch.from_numpy(rng.standard_normal((2, 3, 4, 4))) for _ in range(4)))
        targets = {k: torch.from_numpy(rng.standard_normal((2, 3, 4, 4))) for k in LATENT_KEYS}
        total, bd = phase_loss(phase, p, g, lat, targets)
        expected = 0.6 * (bd.bce + bd.dice) + 0.1 * sum(bd.align.values())
        worst = max(worst, abs(total.item() - expected), abs(bd.total - expected))
    ok = worst <= 1e-9
    record(5, ok, f"max |total - (0.6(bce+dice) + 0.1 sum L_i)| = {worst:.1e} (<=1e-9)")
    assert ok


# --------------------------------------------------------------------------- 6


def test_c6_phase_protocol(tmp_path):
    samples = generate_synthetic(SynthSpec(count=24, canvas=128, seed=6), prefix="p")
    cfg = RunConfig.from_dict(
        {"model": {"width": 8}, "train": {"schedule_scale": 0.125, "batch_size": 8, "seed": 6}}
    )
    state = cached_run(cfg, tmp_path, samples)
    ck = tmp_path / "checkpoints"
    p2 = torch.load(ck / "phase2_epoch10.ckpt", weights_only=False)["model"]
    p3 = torch.load(ck / "phase3_epoch15.ckpt", weights_only=False)["model"]
    enc_keys = [k for k in p2 if k.startswith("encoder.")]
    enc_diff = sum(float((p3[k].double() - p2[k].double()).abs().sum()) for k in enc_keys)
    other_changed = any(not torch.equal(p2[k], p3[k]) for k in p2 if k.startswith(("heads.", "decoder.")))

    rows = _rows(state.log_path)
    phases = cfg.phases()
    worst = 0.0
    bounds_ok = len(rows) == 15 * 3
    last = (0, 0)
    for r in rows:
        ph, ep = int(r["phase"]), int(r["epoch"])
        lo, hi = phases[ph - 1].epoch_range
        bounds_ok &= lo <= ep <= hi and (ph, ep) >= last
        last = (ph, ep)
        vals = {k: float(r[k]) for k in ("bce", "dice", "l1", "l2", "l3", "l4", "total")}
        worst = max(worst, abs(recompose(vals, phases[ph - 1]) - vals["total"]))
    bounds_ok &= sorted(p.name for p in ck.iterdir()) == [
        "phase1_epoch5.ckpt",
        "phase2_epoch10.ckpt",
        "phase3_epoch15.ckpt",
    ]
    ok = enc_diff == 0 and other_changed and worst <= 1e-9 and bounds_ok
    record(
        6,
        ok,
        f"encoder |delta| over phase 3 = {enc_diff} ({len(enc_keys)} tensors); log recomposition max err {worst:.1e} "
        f"(<=1e-9); phase boundaries respected: {bounds_ok}",
    )
    assert ok


# --------------------------------------------------------------------------- 7


OVERFIT_CONFIG = {
    "data": {"train": "data/train"},
    "model": {"width": 16},
    "train": {
        "lr": 1e-3,
        "batch_size": 8,
        "augment": False,
        "schedule": [[1, 50], [51, 100], [101, 150]],
    },
}


def test_c7_overfit_sanity(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.chdir(tmp_path)
    assert cli_main(["synth", "--out", "data", "--count", "16", "--test-count", "0", "--canvas", "128", "--seed", "7"]) == 0
    (tmp_path / "overfit.yaml").write_text(yaml.safe_dump(OVERFIT_CONFIG))
    assert cli_main(["train", "--config", "overfit.yaml", "--out", "run", "--phase1-only"]) == 0
    epochs = max(int(r["epoch"]) for r in _rows(tmp_path / "run" / "train_log.csv"))
    assert cli_main(["eval", "--config", "overfit.yaml", "--out", "run", "--split", "train"]) == 0
    rows = _rows(tmp_path / "run" / "eval" / "report.csv")
    mdice = float(np.mean([float(r["mdice"]) for r in rows]))
    elapsed = time.perf_counter() - t0
    ok = mdice >= 0.95 and epochs <= 200 and len(rows) == 16 and elapsed < 600
    record(7, ok, f"train mDice {mdice:.4f} after {epochs} phase-1 epochs (>=0.95, <=200); {elapsed:.0f}s (<600s)")
    assert ok


# --------------------------------------------------------------------------- 8


EFFICACY_SEEDS = (0, 1, 2)


def _efficacy_config(seed: int) -> RunConfig:
    return RunConfig.from_dict(
        {"model": {"width": 16}, "train": {"seed": seed, "schedule_scale": 0.125, "batch_size": 8}}
    )


@pytest.mark.slow
def test_c8_distillation_efficacy(tmp_path):
    t0 = time.perf_counter()
    synth = SynthSpec(count=200, canvas=128, seed=0, boundary_noise=2.0)
    train_set = generate_synthetic(synth, prefix="train")
    test_set = generate_synthetic(SynthSpec(count=50, canvas=128, seed=1_000_003, boundary_noise=2.0), prefix="test")
    gts = [s.mask for s in test_set]
    scores = {"full": [], "base": []}
    band = {"full": [], "base": []}
    for seed in EFFICACY_SEEDS:
        cfg = _efficacy_config(seed)
        for mode in ("full", "base"):
            run = tmp_path / f"{mode}_{seed}"
            if mode == "full":
                precompute_cache(default_bank(), train_set, run / "cache", cfg.distill.width, cfg.distill.projection_seed)
            state = train(cfg, run, train_set, phase1_only=(mode == "base"))
            model, _ = load_checkpoint(state.checkpoint)
            report, preds = evaluate(model, test_set)
            scores[mode].append(report.mdice)
            band[mode].append(mean_band_dice(preds, gts, 3.0))
    elapsed = time.perf_counter() - t0
    full, base = np.mean(scores["full"]), np.mean(scores["base"])
    bfull, bbase = np.mean(band["full"]), np.mean(band["base"])
    gain = 100 * (bfull - bbase)
    ok = full >= base and gain >= 1.0 and elapsed < 45 * 60
    per_seed = ", ".join(
        f"s{s}: {100 * scores['full'][i]:.1f}/{100 * scores['base'][i]:.1f} band {100 * band['full'][i]:.1f}/{100 * band['base'][i]:.1f}"
        for i, s in enumerate(EFFICACY_SEEDS)
    )
    record(
        8,
        ok,
        f"test mDice full {100 * full:.2f} vs phase-1-only {100 * base:.2f}; boundary-band mDice gain {gain:+.2f} pts (>=1); "
        f"{elapsed / 60:.1f} min (<45) [{per_seed}]",
    )
    assert ok


# --------------------------------------------------------------------------- 9


def test_c9_data_teacher_invariants_and_cache(tmp_path):
    rng = np.random.default_rng(9)
    bank = default_bank()
    fp = bank.fingerprint()
    failures = []
    for i in range(100):
        h, w = (int(v) for v in rng.integers(16, 48, 2) * 2)
        s = random_sample(rng, h, w, sid=f"r{i:03d}")
        pair = region_split(s)
        if not np.array_equal(pair.polyp_input + pair.nonpolyp_input, s.image):
            failures.append(f"{s.id}: region split")
        seed = int(rng.integers(0, 2**63 - 1))
        a, b = augment(s, seed), augment(s, seed)
        scale = draw_augmentation(seed).scale
        if a.image.tobytes() != b.image.tobytes() or a.image.shape[:2] != (
            int(np.floor(scale * h + 0.5)),
            int(np.floor(scale * w + 0.5)),
        ):
            failures.append(f"{s.id}: augmentation")
        if not set(np.unique(a.mask)) <= {0, 1}:
            failures.append(f"{s.id}: augmented mask not binary")
        size = (max(h // 16, 1), max(w // 16, 1))
        sem = extract_semantic(bank, s.image, size)
        if sem.channels != sum(c for _, c in sem.component_channels):
            failures.append(f"{s.id}: channel sum")
        f_pol, f_non = region_features(bank, s, size)
        out, weights = cross_attention(f_pol.features, f_non.features, return_weights=True)
        if np.abs(weights.sum(axis=1) - 1).max() > 1e-6 or out.shape != sem.features.shape:
            failures.append(f"{s.id}: attention")
        bnd = extract_boundary(bank, s, size)
        target = project_targets(sem, bnd, 64, 0)
        featcache.cache_write(tmp_path, s.id, target, fp)
        back = featcache.cache_read(tmp_path, s.id, fp)
        if back.semantic.tobytes() != target.semantic.tobytes() or back.boundary.tobytes() != target.boundary.tobytes():
            failures.append(f"{s.id}: cache round trip")
    ok = not failures
    record(9, ok, f"100 random samples: {len(failures)} invariant violations; cache read-after-write bit-exact" + (f" [{failures[:3]}]" if failures else ""))
    assert ok


# --------------------------------------------------------------------------- 10


def test_c10_determinism(tmp_path):
    samples = generate_synthetic(SynthSpec(count=16, canvas=128, seed=10), prefix="d")
    cfg = RunConfig.from_dict(
        {
            "model": {"width": 4},
            "train": {"schedule_scale": 0.125, "batch_size": 8, "dtype": "float64", "threads": 1, "seed": 10},
        }
    )
    logs = []
    for run in ("a", "b"):
        state = cached_run(cfg, tmp_path / run, samples)
        logs.append(state.log_path.read_bytes())
    n_rows = logs[0].count(b"\n") - 1
    ok = logs[0] == logs[1] and n_rows == 30
    record(10, ok, f"two float64 single-thread desk runs: training logs byte-identical = {logs[0] == logs[1]} ({n_rows} rows)")
    assert ok
