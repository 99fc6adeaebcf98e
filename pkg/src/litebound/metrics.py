"""Six-metric evaluation suite for binary segmentation.

``pred`` is a continuous map in [0, 1]; ``gt`` is binary.  The weighted
F-measure, S-measure and E-measure follow the usual saliency-evaluation
definitions, with small changes that make them exactly symmetric (see the
individual docstrings).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

EPS = np.finfo(np.float64).eps
METRIC_NAMES = ("mdice", "miou", "fbw", "s_alpha", "e_phi_max", "mae")
METRIC_TITLES = ("mDice", "mIoU", "F^w_b", "S_a", "E^max_p", "MAE")
N_THRESHOLDS = 256


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt.astype(bool)


# --------------------------------------------------------------------------- dice / iou / mae


def dice_iou_mae(pred, gt, threshold: float = 0.5) -> tuple[float, float, float]:
    pred, gt = _check(pred, gt)
    b = pred >= threshold
    inter = np.count_nonzero(b & gt)
    nb, ng = np.count_nonzero(b), np.count_nonzero(gt)
    union = nb + ng - inter
    dice = 1.0 if nb + ng == 0 else 2.0 * inter / (nb + ng)
    iou = 1.0 if union == 0 else inter / union
    mae = float(np.abs(pred - gt).mean())
    return dice, iou, mae


def boundary_band(gt, width: float = 3.0) -> np.ndarray:
    """Pixels within ``width`` (Euclidean) of the inner contour of ``gt``."""
    gt = np.asarray(gt).astype(bool)
    if not gt.any():
        return np.zeros_like(gt)
    contour = gt & ~ndimage.binary_erosion(gt, border_value=1)
    if not contour.any():
        return np.zeros_like(gt)
    return ndimage.distance_transform_edt(~contour) <= width


def boundary_band_dice(pred, gt, width: float = 3.0, threshold: float = 0.5) -> float:
    """Dice restricted to the tube of half-width ``width`` around the gt contour."""
    pred, gt = _check(pred, gt)
    band = boundary_band(gt, width)
    if not band.any():
        return 1.0
    return dice_iou_mae(pred[band], gt[band], threshold)[0]


# --------------------------------------------------------------------------- weighted F-measure


def _gauss_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    m = (size - 1) / 2
    y, x = np.ogrid[-m : m + 1, -m : m + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < EPS * k.max()] = 0
    return k / k.sum()


def _nearest_fg_error(err: np.ndarray, gt: np.ndarray, reach2: int) -> tuple[np.ndarray, np.ndarray]:
    """Copy to every background pixel the error of its nearest foreground pixel.

    Equidistant nearest pixels are averaged (instead of picking one by scan
    order) for every background pixel within ``sqrt(reach2)`` of the
    foreground, which keeps the measure exactly flip-symmetric.
    """
    bg = ~gt
    dst, (iy, ix) = ndimage.distance_transform_edt(bg, return_indices=True)
    out = err.copy()
    out[bg] = err[iy[bg], ix[bg]]

    h, w = gt.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (iy - yy) ** 2 + (ix - xx) ** 2
    near = bg & (d2 <= reach2)
    if near.any():
        acc = np.zeros_like(err)
        cnt = np.zeros_like(err)
        r = int(math.isqrt(reach2))
        pad_fg = np.pad(gt, r)
        pad_err = np.pad(err, r)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                o2 = dy * dy + dx * dx
                if o2 > reach2:
                    continue
                fg_s = pad_fg[r + dy : r + dy + h, r + dx : r + dx + w]
                hit = near & fg_s & (d2 == o2)
                acc[hit] += pad_err[r + dy : r + dy + h, r + dx : r + dx + w][hit]
                cnt[hit] += 1
        out[near] = acc[near] / cnt[near]
    return out, dst


def weighted_fmeasure(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure with Gaussian error diffusion (7x7, sigma 5).

    Background errors take the (tie-averaged) error of the nearest foreground
    pixel and are weighted by ``2 - exp(ln(0.5) / 5 * distance)``.  An empty
    ground truth scores ``1 - mean(pred)``.
    """
    pred, gt = _check(pred, gt)
    if not gt.any():
        return float(1.0 - pred.mean())
    g = gt.astype(np.float64)
    err = np.abs(pred - g)
    kernel = _gauss_kernel()
    reach = kernel.shape[0] // 2
    et, dst = _nearest_fg_error(err, gt, 2 * reach * reach)
    ea = ndimage.convolve(et, kernel, mode="constant", cval=0.0)
    min_e_ea = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(math.log(0.5) / 5 * dst))
    ew = min_e_ea * importance
    tpw = g.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


# --------------------------------------------------------------------------- S-measure


def _s_object(x: np.ndarray) -> float:
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma + EPS)


def _object_score(pred, gt) -> float:
    u = gt.mean()
    fg = pred[gt]
    bg = 1.0 - pred[~gt]
    return u * _s_object(fg) + (1 - u) * _s_object(bg)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _split_candidates(coord: float) -> tuple[int, ...]:
    # nearest pixel edge to the centroid; a centroid on a pixel centre is a tie
    k = math.floor(coord)
    if abs(coord - k) < 1e-9:
        return (k, k + 1)
    if abs(coord - (k + 1)) < 1e-9:
        return (k + 1, k + 2)
    return (k + 1,)


def _region_score_at(pred, gt, ys: int, xs: int) -> float:
    h, w = gt.shape
    total = 0.0
    for rows in (slice(0, ys), slice(ys, h)):
        for cols in (slice(0, xs), slice(xs, w)):
            p, g = pred[rows, cols], gt[rows, cols]
            if p.size:
                total += p.size / (h * w) * _ssim(p, g)
    return total


def _region_score(pred, gt) -> float:
    g = gt.astype(np.float64)
    ys, xs = np.nonzero(gt)
    cy, cx = ys.mean(), xs.mean()
    scores = [
        _region_score_at(pred, g, y, x) for y in _split_candidates(cy) for x in _split_candidates(cx)
    ]
    return float(np.mean(scores))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: ``alpha * object + (1 - alpha) * region``.

    The region term splits the image into quadrants at the pixel edge nearest
    the gt centroid; when the centroid sits on a pixel centre both
    neighbouring edges are scored and averaged, so the result is invariant
    under 180-degree rotation.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)
    return float(max(0.0, score))


# --------------------------------------------------------------------------- E-measure


def _em_from_counts(tp: np.ndarray, fp: np.ndarray, n_gt: int, n: int) -> np.ndarray:
    """Enhanced alignment from confusion counts at each threshold (vectorized)."""
    n_pred = tp + fp
    if n_gt == 0:
        return (n - n_pred) / n
    if n_gt == n:
        return n_pred / n
    fn = n_gt - tp
    tn = n - n_pred - fn
    mp = n_pred / n
    mg = n_gt / n

    def enhanced(a, b):
        align = 2 * a * b / (a * a + b * b + EPS)
        return (align + 1) ** 2 / 4

    total = (
        tp * enhanced(1 - mp, 1 - mg)
        + fp * enhanced(1 - mp, -mg)
        + fn * enhanced(-mp, 1 - mg)
        + tn * enhanced(-mp, -mg)
    )
    return total / n


def _quantize(pred: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(pred, 0, 1) * 255 + 0.5) / 255


def e_measure_curve(pred, gt) -> np.ndarray:
    """E-measure at the 256 thresholds ``k / 255`` on the 8-bit-quantized map."""
    pred, gt = _check(pred, gt)
    q = np.rint(_quantize(pred) * 255).astype(np.int64).ravel()
    g = gt.ravel()
    hist_all = np.bincount(q, minlength=N_THRESHOLDS)
    hist_fg = np.bincount(q[g], minlength=N_THRESHOLDS)
    # pixels with level >= k, for k = 0..255
    n_ge = np.cumsum(hist_all[::-1])[::-1].astype(np.float64)
    tp = np.cumsum(hist_fg[::-1])[::-1].astype(np.float64)
    return _em_from_counts(tp, n_ge - tp, int(g.sum()), g.size)


def e_measure_at(pred, gt, threshold: float) -> float:
    """E-measure of the 8-bit-quantized map binarized at ``threshold``."""
    pred, gt = _check(pred, gt)
    b = (_quantize(pred) >= threshold).ravel()
    g = gt.ravel()
    tp = np.array([np.count_nonzero(b & g)], dtype=np.float64)
    fp = np.array([np.count_nonzero(b & ~g)], dtype=np.float64)
    return float(_em_from_counts(tp, fp, int(g.sum()), g.size)[0])


def e_measure_max(pred, gt) -> float:
    """Maximum enhanced-alignment measure over 256 thresholds.

    The score is normalized by the pixel count ``N`` (not ``N - 1``), so a
    perfect prediction scores exactly 1.
    """
    return float(e_measure_curve(pred, gt).max())


# --------------------------------------------------------------------------- reports


def sample_metrics(pred, gt, threshold: float = 0.5) -> dict[str, float]:
    dice, iou, mae = dice_iou_mae(pred, gt, threshold)
    return {
        "mdice": dice,
        "miou": iou,
        "fbw": weighted_fmeasure(pred, gt),
        "s_alpha": s_measure(pred, gt),
        "e_phi_max": e_measure_max(pred, gt),
        "mae": mae,
    }


@dataclass
class MetricReport:
    per_sample: list[dict] = field(default_factory=list)  # rows: sample_id + METRIC_NAMES

    @property
    def means(self) -> dict[str, float]:
        if not self.per_sample:
            raise ValueError("empty report")
        return {k: float(np.mean([r[k] for r in self.per_sample])) for k in METRIC_NAMES}

    def __getattr__(self, name):
        if name in METRIC_NAMES:
            return self.means[name]
        raise AttributeError(name)

    def summary(self, title: str = "") -> str:
        means = self.means
        head = " | ".join(f"{t:>8}" for t in METRIC_TITLES)
        vals = " | ".join(f"{100 * means[k]:8.1f}" for k in METRIC_NAMES)
        lines = [title] if title else []
        lines += [f"samples: {len(self.per_sample)}", head, vals]
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("sample_id",) + METRIC_NAMES)
            for r in self.per_sample:
                writer.writerow([r["sample_id"]] + [repr(float(r[k])) for k in METRIC_NAMES])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([{"sample_id": r["sample_id"], **{k: float(r[k]) for k in METRIC_NAMES}} for r in rows])


def report_from_predictions(
    ids: Sequence[str], preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], threshold: float = 0.5
) -> MetricReport:
    rows = [
        {"sample_id": sid, **sample_metrics(p, g, threshold)} for sid, p, g in zip(ids, preds, gts)
    ]
    if not rows:
        raise ValueError("cannot evaluate an empty dataset")
    return MetricReport(rows)


def mean_band_dice(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], width: float = 3.0) -> float:
    vals = [boundary_band_dice(p, g, width) for p, g in zip(preds, gts)]
    if not vals:
        raise ValueError("cannot evaluate an empty dataset")
    return float(np.mean(vals))


def evaluate(model, samples, threshold: float = 0.5) -> tuple[MetricReport, list[np.ndarray]]:
    """Predict every sample with ``model`` (switched to eval mode) and score it."""
    from .inference import predict_samples  # deferred: keeps metrics importable without the network code

    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    preds = predict_samples(model, samples)
    model.eval()
    report = report_from_predictions([s.id for s in samples], preds, [s.mask for s in samples], threshold)
    return report, preds
