"""COCO-style average precision, mask RLE, counting error and recall."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class Det:
    category: str
    score: float
    box: Sequence[float] | None = None  # cxcywh normalized
    mask: np.ndarray | None = None  # bool H x W
    keypoints: np.ndarray | None = None  # K x 2


@dataclass
class GT:
    category: str
    box: Sequence[float] | None = None
    mask: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    visibility: np.ndarray | None = None


# ---------------------------------------------------------------------------
# similarity kernels


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between (N, 4) and (M, 4) cxcywh boxes."""
    a = np.asarray(a, float).reshape(-1, 4)
    b = np.asarray(b, float).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    inter = np.clip(hi - lo, 0, None).prod(-1)
    union = a[:, 2:].prod(-1)[:, None] + b[:, 2:].prod(-1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def mask_iou_matrix(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    fa = np.stack([np.asarray(m, bool).ravel() for m in a]).astype(np.float64)
    fb = np.stack([np.asarray(m, bool).ravel() for m in b]).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def binarize_mask_logits(logits: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize (h, w) logits to ``size`` (pixel-center aligned) and threshold at 0."""
    logits = np.asarray(logits, np.float64)
    h, w = logits.shape
    H, W = size
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None]
    top = logits[y0][:, x0] * (1 - fx) + logits[y0][:, x1] * fx
    bot = logits[y1][:, x0] * (1 - fx) + logits[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy) > 0


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed column-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(np.asarray(mask).shape), "counts": [int(c) for c in counts]}


def rle_decode(rle: Mapping) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, bool)
    pos, val = 0, False
    for c in rle["counts"]:
        flat[pos : pos + c] = val
        pos += c
        val = not val
    return flat.reshape((h, w), order="F")


def oks_matrix(det_kps: Sequence[np.ndarray], gts: Sequence[GT], constants: Sequence[float]) -> np.ndarray:
    k = np.asarray(constants, float)
    out = np.zeros((len(det_kps), len(gts)))
    for j, g in enumerate(gts):
        vis = np.asarray(g.visibility, bool)
        area = float(g.box[2] * g.box[3])
        if not vis.any() or area <= 0:
            continue
        for i, p in enumerate(det_kps):
            d2 = ((np.asarray(p, float) - np.asarray(g.keypoints, float)) ** 2).sum(-1)
            out[i, j] = np.exp(-d2 / (2 * area * k**2))[vis].mean()
    return out


# ---------------------------------------------------------------------------
# average precision


def greedy_match(sim: np.ndarray, threshold: float) -> np.ndarray:
    """Rows are detections in descending score order. Each takes the best still
    unmatched ground truth with similarity >= threshold. Returns TP flags."""
    D, G = sim.shape
    taken = np.zeros(G, bool)
    tp = np.zeros(D, bool)
    for i in range(D):
        best, best_j = threshold, -1
        for j in range(G):
            if not taken[j] and sim[i, j] >= best:
                best, best_j = sim[i, j], j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from per-detection scores and TP flags."""
    if n_gt == 0:
        raise ValueError("no ground truth")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tps = np.asarray(tp, float)[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(1 - tps)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


SimFn = Callable[[list[Det], list[GT]], np.ndarray]


def _similarity(mode: str) -> SimFn:
    if mode == "box":
        return lambda d, g: box_iou_matrix(np.array([x.box for x in d]).reshape(-1, 4), np.array([x.box for x in g]).reshape(-1, 4))
    if mode == "mask":
        def sim(d, g):
            if any(x.mask is None for x in d) or any(x.mask is None for x in g):
                raise ValueError("mask mode needs masks on every detection and ground truth")
            return mask_iou_matrix([x.mask for x in d], [x.mask for x in g])
        return sim
    raise ValueError(f"unknown AP mode {mode!r}")


@dataclass
class APReport:
    per_category: dict[str, dict[str, float]]
    thresholds: tuple[float, ...]
    notes: list[str] = field(default_factory=list)

    def mean(self, threshold: float | None = None, categories: Sequence[str] | None = None) -> float:
        cats = [c for c in (categories if categories is not None else self.per_category) if c in self.per_category]
        if not cats:
            return float("nan")
        if threshold is None:
            return float(np.mean([np.mean(list(self.per_category[c].values())) for c in cats]))
        key = f"{threshold:.2f}"
        return float(np.mean([self.per_category[c][key] for c in cats]))

    def to_dict(self, rare: Sequence[str] = ()) -> dict:
        out = {
            "AP": _r(self.mean()),
            "AP50": _r(self.mean(0.5)) if 0.5 in self.thresholds else None,
            "AP75": _r(self.mean(0.75)) if 0.75 in self.thresholds else None,
            "per_category": {c: {k: _r(v) for k, v in sorted(d.items())} for c, d in sorted(self.per_category.items())},
            "notes": list(self.notes),
        }
        if rare:
            out["AP_rare"] = _r(self.mean(categories=rare))
            out["rare_categories"] = sorted(rare)
        return out


def _r(x: float) -> float | None:
    return None if x is None or np.isnan(x) else round(float(x), 10)


def average_precision(
    detections: Sequence[Sequence[Det]],
    ground_truth: Sequence[Sequence[GT]],
    mode: str = "box",
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = MAX_DETS,
    similarity: SimFn | None = None,
) -> APReport:
    """Per-category AP over images; ``detections[i]`` and ``ground_truth[i]`` belong to image i."""
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth cover different numbers of images")
    sim_fn = similarity or _similarity(mode)
    cats = sorted({g.category for gs in ground_truth for g in gs} | {d.category for ds in detections for d in ds})
    thresholds = tuple(float(t) for t in iou_thresholds)
    per_cat: dict[str, dict[str, float]] = {}
    notes = []
    for c in cats:
        n_gt = sum(1 for gs in ground_truth for g in gs if g.category == c)
        if n_gt == 0:
            notes.append(f"category {c!r} has no ground truth; skipped")
            continue
        scores: list[float] = []
        tps = {t: [] for t in thresholds}
        for ds, gs in zip(detections, ground_truth):
            d = sorted((x for x in ds if x.category == c), key=lambda x: -x.score)[:max_dets]
            g = [x for x in gs if x.category == c]
            if not d:
                continue
            scores.extend(x.score for x in d)
            sim = sim_fn(d, g) if g else np.zeros((len(d), 0))
            for t in thresholds:
                tps[t].extend(greedy_match(sim, t).tolist())
        per_cat[c] = {f"{t:.2f}": interpolated_ap(np.array(scores), np.array(tps[t], bool), n_gt) for t in thresholds}
    return APReport(per_cat, thresholds, notes)


def rare_categories(frequency_ranks: Mapping[str, int]) -> list[str]:
    """Bottom tercile of training frequency (largest ranks)."""
    names = sorted(frequency_ranks, key=lambda n: (frequency_ranks[n], n))
    k = max(1, len(names) // 3)
    return sorted(names[-k:])


def counting_mae(predicted: Sequence[float], true: Sequence[float]) -> float:
    if len(predicted) != len(true):
        raise ValueError("predicted and true counts differ in length")
    if not len(true):
        raise ValueError("no counts")
    return float(np.mean(np.abs(np.asarray(predicted, float) - np.asarray(true, float))))


def recall_at(detections: Sequence[Sequence[Det]], ground_truth: Sequence[Sequence[GT]], iou: float = 0.5) -> float:
    """Class-agnostic fraction of ground-truth boxes covered by some detection at ``iou``
    (one-to-one greedy assignment by score)."""
    hit = total = 0
    for ds, gs in zip(detections, ground_truth):
        total += len(gs)
        if not ds or not gs:
            continue
        d = sorted(ds, key=lambda x: -x.score)
        sim = box_iou_matrix(np.array([x.box for x in d]), np.array([x.box for x in gs]))
        hit += int(greedy_match(sim, iou).sum())
    if total == 0:
        raise ValueError("no ground truth")
    return hit / total
