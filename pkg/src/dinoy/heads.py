"""Box / classification / mask heads, set matching and the grounding losses."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

from .boxes import giou, pairwise_giou
from .layers import bilinear_sample

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def contrastive_logits(content: Tensor, phrases: Tensor, bias: Tensor | float = 0.0) -> Tensor:
    """(..., Q, d) x (..., P, d) -> (..., Q, P) scaled dot products."""
    return content @ phrases.transpose(-1, -2) / content.shape[-1] ** 0.5 + bias


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise sigmoid focal loss."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def focal_match_cost(logits: Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Positive-minus-negative focal cost, evaluated per logit."""
    p = logits.sigmoid()
    neg = (1 - alpha) * p**gamma * -(1 - p + 1e-8).log()
    pos = alpha * (1 - p) ** gamma * -(p + 1e-8).log()
    return pos - neg


def l1_box_loss(pred: Tensor, target: Tensor) -> Tensor:
    return (pred - target).abs().sum(-1)


def giou_loss(pred: Tensor, target: Tensor) -> Tensor:
    return 1 - giou(pred, target, check=False)


# ---------------------------------------------------------------------------
# masks


def upsample2x(x: Tensor) -> Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class PixelDecoder(nn.Module):
    """Fuse the projected stride-4 backbone map with the upsampled stride-8 encoder map."""

    def __init__(self, c_backbone: int, d: int = 128):
        super().__init__()
        self.backbone_proj = nn.Conv2d(c_backbone, d, 1)
        self.encoder_proj = nn.Conv2d(d, d, 1)
        self.out = nn.Conv2d(d, d, 3, padding=1)

    def forward(self, backbone_s4: Tensor, encoder_s8: Tensor) -> Tensor:
        if backbone_s4.shape[-2:] != tuple(2 * s for s in encoder_s8.shape[-2:]):
            raise ValueError(f"stride-4 map {tuple(backbone_s4.shape[-2:])} is not twice stride-8 map {tuple(encoder_s8.shape[-2:])}")
        x = self.backbone_proj(backbone_s4) + upsample2x(self.encoder_proj(encoder_s8))
        return F.relu(self.out(x))


class MaskHead(nn.Module):
    def __init__(self, d: int = 128):
        super().__init__()
        self.content_proj = nn.Linear(d, d, bias=False)

    def forward(self, content: Tensor, pixel_map: Tensor) -> Tensor:
        """(B, Q, d), (B, d, h, w) -> (B, Q, h, w).

        Broadcast-and-sum rather than a matmul so each query's grid is
        bit-identical whatever the number of queries in the batch.
        """
        w = self.content_proj.weight
        proj = (content[..., None, :] * w).sum(-1)
        return (proj[..., None, None] * pixel_map[:, None]).sum(2)


def dice_loss(probs: Tensor, targets: Tensor) -> Tensor:
    """Per-row dice with +1 smoothing; inputs (M, n)."""
    num = 2 * (probs * targets).sum(-1) + 1
    den = probs.sum(-1) + targets.sum(-1) + 1
    return 1 - num / den


def dense_mask_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """BCE + dice over full grids (M, h, w)."""
    lf, tf = logits.flatten(1), targets.flatten(1)
    bce = F.binary_cross_entropy_with_logits(lf, tf, reduction="none").mean(-1)
    return (bce + dice_loss(lf.sigmoid(), tf)).mean()


def lattice_points(h: int, w: int, M: int) -> Tensor:
    ys, xs = torch.meshgrid((torch.arange(h) + 0.5) / h, (torch.arange(w) + 0.5) / w, indexing="ij")
    return torch.stack([xs, ys], -1).reshape(1, -1, 2).expand(M, -1, -1)


def sample_points(
    logits: Tensor,
    n_points: int,
    oversample: float = 3.0,
    importance: float = 0.75,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Uncertainty-biased sample locations (M, n_points, 2) for (M, h, w) logits."""
    M = logits.shape[0]
    if importance <= 0:
        return torch.rand(M, n_points, 2, generator=generator, dtype=logits.dtype)
    n_over = int(oversample * n_points)
    cand = torch.rand(M, n_over, 2, generator=generator, dtype=logits.dtype)
    with torch.no_grad():
        unc = -point_values(logits, cand).abs()
    n_imp = int(importance * n_points)
    top = unc.topk(n_imp, dim=1).indices
    chosen = cand.gather(1, top[..., None].expand(M, n_imp, 2))
    rand = torch.rand(M, n_points - n_imp, 2, generator=generator, dtype=logits.dtype)
    return torch.cat([chosen, rand], dim=1)


def point_values(grid: Tensor, points: Tensor) -> Tensor:
    """Bilinear values of (M, h, w) grids at (M, n, 2) points -> (M, n)."""
    return bilinear_sample(grid[:, None], points[:, None])[:, 0, 0]


def point_sampled_mask_loss(
    pred_logits: Tensor,
    gt_masks: Tensor,
    n_points: int,
    oversample: float = 3.0,
    importance: float = 0.75,
    generator: torch.Generator | None = None,
    lattice: bool = False,
    bce_weight: float = 1.0,
    dice_weight: float = 1.0,
) -> Tensor:
    """BCE + dice evaluated only at sampled points.

    ``pred_logits`` (M, h, w) and ``gt_masks`` (M, H, W) may differ in
    resolution; both are read bilinearly at the sample coordinates.
    ``lattice=True`` samples every pixel center of the prediction grid.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    M, h, w = pred_logits.shape
    if M == 0:
        return pred_logits.sum() * 0.0
    if lattice:
        points = lattice_points(h, w, M).to(pred_logits.dtype)
    else:
        points = sample_points(pred_logits, n_points, oversample, importance, generator).to(pred_logits.dtype)
    logit_pts = point_values(pred_logits, points)
    gt_pts = point_values(gt_masks.to(pred_logits.dtype), points)
    bce = F.binary_cross_entropy_with_logits(logit_pts, gt_pts, reduction="none").mean(-1)
    dice = dice_loss(logit_pts.sigmoid(), gt_pts)
    return (bce_weight * bce + dice_weight * dice).mean()


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int] = field(default_factory=list)

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def assign(cost: np.ndarray) -> MatchResult:
    """Minimum-cost injective assignment of columns (ground truth) to rows (queries)."""
    Q, G = cost.shape
    if Q < G:
        raise ValueError(f"{Q} queries cannot cover {G} ground-truth objects")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    pairs = [(int(rows[i]), int(cols[i])) for i in order]
    used = {q for q, _ in pairs}
    return MatchResult(pairs, [q for q in range(Q) if q not in used])


def brute_force_assign(cost: np.ndarray) -> float:
    """Reference minimum over all injective assignments (small problems only)."""
    Q, G = cost.shape
    return min(sum(cost[p[g], g] for g in range(G)) for p in itertools.permutations(range(Q), G))


def match_cost(
    logits: Tensor, boxes: Tensor, gt_phrase: Tensor, gt_boxes: Tensor, weights: MatchWeights = MatchWeights()
) -> Tensor:
    """(Q, P) logits and (Q, 4) boxes against G targets -> (Q, G) cost."""
    c_cls = focal_match_cost(logits)[:, gt_phrase]
    c_l1 = torch.cdist(boxes, gt_boxes, p=1)
    c_giou = -pairwise_giou(boxes, gt_boxes)
    return weights.cls * c_cls + weights.l1 * c_l1 + weights.giou * c_giou


@torch.no_grad()
def hungarian_match(
    logits: Tensor, boxes: Tensor, gt_phrase: Tensor, gt_boxes: Tensor, weights: MatchWeights = MatchWeights()
) -> MatchResult:
    if gt_boxes.shape[0] == 0:
        return MatchResult([], list(range(boxes.shape[0])))
    cost = match_cost(logits.float(), boxes.float(), gt_phrase, gt_boxes.float(), weights)
    return assign(cost.cpu().numpy().astype(np.float64))
