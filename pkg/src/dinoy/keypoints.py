"""Keypoint head: per-detection query expansion, a small deformable decoder,
and the OKS / PCK measurement kernels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .boxes import inverse_sigmoid
from .data import KEYPOINT_COUNTS
from .layers import FFN, MLP, Attention, MSDeformAttn, sincos_position

SHAPE_OKS_CONSTANT = 0.1


@dataclass(frozen=True)
class KeypointSpec:
    name: str
    K: int
    oks_constants: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.K < 1 or len(self.oks_constants) != self.K:
            raise ValueError(f"keypoint spec {self.name!r}: K={self.K} with {len(self.oks_constants)} constants")


@dataclass
class KeypointSet:
    points: np.ndarray  # K x 2 normalized
    visibility: np.ndarray  # K in [0, 1]

    def to_triplets(self) -> list[float]:
        return [float(v) for p, s in zip(self.points, self.visibility) for v in (p[0], p[1], s)]


def _load_presets() -> dict[str, KeypointSpec]:
    raw = json.loads(resources.files("dinoy").joinpath("resources/keypoint_presets.json").read_text())
    # COCO-style sigmas; the per-keypoint constant in exp(-d^2 / (2 s^2 k^2)) is 2 * sigma
    return {name: KeypointSpec(name, len(v["sigmas"]), tuple(2 * s for s in v["sigmas"])) for name, v in raw.items()}


def default_specs() -> dict[str, KeypointSpec]:
    specs = {kind: KeypointSpec(kind, k, (SHAPE_OKS_CONSTANT,) * k) for kind, k in KEYPOINT_COUNTS.items()}
    specs.update(_load_presets())
    return specs


SPECS = default_specs()


def spec_for_phrase(phrase: str, specs: dict[str, KeypointSpec] = SPECS) -> KeypointSpec | None:
    """Route a detection to a keypoint spec by the last word of its phrase."""
    words = phrase.split()
    return specs.get(words[-1]) if words else None


# ---------------------------------------------------------------------------
# metrics


def oks(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray, gt_area: float, spec: KeypointSpec) -> float:
    """Object keypoint similarity over the visible ground-truth keypoints."""
    if gt_area <= 0:
        raise ValueError("gt_area must be positive")
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    visible = np.asarray(visible, bool)
    if pred.shape != gt.shape or len(gt) != spec.K:
        raise ValueError(f"expected {spec.K} keypoints, got pred {pred.shape} / gt {gt.shape}")
    if not visible.any():
        raise ValueError("ground truth has no visible keypoints")
    d2 = ((pred - gt) ** 2).sum(-1)
    k = np.asarray(spec.oks_constants)
    e = np.exp(-d2 / (2 * gt_area * k**2))
    return float(e[visible].mean())


def pck(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray, box: Sequence[float], threshold: float = 0.05) -> float:
    """Fraction of visible keypoints closer than ``threshold * max(box_w, box_h)``."""
    w, h = box[2], box[3]
    if w <= 0 or h <= 0:
        raise ValueError("box must have positive size")
    visible = np.asarray(visible, bool)
    if not visible.any():
        return 0.0
    d = np.sqrt(((np.asarray(pred, float) - np.asarray(gt, float)) ** 2).sum(-1))
    return float((d[visible] < threshold * max(w, h)).mean())


def oks_torch(pred: Tensor, gt: Tensor, visible: Tensor, gt_area: Tensor, k: Tensor) -> Tensor:
    """Differentiable batched OKS: (N, K, 2) points, (N, K) visibility, (N,) areas, (K,) constants."""
    d2 = ((pred - gt) ** 2).sum(-1)
    e = torch.exp(-d2 / (2 * gt_area[:, None] * k[None] ** 2))
    v = visible.float()
    return (e * v).sum(-1) / v.sum(-1).clamp(min=1)


# ---------------------------------------------------------------------------
# head


class KeypointDecoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, n_points: int, d_ff: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = Attention(d, n_heads)
        self.norm_cross = nn.LayerNorm(d)
        self.cross_attn = MSDeformAttn(d, 3, n_heads, n_points)
        self.ffn = FFN(d, d_ff)

    def forward(self, x, qpos, ref, memory_tokens, shapes):
        h = self.norm_self(x) + qpos
        x = x + self.self_attn(h, h, self.norm_self(x))
        x = x + self.cross_attn(self.norm_cross(x) + qpos, ref, memory_tokens, shapes)
        return self.ffn(x)


class KeypointHead(nn.Module):
    """Expands each detection query into K keypoint queries and refines their
    positions layer by layer in logit space, starting from the box center."""

    def __init__(self, d: int = 128, n_heads: int = 4, n_points: int = 4, n_layers: int = 2, d_ff: int = 256, specs: dict[str, KeypointSpec] | None = None):
        super().__init__()
        self.d = d
        self.specs = dict(specs or SPECS)
        self.embeddings = nn.ParameterDict({name: nn.Parameter(torch.randn(s.K, d) * 0.5) for name, s in self.specs.items()})
        self.box_embed = MLP(2 * d, d, d, 2)
        self.query_pos = MLP(d, d, d, 2)
        self.layers = nn.ModuleList(KeypointDecoderLayer(d, n_heads, n_points, d_ff) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)
        self.refine = nn.ModuleList(MLP(d, d, 2, 3, zero_init_last=True) for _ in range(n_layers))
        self.visibility = nn.Linear(d, 1)

    def expand_queries(self, content: Tensor, spec: KeypointSpec | str) -> Tensor:
        """(N, d) detection contents -> (N, K, d) keypoint queries."""
        name = spec if isinstance(spec, str) else spec.name
        if name not in self.embeddings:
            raise KeyError(f"keypoint spec {name!r} is not registered; known: {sorted(self.embeddings)}")
        return content[:, None, :] + self.embeddings[name][None]

    def forward(self, content: Tensor, boxes: Tensor, spec: KeypointSpec | str, memory_tokens: Tensor, shapes) -> dict[str, Tensor]:
        """Decode keypoints for N detections sharing one spec.

        ``memory_tokens`` is (N, Nm, d): the fused memory of each detection's image.
        Returns per-layer positions (L, N, K, 2) and visibility logits (N, K).
        """
        x = self.expand_queries(content, spec)
        N, K, _ = x.shape
        x = x + self.box_embed(sincos_position(boxes, self.d // 2))[:, None]
        pts = boxes[:, None, :2].expand(N, K, 2)
        wh = boxes[:, None, 2:].expand(N, K, 2)
        layers = []
        for layer, refine in zip(self.layers, self.refine):
            qpos = self.query_pos(sincos_position(pts, self.d // 2))
            x = layer(x, qpos, torch.cat([pts, wh], -1), memory_tokens, shapes)
            h = self.norm(x)
            new = (inverse_sigmoid(pts) + refine(h)).sigmoid()
            layers.append(new)
            pts = new.detach()
        return {"points": torch.stack(layers), "visibility_logits": self.visibility(self.norm(x))[..., 0]}


@dataclass(frozen=True)
class KeypointLossWeights:
    l1: float = 5.0
    visibility: float = 1.0
    oks: float = 2.0


def keypoint_loss(
    points: Tensor,
    vis_logits: Tensor,
    gt_points: Tensor,
    gt_visible: Tensor,
    gt_area: Tensor,
    spec: KeypointSpec,
    weights: KeypointLossWeights = KeypointLossWeights(),
) -> Tensor:
    """L1 on visible coordinates + visibility BCE + (1 - OKS), summed over layers.

    ``points`` is (L, N, K, 2).
    """
    k = torch.tensor(spec.oks_constants, dtype=points.dtype)
    v = gt_visible.float()
    n_vis = v.sum().clamp(min=1)
    total = points.new_zeros(())
    for lp in points:
        l1 = ((lp - gt_points).abs().sum(-1) * v).sum() / n_vis
        o = oks_torch(lp, gt_points, gt_visible, gt_area, k).mean()
        total = total + weights.l1 * l1 + weights.oks * (1 - o)
    bce = F.binary_cross_entropy_with_logits(vis_logits, v)
    return total + weights.visibility * bce
