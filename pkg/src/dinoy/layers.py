"""Shared transformer building blocks: attention, MLPs, multi-scale deformable attention."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

NEG = -1e9


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, n_layers: int, zero_init_last: bool = False):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        if zero_init_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class FFN(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc2(F.relu(self.fc1(self.norm(x))))


class Attention(nn.Module):
    """Multi-head attention with explicit masking.

    ``key_padding_mask`` is (B, Nk) with True marking keys to ignore;
    ``attn_mask`` is a bool (Nq, Nk) or (B, Nq, Nk) with True marking blocked pairs.
    Fully blocked rows fall back to uniform weights instead of NaN.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.d, self.h = d, n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_padding_mask: Tensor | None = None,
        attn_mask: Tensor | None = None,
    ) -> Tensor:
        B, Nq, _ = query.shape
        Nk = key.shape[1]
        dh = self.d // self.h
        q = self.q(query).view(B, Nq, self.h, dh).transpose(1, 2)
        k = self.k(key).view(B, Nk, self.h, dh).transpose(1, 2)
        v = self.v(value).view(B, Nk, self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], NEG)
        if attn_mask is not None:
            m = attn_mask if attn_mask.dim() == 3 else attn_mask[None]
            scores = scores.masked_fill(m[:, None], NEG)
        w = scores.softmax(-1)
        return self.out((w @ v).transpose(1, 2).reshape(B, Nq, self.d))


def sincos_position(x: Tensor, n_feats: int, temperature: float = 10000.0, scale: float = 2 * math.pi) -> Tensor:
    """DETR-style embedding of (..., C) coordinates into (..., C * n_feats)."""
    dim_t = torch.arange(n_feats // 2, dtype=x.dtype, device=x.device)
    freq = temperature ** (2 * dim_t / n_feats)
    pos = x[..., None] * scale / freq
    pos = torch.stack([pos.sin(), pos.cos()], dim=-1).flatten(-2)
    return pos.flatten(-2)


def bilinear_sample(maps: Tensor, points: Tensor) -> Tensor:
    """Sample (B, C, H, W) maps at (B, N, P, 2) normalized (x, y) points -> (B, C, N, P).

    Pixel i spans [i/W, (i+1)/W]; samples outside the map clamp to the border.
    """
    return F.grid_sample(maps, 2 * points - 1, mode="bilinear", padding_mode="border", align_corners=False)


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention.

    Each query predicts ``n_points`` sampling offsets and weights per head and
    level around its reference point; weights are softmax-normalized jointly
    over levels and points. Reference points are (x, y) or (cx, cy, w, h); with
    boxes the offsets are scaled by the box size.
    """

    def __init__(self, d: int, n_levels: int, n_heads: int = 4, n_points: int = 4):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.d, self.L, self.H, self.P = d, n_levels, n_heads, n_points
        self.sampling_offsets = nn.Linear(d, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d, d)
        self.output_proj = nn.Linear(d, d)
        self._reset()

    def _reset(self) -> None:
        nn.init.zeros_(self.sampling_offsets.weight)
        theta = torch.arange(self.H, dtype=torch.float32) * (2 * math.pi / self.H)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.H, 1, 1, 2).repeat(1, self.L, self.P, 1)
        for i in range(self.P):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling(self, query: Tensor, reference: Tensor, shapes: Sequence[tuple[int, int]]) -> tuple[Tensor, Tensor]:
        """Return sampling locations (B, Nq, H, L, P, 2) and weights (B, Nq, H, L, P)."""
        B, Nq, _ = query.shape
        off = self.sampling_offsets(query).view(B, Nq, self.H, self.L, self.P, 2)
        w = self.attention_weights(query).view(B, Nq, self.H, self.L * self.P).softmax(-1)
        w = w.view(B, Nq, self.H, self.L, self.P)
        if reference.shape[-1] == 2:
            norm = torch.tensor([[w_, h_] for h_, w_ in shapes], dtype=query.dtype, device=query.device)
            loc = reference[:, :, None, None, None, :] + off / norm[None, None, None, :, None, :]
        else:
            loc = reference[:, :, None, None, None, :2] + off / self.P * reference[:, :, None, None, None, 2:] * 0.5
        return loc, w

    def forward(
        self,
        query: Tensor,
        reference: Tensor,
        value: Tensor,
        shapes: Sequence[tuple[int, int]],
        value_padding_mask: Tensor | None = None,
    ) -> Tensor:
        B, Nq, _ = query.shape
        if value.shape[-1] != self.d or query.shape[-1] != self.d:
            raise ValueError(f"feature dim mismatch: query {query.shape[-1]}, value {value.shape[-1]}, expected {self.d}")
        if len(shapes) != self.L:
            raise ValueError(f"expected {self.L} levels, got {len(shapes)}")
        v = self.value_proj(value)
        if value_padding_mask is not None:
            v = v.masked_fill(value_padding_mask[..., None], 0.0)
        loc, w = self.sampling(query, reference, shapes)
        dh = self.d // self.H
        sizes = [h * w_ for h, w_ in shapes]
        out = 0
        for lvl, (v_l, (h, w_)) in enumerate(zip(v.split(sizes, dim=1), shapes)):
            maps = v_l.view(B, h, w_, self.H, dh).permute(0, 3, 4, 1, 2).reshape(B * self.H, dh, h, w_)
            pts = loc[:, :, :, lvl].permute(0, 2, 1, 3, 4).reshape(B * self.H, Nq, self.P, 2)
            sampled = bilinear_sample(maps, pts)  # (B*H, dh, Nq, P)
            wl = w[:, :, :, lvl].permute(0, 2, 1, 3).reshape(B * self.H, 1, Nq, self.P)
            out = out + (sampled * wl).sum(-1)
        out = out.view(B, self.H, dh, Nq).permute(0, 3, 1, 2).reshape(B, Nq, self.d)
        return self.output_proj(out)
