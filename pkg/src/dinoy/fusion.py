"""Shared trunk: conv backbone, deep early-fusion encoder, language-guided
query selection and the box-refining transformer decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .boxes import inverse_sigmoid
from .layers import FFN, MLP, Attention, MSDeformAttn, sincos_position
from .prompts import PromptEmbedding

STRIDES = (4, 8, 16, 32)
MEMORY_STRIDES = (8, 16, 32)


@dataclass
class MultiScaleFeatures:
    """Pyramid at strides 4/8/16/32 projected to d; ``raw_s4`` keeps backbone channels."""

    levels: list[tuple[int, Tensor]]
    raw_s4: Tensor

    def level(self, stride: int) -> Tensor:
        for s, f in self.levels:
            if s == stride:
                return f
        raise KeyError(stride)

    def flatten(self, strides: Sequence[int] = MEMORY_STRIDES) -> tuple[Tensor, list[tuple[int, int]]]:
        maps = [self.level(s) for s in strides]
        shapes = [(m.shape[2], m.shape[3]) for m in maps]
        tokens = torch.cat([m.flatten(2).transpose(1, 2) for m in maps], dim=1)
        return tokens, shapes


@dataclass
class FusedMemory:
    tokens: Tensor  # (B, N, d)
    shapes: list[tuple[int, int]]
    level_index: Tensor  # (N,)
    positions: Tensor  # (N, 2) normalized token centers
    prompt: PromptEmbedding

    def level_map(self, level: int) -> Tensor:
        B, _, d = self.tokens.shape
        sizes = [h * w for h, w in self.shapes]
        start = sum(sizes[:level])
        h, w = self.shapes[level]
        return self.tokens[:, start : start + sizes[level]].transpose(1, 2).reshape(B, d, h, w)


@dataclass
class QuerySet:
    content: Tensor  # (B, Q, d)
    anchors: Tensor  # (B, Q, 4) normalized cxcywh
    selection_scores: Tensor  # (B, Q)
    indices: Tensor  # (B, Q) memory token indices


def token_grid(shapes: Sequence[tuple[int, int]], device=None) -> tuple[Tensor, Tensor]:
    """Normalized centers (N, 2) and level ids (N,) for flattened pyramid tokens."""
    pos, lvl = [], []
    for i, (h, w) in enumerate(shapes):
        ys, xs = torch.meshgrid(
            (torch.arange(h, dtype=torch.float32, device=device) + 0.5) / h,
            (torch.arange(w, dtype=torch.float32, device=device) + 0.5) / w,
            indexing="ij",
        )
        pos.append(torch.stack([xs, ys], -1).reshape(-1, 2))
        lvl.append(torch.full((h * w,), i, dtype=torch.long, device=device))
    return torch.cat(pos), torch.cat(lvl)


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False),
            nn.GroupNorm(8, c_out),
            nn.ReLU(inplace=True),
        )


class Backbone(nn.Module):
    """Small strided convnet producing the 4-level pyramid."""

    def __init__(self, d: int = 128, channels: Sequence[int] = (32, 48, 96, 128, 160)):
        super().__init__()
        c0, c4, c8, c16, c32 = channels
        self.stem = nn.Sequential(ConvBlock(3, c0, 2), ConvBlock(c0, c0))
        self.s4 = nn.Sequential(ConvBlock(c0, c4, 2), ConvBlock(c4, c4))
        self.s8 = nn.Sequential(ConvBlock(c4, c8, 2), ConvBlock(c8, c8))
        self.s16 = nn.Sequential(ConvBlock(c8, c16, 2), ConvBlock(c16, c16))
        self.s32 = nn.Sequential(ConvBlock(c16, c32, 2))
        self.raw_channels = c4
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, d, 1), nn.GroupNorm(8, d)) for c in (c4, c8, c16, c32)
        )

    def forward(self, images: Tensor) -> MultiScaleFeatures:
        H, W = images.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"image size {H}x{W} is not divisible by 32; pad to {-(-H // 32) * 32}x{-(-W // 32) * 32}")
        x = self.stem(images)
        f4 = self.s4(x)
        f8 = self.s8(f4)
        f16 = self.s16(f8)
        f32 = self.s32(f16)
        levels = [(s, p(f)) for s, p, f in zip(STRIDES, self.proj, (f4, f8, f16, f32))]
        return MultiScaleFeatures(levels, f4)


class FusionLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, n_levels: int, n_points: int, d_ff: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MSDeformAttn(d, n_levels, n_heads, n_points)
        self.norm_i2p = nn.LayerNorm(d)
        self.norm_i2p_kv = nn.LayerNorm(d)
        self.img_from_prompt = Attention(d, n_heads)
        self.norm_pself = nn.LayerNorm(d)
        self.prompt_self = Attention(d, n_heads)
        self.norm_p2i = nn.LayerNorm(d)
        self.norm_p2i_kv = nn.LayerNorm(d)
        self.prompt_from_img = Attention(d, n_heads)
        self.ffn_img = FFN(d, d_ff)
        self.ffn_prompt = FFN(d, d_ff)

    def forward(self, img: Tensor, pos: Tensor, ref: Tensor, shapes, prompt: Tensor | None, prompt_valid: Tensor | None):
        h = self.norm_self(img)
        img = img + self.self_attn(h + pos, ref, h, shapes)
        if prompt is not None:
            pad = ~prompt_valid
            kv = self.norm_i2p_kv(prompt)
            img = img + self.img_from_prompt(self.norm_i2p(img) + pos, kv, kv, key_padding_mask=pad)
            hp = self.norm_pself(prompt)
            prompt = prompt + self.prompt_self(hp, hp, hp, key_padding_mask=pad)
            hi = self.norm_p2i_kv(img)
            prompt = prompt + self.prompt_from_img(self.norm_p2i(prompt), hi + pos, hi)
            prompt = self.ffn_prompt(prompt) * prompt_valid[..., None]
        img = self.ffn_img(img)
        return img, prompt


class EarlyFusionEncoder(nn.Module):
    """Deformable self-attention over image tokens interleaved with
    bidirectional image/prompt cross-attention."""

    def __init__(self, d: int = 128, n_layers: int = 3, n_heads: int = 4, n_points: int = 4, d_ff: int = 256):
        super().__init__()
        self.d = d
        self.level_embed = nn.Parameter(torch.zeros(len(MEMORY_STRIDES), d))
        nn.init.normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList(FusionLayer(d, n_heads, len(MEMORY_STRIDES), n_points, d_ff) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)
        self.prompt_norm = nn.LayerNorm(d)

    def forward(self, feats: MultiScaleFeatures, prompt: PromptEmbedding | None) -> FusedMemory:
        tokens, shapes = feats.flatten(MEMORY_STRIDES)
        B, N, d = tokens.shape
        if d != self.d:
            raise ValueError(f"feature dim {d} != encoder dim {self.d}")
        positions, levels = token_grid(shapes, tokens.device)
        pos = sincos_position(positions, d // 2) + self.level_embed[levels]
        ref = positions[None].expand(B, N, 2)
        p = None
        valid = None
        if prompt is not None:
            if prompt.tokens.shape[-1] != d:
                raise ValueError(f"prompt dim {prompt.tokens.shape[-1]} != encoder dim {d}")
            p, valid = prompt.tokens, prompt.valid_mask
        x = tokens
        for layer in self.layers:
            x, p = layer(x, pos[None], ref, shapes, p, valid)
        x = self.norm(x)
        if prompt is not None:
            fused = prompt.replace(self.prompt_norm(p))
        else:
            fused = None
        return FusedMemory(x, shapes, levels, positions, fused)


def query_selection_scores(memory: Tensor, prompt: Tensor, valid: Tensor) -> Tensor:
    """(B, N, d) x (B, T, d) -> (B, N, T) scaled dot products, invalid tokens at -inf."""
    sim = memory @ prompt.transpose(1, 2) / memory.shape[-1] ** 0.5
    return sim.masked_fill(~valid[:, None, :], float("-inf"))


def select_top_tokens(memory: Tensor, prompt: Tensor, valid: Tensor, num_queries: int) -> tuple[Tensor, Tensor, Tensor]:
    """Top-Q memory tokens ranked by their best similarity to any valid prompt token.

    Returns (indices (B, Q), scores (B, Q), token similarities (B, N, T)).
    """
    N = memory.shape[1]
    if num_queries > N:
        raise ValueError(f"cannot select {num_queries} queries from {N} memory tokens")
    sim = query_selection_scores(memory, prompt, valid)
    best = sim.max(-1).values
    scores, idx = best.topk(num_queries, dim=1, sorted=True)
    return idx, scores, sim


class QuerySelector(nn.Module):
    def __init__(self, d: int = 128, detach_content: bool = True):
        super().__init__()
        self.detach_content = detach_content
        self.pos_mlp = MLP(d, d, 4, 3, zero_init_last=True)

    def forward(self, memory: FusedMemory, num_queries: int) -> tuple[QuerySet, Tensor]:
        prompt = memory.prompt
        idx, scores, sim = select_top_tokens(memory.tokens, prompt.tokens, prompt.valid_mask, num_queries)
        B, Q = idx.shape
        d = memory.tokens.shape[-1]
        sel = memory.tokens.gather(1, idx[..., None].expand(B, Q, d))
        base = base_anchors(memory.positions, memory.level_index)[idx]
        anchors = (self.pos_mlp(sel) + inverse_sigmoid(base)).sigmoid()
        content = sel.detach() if self.detach_content else sel
        token_logits = sim.gather(1, idx[..., None].expand(B, Q, sim.shape[-1]))
        return QuerySet(content, anchors, scores, idx), token_logits


def base_anchors(positions: Tensor, levels: Tensor, base_size: float = 0.05) -> Tensor:
    wh = base_size * (2.0 ** levels.to(positions.dtype))
    return torch.cat([positions, wh[:, None].expand(-1, 2)], dim=-1)


class DecoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, n_levels: int, n_points: int, d_ff: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = Attention(d, n_heads)
        self.norm_prompt = nn.LayerNorm(d)
        self.prompt_attn = Attention(d, n_heads)
        self.norm_cross = nn.LayerNorm(d)
        self.cross_attn = MSDeformAttn(d, n_levels, n_heads, n_points)
        self.ffn = FFN(d, d_ff)

    def forward(self, x, qpos, anchors, memory: FusedMemory):
        h = self.norm_self(x) + qpos
        x = x + self.self_attn(h, h, self.norm_self(x))
        p = memory.prompt
        x = x + self.prompt_attn(self.norm_prompt(x) + qpos, p.tokens, p.tokens, key_padding_mask=~p.valid_mask)
        x = x + self.cross_attn(self.norm_cross(x) + qpos, anchors, memory.tokens, memory.shapes)
        return self.ffn(x)


class Decoder(nn.Module):
    """D layers; each refines the boxes with a zero-initialized delta MLP in logit space."""

    def __init__(self, d: int = 128, n_layers: int = 3, n_heads: int = 4, n_points: int = 4, d_ff: int = 256):
        super().__init__()
        self.d = d
        self.layers = nn.ModuleList(DecoderLayer(d, n_heads, len(MEMORY_STRIDES), n_points, d_ff) for _ in range(n_layers))
        self.query_pos = MLP(2 * d, d, d, 2)
        self.norm = nn.LayerNorm(d)
        self.box_heads = nn.ModuleList(MLP(d, d, 4, 3, zero_init_last=True) for _ in range(n_layers))

    def forward(self, queries: QuerySet, memory: FusedMemory) -> list[tuple[Tensor, Tensor]]:
        x = queries.content
        anchors = queries.anchors.detach()
        outputs = []
        for layer, box_head in zip(self.layers, self.box_heads):
            qpos = self.query_pos(sincos_position(anchors, self.d // 2))
            x = layer(x, qpos, anchors, memory)
            content = self.norm(x)
            boxes = (inverse_sigmoid(anchors) + box_head(content)).sigmoid()
            outputs.append((content, boxes))
            anchors = boxes.detach()
        return outputs


def apply_box_delta(anchors: Tensor, delta: Tensor) -> Tensor:
    return (inverse_sigmoid(anchors) + delta).sigmoid()
