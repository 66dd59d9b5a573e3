"""Prompt encoders: text, visual (box / point) and customized prompt embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn

from .data import VOCAB, Vocabulary
from .layers import FFN, Attention, MSDeformAttn

TEXT, VISUAL, CUSTOMIZED = "text", "visual", "customized"
UNIVERSAL = "universal"


@dataclass
class TextPrompt:
    token_ids: list[int]
    phrase_boundaries: list[tuple[int, int]]
    phrases: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise ValueError("text prompt has no tokens")
        end = 0
        for start, stop in self.phrase_boundaries:
            if start < end or stop <= start or stop > len(self.token_ids):
                raise ValueError(f"invalid phrase boundary ({start}, {stop}) for {len(self.token_ids)} tokens")
            end = stop

    @classmethod
    def from_phrases(cls, phrases: Sequence[str], vocab: Vocabulary = VOCAB) -> "TextPrompt":
        ids: list[int] = []
        bounds = []
        for p in phrases:
            toks = vocab.encode(p)
            bounds.append((len(ids), len(ids) + len(toks)))
            ids.extend(toks)
        return cls(ids, bounds, list(phrases))

    def phrase_ids(self) -> list[int]:
        out = [-1] * len(self.token_ids)
        for k, (a, b) in enumerate(self.phrase_boundaries):
            for t in range(a, b):
                out[t] = k
        return out


@dataclass
class VisualPrompt:
    kind: str
    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        self.coords = tuple(float(c) for c in self.coords)
        if self.kind == "box":
            if len(self.coords) != 4 or self.coords[2] <= 0 or self.coords[3] <= 0:
                raise ValueError(f"box prompt needs (cx, cy, w, h) with w, h > 0, got {self.coords}")
        elif self.kind == "point":
            if len(self.coords) != 2:
                raise ValueError(f"point prompt needs (x, y), got {self.coords}")
        else:
            raise ValueError(f"unknown visual prompt kind {self.kind!r}")
        if any(c < 0 or c > 1 for c in self.coords):
            raise ValueError(f"visual prompt coords must lie in [0, 1], got {self.coords}")

    @property
    def center(self) -> tuple[float, float]:
        return self.coords[0], self.coords[1]


@dataclass
class PromptEmbedding:
    """Batched prompt tokens.

    ``tokens`` (B, T, d); ``valid_mask`` (B, T) bool; ``phrase_ids`` (B, T)
    long naming the phrase each token belongs to (-1 for none). Invalid rows
    are zero.
    """

    tokens: Tensor
    valid_mask: Tensor
    source: str
    phrase_ids: Tensor
    phrases: list[list[str]] = field(default_factory=list)

    @property
    def num_phrases(self) -> int:
        return int(self.phrase_ids.max().item()) + 1 if self.phrase_ids.numel() else 0

    def replace(self, tokens: Tensor) -> "PromptEmbedding":
        return PromptEmbedding(tokens * self.valid_mask[..., None], self.valid_mask, self.source, self.phrase_ids, self.phrases)

    def phrase_tokens(self) -> tuple[Tensor, Tensor]:
        """Mean-pool token rows per phrase -> (B, P, d) and phrase mask (B, P)."""
        P = max(self.num_phrases, 1)
        onehot = (self.phrase_ids[:, None, :] == torch.arange(P, device=self.tokens.device)[None, :, None]).to(self.tokens.dtype)
        count = onehot.sum(-1)
        pooled = onehot @ self.tokens / count.clamp(min=1)[..., None]
        return pooled, count > 0

    @staticmethod
    def cat_batch(items: Sequence["PromptEmbedding"]) -> "PromptEmbedding":
        T = max(p.tokens.shape[1] for p in items)
        d = items[0].tokens.shape[-1]
        B = sum(p.tokens.shape[0] for p in items)
        tokens = items[0].tokens.new_zeros(B, T, d)
        valid = torch.zeros(B, T, dtype=torch.bool)
        pid = torch.full((B, T), -1, dtype=torch.long)
        phrases: list[list[str]] = []
        i = 0
        for p in items:
            b, t = p.tokens.shape[:2]
            tokens[i : i + b, :t] = p.tokens
            valid[i : i + b, :t] = p.valid_mask
            pid[i : i + b, :t] = p.phrase_ids
            phrases.extend(p.phrases or [[] for _ in range(b)])
            i += b
        return PromptEmbedding(tokens, valid, items[0].source, pid, phrases)


# ---------------------------------------------------------------------------
# text


class TextEncoder(nn.Module):
    """Token table plus bidirectional self-attention restricted to each phrase."""

    def __init__(self, vocab_size: int, d: int = 128, n_layers: int = 2, n_heads: int = 4, max_phrase_len: int = 8):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, d)
        self.pos = nn.Embedding(max_phrase_len, d)
        self.attn_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_layers))
        self.attns = nn.ModuleList(Attention(d, n_heads) for _ in range(n_layers))
        self.ffns = nn.ModuleList(FFN(d, 2 * d) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)
        nn.init.normal_(self.embed.weight, std=1.0)
        nn.init.normal_(self.pos.weight, std=0.1)

    def forward(self, prompts: Sequence[TextPrompt]) -> PromptEmbedding:
        if not prompts:
            raise ValueError("no text prompts given")
        B = len(prompts)
        T = max(len(p.token_ids) for p in prompts)
        ids = torch.zeros(B, T, dtype=torch.long)
        pid = torch.full((B, T), -1, dtype=torch.long)
        pos = torch.zeros(B, T, dtype=torch.long)
        valid = torch.zeros(B, T, dtype=torch.bool)
        for b, p in enumerate(prompts):
            for t in p.token_ids:
                if not 0 <= t < self.vocab_size:
                    raise ValueError(f"unknown token id {t} (vocabulary size {self.vocab_size})")
            n = len(p.token_ids)
            ids[b, :n] = torch.tensor(p.token_ids)
            valid[b, :n] = True
            pid[b, :n] = torch.tensor(p.phrase_ids())
            for a, e in p.phrase_boundaries:
                pos[b, a:e] = torch.arange(e - a).clamp(max=self.pos.num_embeddings - 1)
        x = self.embed(ids) + self.pos(pos)
        # tokens outside any phrase form their own singleton group
        group = torch.where(pid >= 0, pid, -2 - torch.arange(T)[None, :].expand(B, T))
        block = group[:, :, None] != group[:, None, :]
        for norm, attn, ffn in zip(self.attn_norms, self.attns, self.ffns):
            h = norm(x)
            x = x + attn(h, h, h, key_padding_mask=~valid, attn_mask=block)
            x = ffn(x)
        x = self.norm(x) * valid[..., None]
        return PromptEmbedding(x, valid, TEXT, pid, [list(p.phrases) for p in prompts])


# ---------------------------------------------------------------------------
# visual


def sincos_embed(coords: Sequence[float] | Tensor, per_coord_dim: int) -> Tensor:
    """Interleaved sin/cos features of each coordinate, concatenated in input order.

    For coordinate c and i < per_coord_dim / 2 the pair is
    (sin(c * w_i), cos(c * w_i)) with w_i = 10000 ** (-2 i / per_coord_dim).
    Accepts a (..., C) tensor for batched use.
    """
    if per_coord_dim % 2:
        raise ValueError(f"per_coord_dim must be even, got {per_coord_dim}")
    c = coords if isinstance(coords, Tensor) else torch.tensor(list(coords), dtype=torch.float64)
    if ((c < 0) | (c > 1)).any():
        raise ValueError("coordinates must lie in [0, 1]")
    i = torch.arange(per_coord_dim // 2, dtype=c.dtype)
    omega = 10000.0 ** (-2 * i / per_coord_dim)
    ang = c[..., None] * omega
    return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-3)


class VisualPromptEncoder(nn.Module):
    """Box / point prompts -> sine-cosine features -> kind-specific projection,
    refined by deformable cross-attention into the multi-scale image features."""

    def __init__(self, d: int = 128, n_levels: int = 3, n_layers: int = 1, n_heads: int = 4, n_points: int = 4):
        super().__init__()
        if d % 4:
            raise ValueError("hidden dim must be divisible by 4")
        self.d = d
        self.box_proj = nn.Linear(d, d)
        self.point_proj = nn.Linear(d, d)
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_layers))
        self.attns = nn.ModuleList(MSDeformAttn(d, n_levels, n_heads, n_points) for _ in range(n_layers))
        self.ffns = nn.ModuleList(FFN(d, 2 * d) for _ in range(n_layers))

    def project(self, prompt: VisualPrompt) -> Tensor:
        if prompt.kind == "box":
            feats = sincos_embed(prompt.coords, self.d // 4)
            return self.box_proj(feats.to(self.box_proj.weight.dtype))
        feats = sincos_embed(prompt.coords, self.d // 2)
        return self.point_proj(feats.to(self.point_proj.weight.dtype))

    def embed(self, prompts: Sequence[Sequence[VisualPrompt]], phrase_ids: Sequence[Sequence[int]] | None = None) -> tuple[PromptEmbedding, Tensor]:
        """Project per-image prompt lists; returns the embedding and reference boxes (B, T, 4).

        Point prompts get a zero-size reference so refinement samples around the point.
        """
        B = len(prompts)
        T = max(len(p) for p in prompts)
        if T == 0:
            raise ValueError("every image needs at least one visual prompt")
        tokens = self.box_proj.weight.new_zeros(B, T, self.d)
        ref = torch.full((B, T, 4), 0.5)
        ref[..., 2:] = 0.0
        valid = torch.zeros(B, T, dtype=torch.bool)
        pid = torch.full((B, T), -1, dtype=torch.long)
        for b, plist in enumerate(prompts):
            for t, p in enumerate(plist):
                tokens[b, t] = self.project(p)
                valid[b, t] = True
                pid[b, t] = 0 if phrase_ids is None else phrase_ids[b][t]
                if p.kind == "box":
                    ref[b, t] = torch.tensor(p.coords)
                else:
                    ref[b, t, :2] = torch.tensor(p.coords)
        return PromptEmbedding(tokens, valid, VISUAL, pid), ref

    def refine(self, emb: PromptEmbedding, reference: Tensor, values: Tensor, shapes) -> PromptEmbedding:
        if emb.source != VISUAL:
            raise ValueError("refine expects a visual prompt embedding")
        if values.shape[-1] != emb.tokens.shape[-1]:
            raise ValueError(f"feature dim {values.shape[-1]} != prompt dim {emb.tokens.shape[-1]}")
        x = emb.tokens
        has_box = reference[..., 2:].gt(0).all(-1, keepdim=True)
        ref = torch.where(has_box, reference, torch.cat([reference[..., :2], torch.full_like(reference[..., 2:], 0.1)], -1))
        for norm, attn, ffn in zip(self.norms, self.attns, self.ffns):
            x = x + attn(norm(x), ref, values, shapes)
            x = ffn(x)
        return emb.replace(x)


# ---------------------------------------------------------------------------
# customized


class CustomizedPromptBank(nn.Module):
    """Named learnable prompt matrices. ``universal`` is registered at build time."""

    def __init__(self, d: int = 128, universal_tokens: int = 16):
        super().__init__()
        self.d = d
        self.prompts = nn.ParameterDict()
        self.register(UNIVERSAL, universal_tokens)

    def register(self, name: str, n_tokens: int, init: Tensor | None = None) -> None:
        if name in self.prompts:
            raise ValueError(f"customized prompt {name!r} already registered")
        if "." in name or not name:
            raise ValueError(f"invalid prompt name {name!r}")
        value = torch.zeros(n_tokens, self.d) if init is None else init.detach().clone().reshape(n_tokens, self.d)
        self.prompts[name] = nn.Parameter(value)

    def names(self) -> list[str]:
        return sorted(self.prompts.keys())

    def get(self, name: str, batch: int = 1) -> PromptEmbedding:
        if name not in self.prompts:
            raise KeyError(f"unknown customized prompt {name!r}; known: {', '.join(self.names())}")
        p = self.prompts[name]
        T = p.shape[0]
        return PromptEmbedding(
            p[None].expand(batch, T, self.d),
            torch.ones(batch, T, dtype=torch.bool),
            CUSTOMIZED,
            torch.zeros(batch, T, dtype=torch.long),
            [[name] for _ in range(batch)],
        )
