"""Task-promptable region captioner over RoI features and query embeddings."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import VOCAB, SceneObject
from .layers import FFN, Attention, bilinear_sample

TASKS = ("recognize", "caption", "ocr", "qa")
TRAINED_TASKS = ("recognize", "caption")


def roi_align(feature_map: Tensor, boxes: Tensor, size: int = 3, sampling: int = 2) -> Tensor:
    """Bilinear RoIAlign without quantization.

    ``feature_map`` (d, H, W); ``boxes`` (N, 4) normalized cxcywh.
    Each of the S x S bins averages ``sampling`` x ``sampling`` regularly spaced
    bilinear samples. Returns (N, d, S, S).
    """
    if boxes.dim() == 1:
        boxes = boxes[None]
    if (boxes[:, 2:] <= 0).any():
        raise ValueError("degenerate RoI box")
    N = boxes.shape[0]
    d = feature_map.shape[0]
    g = size * sampling
    frac = (torch.arange(g, dtype=boxes.dtype) + 0.5) / g - 0.5  # offsets in box units
    x = boxes[:, 0:1] + frac[None] * boxes[:, 2:3]  # (N, g)
    y = boxes[:, 1:2] + frac[None] * boxes[:, 3:4]
    pts = torch.stack(torch.broadcast_tensors(x[:, None, :], y[:, :, None]), -1).reshape(1, N, g * g, 2)
    vals = bilinear_sample(feature_map[None], pts)[0]  # (d, N, g*g)
    vals = vals.view(d, N, size, sampling, size, sampling).mean((3, 5))
    return vals.permute(1, 0, 2, 3)


class LanguageHead(nn.Module):
    """Object tokens (RoI grid + query) and a task token condition a small
    causal transformer that generates closed-vocabulary text."""

    def __init__(self, d: int = 128, d_lm: int = 128, vocab_size: int = len(VOCAB), roi_size: int = 3, n_layers: int = 2, n_heads: int = 4, max_len: int = 8):
        super().__init__()
        self.roi_size = roi_size
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.object_proj = nn.Linear(d, d_lm)
        self.task_tokens = nn.ParameterDict({t: nn.Parameter(torch.randn(d_lm) * 0.02) for t in TASKS})
        self.token_embed = nn.Embedding(vocab_size, d_lm)
        n_prefix = roi_size * roi_size + 2
        self.pos = nn.Parameter(torch.randn(n_prefix + max_len + 1, d_lm) * 0.02)
        self.norms = nn.ModuleList(nn.LayerNorm(d_lm) for _ in range(n_layers))
        self.attns = nn.ModuleList(Attention(d_lm, n_heads) for _ in range(n_layers))
        self.ffns = nn.ModuleList(FFN(d_lm, 2 * d_lm) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_lm)
        self.lm_head = nn.Linear(d_lm, vocab_size)

    @property
    def num_object_tokens(self) -> int:
        return self.roi_size * self.roi_size + 1

    def build_object_tokens(self, roi_feat: Tensor, query_content: Tensor) -> Tensor:
        """(N, d, S, S) and (N, d) -> (N, S*S + 1, d_lm)."""
        grid = roi_feat.flatten(2).transpose(1, 2)
        return self.object_proj(torch.cat([grid, query_content[:, None]], dim=1))

    def region_tokens(self, feature_map: Tensor, boxes: Tensor, query_content: Tensor) -> Tensor:
        return self.build_object_tokens(roi_align(feature_map, boxes, self.roi_size), query_content)

    def _task(self, tasks: Sequence[str] | str, n: int) -> Tensor:
        if isinstance(tasks, str):
            tasks = [tasks] * n
        for t in tasks:
            if t not in self.task_tokens:
                raise KeyError(f"unknown task {t!r}; known: {list(self.task_tokens)}")
        return torch.stack([self.task_tokens[t] for t in tasks])

    def logits(self, obj: Tensor, tasks: Sequence[str] | str, inputs: Tensor) -> Tensor:
        """Next-token logits for each text input position.

        ``inputs`` (N, L) starts with BOS; returns (N, L, V).
        """
        N, L = inputs.shape
        prefix = torch.cat([obj, self._task(tasks, N)[:, None]], dim=1)
        M = prefix.shape[1]
        x = torch.cat([prefix, self.token_embed(inputs)], dim=1)
        x = x + self.pos[: M + L]
        n = M + L
        idx = torch.arange(n)
        # prefix attends bidirectionally within itself; text attends to prefix and its past
        blocked = (idx[None, :] > idx[:, None]) & (idx[None, :] >= M)
        for norm, attn, ffn in zip(self.norms, self.attns, self.ffns):
            h = norm(x)
            x = x + attn(h, h, h, attn_mask=blocked)
            x = ffn(x)
        return self.lm_head(self.norm(x[:, M:]))

    def caption_loss(self, obj: Tensor, tasks: Sequence[str] | str, targets: Sequence[Sequence[int]]) -> Tensor:
        """Teacher-forced mean cross-entropy over target tokens up to and including EOS."""
        if not targets or any(len(t) == 0 for t in targets):
            raise ValueError("empty caption target")
        eos = VOCAB.eos_id
        lens = []
        for t in targets:
            if eos not in t:
                raise ValueError("caption targets must end with EOS")
            lens.append(list(t).index(eos) + 1)
        L = max(lens)
        tgt = torch.full((len(targets), L), -100, dtype=torch.long)
        inp = torch.full((len(targets), L), VOCAB.pad_id, dtype=torch.long)
        for i, (t, n) in enumerate(zip(targets, lens)):
            tgt[i, :n] = torch.tensor(list(t)[:n])
            inp[i, 0] = VOCAB.bos_id
            inp[i, 1:n] = torch.tensor(list(t)[: n - 1])
        logits = self.logits(obj, tasks, inp)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)

    @torch.no_grad()
    def generate(self, obj: Tensor, tasks: Sequence[str] | str, max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding; stops at EOS or ``max_len`` tokens."""
        max_len = self.max_len if max_len is None else max_len
        if not 1 <= max_len <= self.max_len:
            raise ValueError(f"max_len must be in [1, {self.max_len}]")
        N = obj.shape[0]
        seq = torch.full((N, 1), VOCAB.bos_id, dtype=torch.long)
        done = torch.zeros(N, dtype=torch.bool)
        out: list[list[int]] = [[] for _ in range(N)]
        for _ in range(max_len):
            nxt = self.logits(obj, tasks, seq)[:, -1].argmax(-1)
            for i in range(N):
                if not done[i]:
                    out[i].append(int(nxt[i]))
            done |= nxt == VOCAB.eos_id
            if done.all():
                break
            seq = torch.cat([seq, nxt[:, None]], dim=1)
        return out


def task_target(obj: SceneObject, task: str) -> list[int]:
    cat = obj.category
    if task == "recognize":
        words = [cat.color, cat.shape_kind]
    elif task == "caption":
        words = [cat.color, obj.size_word, cat.shape_kind]
    else:
        raise ValueError(f"no synthetic targets for task {task!r}")
    return VOCAB.encode(words) + [VOCAB.eos_id]


def decode_text(tokens: Sequence[int]) -> str:
    return VOCAB.decode(tokens)

