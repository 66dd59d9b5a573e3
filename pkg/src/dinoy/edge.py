"""Compact student model: teacher distillation, normalized half-precision
matmul and a persistent prompt-embedding cache."""

from __future__ import annotations

import dataclasses
import hashlib
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import container
from .checkpoint import Checkpoint, named_arrays, params_digest
from .data import DataConfig, make_splits
from .heads import MatchWeights, hungarian_match
from .model import DinoY, GroundingCriterion, LossWeights, ModelConfig, images_tensor
from .prompts import TEXT, PromptEmbedding, TextPrompt
from .training import MetricsLog, TrainConfig, _batches, _set_lr, check_contamination, lr_factor, seed_everything, stage1_param_groups, text_batch, visual_batch

# ---------------------------------------------------------------------------
# student


@dataclass(frozen=True)
class StudentConfig:
    d: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    backbone_channels: tuple[int, ...] = (16, 24, 48, 64, 80)

    def model_config(self, teacher: ModelConfig) -> ModelConfig:
        if self.d >= teacher.d:
            raise ValueError(f"student width {self.d} must be below teacher width {teacher.d}")
        if self.enc_layers > teacher.enc_layers or self.dec_layers > teacher.dec_layers:
            raise ValueError("student cannot be deeper than the teacher")
        return dataclasses.replace(
            teacher,
            d=self.d,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            d_ff=self.d_ff,
            backbone_channels=tuple(self.backbone_channels),
            lm_dim=self.d,
        )


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class Student(nn.Module):
    """Smaller detector plus a linear adapter lifting its encoder memory to the teacher width."""

    def __init__(self, config: StudentConfig, teacher_config: ModelConfig, teacher_params: int | None = None):
        super().__init__()
        self.student_config = config
        self.model = DinoY(config.model_config(teacher_config))
        self.adapter = nn.Linear(config.d, teacher_config.d)
        if teacher_params is not None and count_params(self) >= teacher_params:
            raise ValueError(f"student has {count_params(self)} parameters, teacher {teacher_params}")


def feature_distill_loss(student_feats: Tensor, teacher_feats: Tensor, adapter: Callable[[Tensor], Tensor]) -> Tensor:
    """Mean squared error between adapted student tokens and teacher tokens."""
    if student_feats.shape[:-1] != teacher_feats.shape[:-1]:
        raise ValueError(f"token grids differ: student {tuple(student_feats.shape)} vs teacher {tuple(teacher_feats.shape)}")
    return ((adapter(student_feats) - teacher_feats) ** 2).mean()


def response_distill_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if student_logits.numel() == 0:
        return student_logits.sum() * 0.0
    return ((student_logits - teacher_logits) ** 2).mean()


def matched_logit_pairs(student_out, teacher_out, targets) -> tuple[Tensor, Tensor]:
    """Final-layer logits of the student and teacher queries that match the same ground truth."""
    s_last, t_last = student_out["layers"][-1], teacher_out["layers"][-1]
    mask = student_out["phrase_mask"]
    s_rows, t_rows = [], []
    for b, t in enumerate(targets):
        if not len(t.boxes):
            continue
        ms = hungarian_match(s_last["logits"][b], s_last["boxes"][b], t.phrase, t.boxes)
        mt = hungarian_match(t_last["logits"][b], t_last["boxes"][b], t.phrase, t.boxes)
        qs = torch.tensor(ms.query_indices)
        qt = torch.tensor(mt.query_indices)
        valid = mask[b]
        s_rows.append(s_last["logits"][b, qs][:, valid].reshape(-1))
        t_rows.append(t_last["logits"][b, qt][:, valid].reshape(-1))
    if not s_rows:
        z = s_last["logits"].new_zeros(0)
        return z, z
    return torch.cat(s_rows), torch.cat(t_rows)


@dataclass
class DistillWeights:
    feature: float = 1.0
    response: float = 1.0


def distill_train(
    teacher_ck: Checkpoint,
    student_config: StudentConfig,
    cfg: TrainConfig,
    data: DataConfig | None = None,
    weights: DistillWeights | None = DistillWeights(),
    log_path=None,
    progress=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train a student with its own grounding loss plus, when ``weights`` is given,
    feature and response distillation toward the frozen teacher. ``weights=None``
    trains the same student from scratch under the identical budget and batches."""
    teacher_ck.require_stage1()
    data = data or DataConfig.from_dict(teacher_ck.data_config)
    cfg.validate()
    seed_everything(cfg.seed)
    teacher = teacher_ck.build_model()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = Student(student_config, teacher.config, count_params(teacher))
    student.train()
    groups = stage1_param_groups(student.model, cfg)
    groups[1]["params"] = list(groups[1]["params"]) + list(student.adapter.parameters())
    opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    crit = GroundingCriterion(LossWeights(**cfg.loss), MatchWeights(), n_points=cfg.mask_points)
    train = make_splits(data)["train"]
    held_out = {c.name for c in data.held_out}
    vocabulary = [c.name for c in data.held_in]
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = MetricsLog(log_path)
    t0 = time.perf_counter()
    for step, idx in enumerate(_batches(len(train), cfg.steps, cfg.batch_size, rng)):
        samples = [train[i] for i in idx]
        lr = _set_lr(opt, lr_factor(step, cfg.steps, cfg.warmup, cfg.min_lr_ratio))
        images = images_tensor(samples)
        if rng.random() < cfg.visual_fraction:
            vp, targets = visual_batch(samples, rng)
            check_contamination(samples, held_out)
            kwargs = {"visual": vp}
        else:
            prompts, targets, phrases = text_batch(samples, vocabulary, cfg.max_negatives, rng)
            check_contamination(samples, held_out, phrases)
            kwargs = {"text": prompts}
        out = student.model(images, **kwargs)
        loss, _ = crit(student.model, out, targets, gen)
        rec = {"step": step, "lr": lr, "task_loss": float(loss.detach())}
        if weights is not None:
            with torch.no_grad():
                t_out = teacher(images, **kwargs)
            f_loss = feature_distill_loss(out["memory"].tokens, t_out["memory"].tokens, student.adapter)
            s_log, t_log = matched_logit_pairs(out, t_out, targets)
            r_loss = response_distill_loss(s_log, t_log)
            loss = loss + weights.feature * f_loss + weights.response * r_loss
            rec.update(feature=float(f_loss.detach()), response=float(r_loss.detach()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], cfg.grad_clip)
        opt.step()
        rec.update(loss=float(loss.detach()), time=round(time.perf_counter() - t0, 3))
        log.write(rec)
        if progress:
            progress(rec)
    student.eval()
    record = {
        "stage": "1",
        "variant": "distilled-student" if weights is not None else "scratch-student",
        "teacher_digest": teacher_ck.frozen_digest,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "train_config": cfg.to_dict(),
        "student_config": {**dataclasses.asdict(student_config), "backbone_channels": list(student_config.backbone_channels)},
        "distill_weights": dataclasses.asdict(weights) if weights is not None else None,
    }
    ck = Checkpoint.from_model(student.model, [record], data.to_dict())
    return ck, log.records


@torch.no_grad()
def logit_mse(student: DinoY, teacher: DinoY, samples, phrases: Sequence[str]) -> float:
    """Student-teacher MSE over matched final-layer logits with a fixed text prompt."""
    from .model import text_targets

    prompts = [TextPrompt.from_phrases(phrases)] * len(samples)
    images = images_tensor(samples)
    s_out, t_out = student(images, text=prompts), teacher(images, text=prompts)
    s, t = matched_logit_pairs(s_out, t_out, [text_targets(x, phrases) for x in samples])
    return float(response_distill_loss(s, t))


# ---------------------------------------------------------------------------
# half precision


HALF_MAX = float(np.finfo(np.float16).max)


def _half(x: np.ndarray) -> np.ndarray:
    """Round to the nearest half-precision value (ties to even), kept as float32."""
    with np.errstate(over="ignore"):
        return np.asarray(x, np.float32).astype(np.float16).astype(np.float32)


def half_matmul(A: np.ndarray, B: np.ndarray, group: int = 8) -> np.ndarray:
    """Emulated half-precision matmul: half operands, products summed in groups of
    ``group`` and the running accumulator rounded to half after each group."""
    A, B = _half(A), _half(B)
    m, k = A.shape
    acc = np.zeros((m, B.shape[1]), np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, k, group):
            part = A[:, s : s + group] @ B[s : s + group]
            acc = _half(acc + _half(part))
    return acc


def normalized_fp16_matmul(A: np.ndarray, B: np.ndarray, group: int = 8) -> np.ndarray:
    """Row/column max-abs normalization around an emulated half-precision matmul."""
    A = np.asarray(A, np.float64)
    B = np.asarray(B, np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} @ {B.shape}")
    if np.isnan(A).any() or np.isnan(B).any():
        raise ValueError("NaN input")
    sa = np.abs(A).max(1)
    sb = np.abs(B).max(0)
    sa = np.where(sa > 0, sa, 1.0)
    sb = np.where(sb > 0, sb, 1.0)
    c = half_matmul(A / sa[:, None], B / sb[None], group).astype(np.float64)
    return c * sa[:, None] * sb[None]


class NormalizedFP16Linear(nn.Module):
    """Inference-only replacement for ``nn.Linear`` running the normalized half kernel."""

    def __init__(self, linear: nn.Linear):
        super().__init__()
        self.weight_t = linear.weight.detach().double().numpy().T.copy()
        self.bias = None if linear.bias is None else linear.bias.detach().double().numpy().copy()
        self.out_features = linear.out_features

    def forward(self, x: Tensor) -> Tensor:
        flat = x.detach().double().reshape(-1, x.shape[-1]).numpy()
        y = normalized_fp16_matmul(flat, self.weight_t)
        if self.bias is not None:
            y = y + self.bias
        return torch.from_numpy(y).to(x.dtype).reshape(*x.shape[:-1], self.out_features)


def convert_linears(module: nn.Module) -> nn.Module:
    """Swap every ``nn.Linear`` inside ``module`` (in place) for the half-precision version."""
    for name, child in module.named_children():
        if isinstance(child, nn.Linear):
            setattr(module, name, NormalizedFP16Linear(child))
        else:
            convert_linears(child)
    return module


# ---------------------------------------------------------------------------
# prompt embedding cache


def prompt_key(phrases: Sequence[str]) -> str:
    return hashlib.sha256("\x1f".join(phrases).encode("utf-8")).hexdigest()


def text_encoder_digest(model: DinoY) -> str:
    return params_digest(named_arrays(model.text_encoder))


def default_cache_dir(fallback: str | Path | None = None) -> Path:
    env = os.environ.get("DINOY_CACHE_DIR")
    if env:
        return Path(env)
    if fallback is not None:
        return Path(fallback)
    return Path.home() / ".cache" / "dinoy"


class EmbeddingCache:
    """Text prompt embeddings keyed by phrase-list hash, valid for one text-encoder digest."""

    FILE = "prompt_cache.bin"

    def __init__(self, model_digest: str, created: float | None = None):
        self.model_digest = model_digest
        self.created = time.time() if created is None else created
        self.entries: dict[str, PromptEmbedding] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, phrases: Sequence[str]) -> bool:
        return prompt_key(phrases) in self.entries

    def add(self, phrases: Sequence[str], emb: PromptEmbedding) -> None:
        self.entries[prompt_key(phrases)] = emb

    def lookup(self, phrases: Sequence[str], model: DinoY | None = None) -> PromptEmbedding | None:
        """Cached embedding, or ``None`` on a miss. Passing ``model`` checks the digest."""
        if model is not None and text_encoder_digest(model) != self.model_digest:
            warnings.warn("prompt cache was built for different text-encoder weights; ignoring it", stacklevel=2)
            self.misses += 1
            return None
        emb = self.entries.get(prompt_key(phrases))
        if emb is None:
            self.misses += 1
        else:
            self.hits += 1
        return emb

    def get_or_encode(self, phrases: Sequence[str], model: DinoY) -> PromptEmbedding:
        emb = self.lookup(phrases)
        if emb is None:
            emb = encode_one(model, phrases)
            self.add(phrases, emb)
        return emb

    def save(self, directory: str | Path) -> Path:
        arrays = {}
        index = {}
        for key, emb in sorted(self.entries.items()):
            arrays[f"{key}/tokens"] = emb.tokens[0].numpy()
            arrays[f"{key}/phrase_ids"] = emb.phrase_ids[0].numpy()
            index[key] = emb.phrases[0]
        path = Path(directory) / self.FILE
        container.save(path, arrays, {"kind": "dinoy-prompt-cache", "model_digest": self.model_digest, "created": self.created, "prompts": index})
        return path

    @classmethod
    def load(cls, directory: str | Path, model: DinoY | None = None) -> "EmbeddingCache | None":
        """Load a persisted cache; returns ``None`` (with a warning) when it is stale for ``model``."""
        path = Path(directory) / cls.FILE
        if not path.exists():
            return None
        arrays, meta = container.load(path)
        if model is not None and meta["model_digest"] != text_encoder_digest(model):
            warnings.warn(f"stale prompt cache at {path}; it will be rebuilt", stacklevel=2)
            return None
        cache = cls(meta["model_digest"], meta["created"])
        for key, phrases in meta["prompts"].items():
            tokens = torch.from_numpy(arrays[f"{key}/tokens"])[None]
            pid = torch.from_numpy(arrays[f"{key}/phrase_ids"])[None]
            cache.entries[key] = PromptEmbedding(tokens, torch.ones_like(pid, dtype=torch.bool), TEXT, pid, [list(phrases)])
        return cache


@torch.no_grad()
def encode_one(model: DinoY, phrases: Sequence[str]) -> PromptEmbedding:
    return model.encode_text(TextPrompt.from_phrases(list(phrases)))


@torch.no_grad()
def build_embedding_cache(prompts: Sequence[Sequence[str]], model: DinoY) -> EmbeddingCache:
    if model.training:
        raise ValueError("build the prompt cache from a model in eval mode")
    cache = EmbeddingCache(text_encoder_digest(model))
    for phrases in prompts:
        cache.add(phrases, encode_one(model, phrases))
    return cache
