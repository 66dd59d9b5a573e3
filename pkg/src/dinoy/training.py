"""Training stages: joint grounding pretraining, frozen-trunk head training and
universal prompt tuning."""

from __future__ import annotations

import dataclasses
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import Checkpoint, check_frozen, named_arrays
from .data import DataConfig, GroundingSample, make_splits
from .heads import MatchWeights, hungarian_match
from .keypoints import SPECS, KeypointLossWeights, keypoint_loss
from .language import TRAINED_TASKS, task_target
from .model import DinoY, GroundingCriterion, LossWeights, ModelConfig, Target, images_tensor, single_phrase_targets, text_targets
from .prompts import UNIVERSAL, TextPrompt, VisualPrompt

STAGES = ("1", "keypoint", "language", "prompt-tune")
# decoder box heads, classification bias and the mask branch train at the head learning rate in stage 1
STAGE1_HEAD_PREFIXES = ("decoder.box_heads.", "class_bias", "pixel_decoder.", "mask_head.")
TRAINABLE = {
    "keypoint": ("keypoint_head.",),
    "language": ("language_head.",),
    "prompt-tune": (f"customized_prompts.prompts.{UNIVERSAL}",),
}


class ContaminationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "1"
    steps: int = 1500
    batch_size: int = 8
    lr: float = 5e-4
    lr_heads: float = 1e-3
    weight_decay: float = 1e-4
    warmup: int = 50
    min_lr_ratio: float = 0.05
    grad_clip: float = 0.1
    visual_fraction: float = 0.3
    max_negatives: int = 8
    mask_points: int = 1024
    seed: int = 0
    loss: dict = field(default_factory=lambda: dataclasses.asdict(LossWeights()))
    keypoint_loss: dict = field(default_factory=lambda: dataclasses.asdict(KeypointLossWeights()))

    def __post_init__(self) -> None:
        self.stage = str(self.stage)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0 <= self.visual_fraction <= 1:
            raise ValueError("visual_fraction must lie in [0, 1]")
        if self.lr <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**d)


def lr_factor(step: int, total: int, warmup: int, min_ratio: float) -> float:
    """Linear warmup then cosine decay to ``min_ratio``."""
    if step < warmup:
        return (step + 1) / warmup
    t = (step - warmup) / max(total - warmup, 1)
    return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))


class MetricsLog:
    """Append-only JSON-lines writer; safe to share between threads."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _batches(n_items: int, steps: int, batch_size: int, rng: np.random.Generator):
    """Indices for each step, reshuffling on every pass through the data."""
    order = rng.permutation(n_items)
    pos = 0
    for _ in range(steps):
        idx = []
        while len(idx) < batch_size:
            if pos == n_items:
                order, pos = rng.permutation(n_items), 0
            take = min(batch_size - len(idx), n_items - pos)
            idx.extend(order[pos : pos + take].tolist())
            pos += take
        yield idx


def check_contamination(samples: Sequence[GroundingSample], held_out: set[str], phrases: Sequence[Sequence[str]] = ()) -> None:
    for s in samples:
        bad = [o.category.name for o in s.objects if o.category.name in held_out]
        if bad:
            raise ContaminationError(f"training scene {s.seed} contains held-out categories {sorted(set(bad))}")
    for plist in phrases:
        bad = [p for p in plist if p in held_out]
        if bad:
            raise ContaminationError(f"training prompt names held-out categories {bad}")


# ---------------------------------------------------------------------------
# batch construction


def text_batch(samples: Sequence[GroundingSample], vocabulary: Sequence[str], max_negatives: int, rng: np.random.Generator):
    """Per-image phrase lists: every present category plus up to ``max_negatives`` absent ones, shuffled."""
    prompts, targets, phrase_lists = [], [], []
    for s in samples:
        present = sorted({o.category.name for o in s.objects})
        absent = [v for v in vocabulary if v not in present]
        k = min(max_negatives, len(absent))
        neg = [absent[i] for i in rng.choice(len(absent), size=k, replace=False)] if k else []
        phrases = present + neg
        phrases = [phrases[i] for i in rng.permutation(len(phrases))]
        prompts.append(TextPrompt.from_phrases(phrases))
        targets.append(text_targets(s, phrases))
        phrase_lists.append(phrases)
    return prompts, targets, phrase_lists


def visual_prompts_for(sample: GroundingSample, category: str, n: int, rng: np.random.Generator, point_prob: float = 0.0) -> tuple[list[VisualPrompt], list[int]]:
    idx = [i for i, o in enumerate(sample.objects) if o.category.name == category]
    pick = sorted(rng.choice(len(idx), size=min(n, len(idx)), replace=False).tolist())
    prompts = []
    for j in pick:
        box = np.clip(sample.objects[idx[j]].box, 1e-4, 1.0)
        if rng.random() < point_prob:
            prompts.append(VisualPrompt("point", tuple(box[:2])))
        else:
            prompts.append(VisualPrompt("box", tuple(box)))
    return prompts, idx


def visual_batch(samples: Sequence[GroundingSample], rng: np.random.Generator, max_exemplars: int = 3, point_prob: float = 0.3):
    """One category per image, prompted by 1-3 of its instances; every instance is a target."""
    prompts, targets = [], []
    for s in samples:
        names = sorted({o.category.name for o in s.objects})
        cat = names[int(rng.integers(len(names)))]
        vp, keep = visual_prompts_for(s, cat, int(rng.integers(1, max_exemplars + 1)), rng, point_prob)
        prompts.append(vp)
        targets.append(single_phrase_targets(s, keep))
    return prompts, targets


def universal_targets(samples: Sequence[GroundingSample]) -> list[Target]:
    return [single_phrase_targets(s, list(range(len(s.objects)))) for s in samples]


# ---------------------------------------------------------------------------
# stage 1


def stage1_param_groups(model: DinoY, cfg: TrainConfig) -> list[dict]:
    heads, trunk = [], []
    for name, p in model.named_parameters():
        if name.startswith(("keypoint_head.", "language_head.", "customized_prompts.")):
            p.requires_grad_(False)
            continue
        (heads if name.startswith(STAGE1_HEAD_PREFIXES) else trunk).append(p)
    return [{"params": trunk, "lr": cfg.lr, "base_lr": cfg.lr}, {"params": heads, "lr": cfg.lr_heads, "base_lr": cfg.lr_heads}]


def _set_lr(opt: torch.optim.Optimizer, factor: float) -> float:
    for g in opt.param_groups:
        g["lr"] = g["base_lr"] * factor
    return opt.param_groups[0]["lr"]


def stage1_train(
    cfg: TrainConfig,
    data: DataConfig,
    model_config: ModelConfig = ModelConfig(),
    log_path: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    cfg.validate()
    if cfg.stage != "1":
        raise ValueError("stage1_train needs stage '1'")
    seed_everything(cfg.seed)
    train = make_splits(data)["train"]
    held_out = {c.name for c in data.held_out}
    vocabulary = [c.name for c in data.held_in]
    model = DinoY(model_config)
    model.train()
    opt = torch.optim.AdamW(stage1_param_groups(model, cfg), weight_decay=cfg.weight_decay)
    crit = GroundingCriterion(LossWeights(**cfg.loss), MatchWeights(), n_points=cfg.mask_points)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = MetricsLog(log_path)
    t0 = time.perf_counter()
    for step, idx in enumerate(_batches(len(train), cfg.steps, cfg.batch_size, rng)):
        samples = [train[i] for i in idx]
        lr = _set_lr(opt, lr_factor(step, cfg.steps, cfg.warmup, cfg.min_lr_ratio))
        if rng.random() < cfg.visual_fraction:
            task = "visual"
            vp, targets = visual_batch(samples, rng)
            check_contamination(samples, held_out)
            out = model(images_tensor(samples), visual=vp)
        else:
            task = "text"
            prompts, targets, phrase_lists = text_batch(samples, vocabulary, cfg.max_negatives, rng)
            check_contamination(samples, held_out, phrase_lists)
            out = model(images_tensor(samples), text=prompts)
        loss, parts = crit(model, out, targets, gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}: {parts}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], cfg.grad_clip)
        opt.step()
        rec = {"step": step, "task": task, "loss": float(loss.detach()), "lr": lr, "grad_norm": float(gnorm), "time": round(time.perf_counter() - t0, 3)}
        rec.update({k: float(v.detach()) for k, v in parts.items()})
        log.write(rec)
        if progress:
            progress(rec)
    model.eval()
    record = {"stage": "1", "steps": cfg.steps, "seed": cfg.seed, "train_config": cfg.to_dict(), "data_digest": data.digest()}
    ck = Checkpoint.from_model(model, [record], data.to_dict())
    return ck, log.records


# ---------------------------------------------------------------------------
# stage 2 and prompt tuning


def _prepare_frozen(base: Checkpoint, stage: str) -> tuple[DinoY, list[nn.Parameter], dict[str, np.ndarray]]:
    base.require_stage1()
    model = base.build_model()
    prefixes = TRAINABLE[stage]
    trainable = []
    for name, p in model.named_parameters():
        keep = name.startswith(prefixes)
        p.requires_grad_(keep)
        if keep:
            trainable.append(p)
    if not trainable:
        raise ValueError(f"no parameters match {prefixes}")
    return model, trainable, named_arrays(model)


@torch.no_grad()
def matched_detections(model: DinoY, samples: Sequence[GroundingSample]) -> tuple[dict[str, Any], list[list[tuple[int, int]]]]:
    """Run the frozen detector with the scene's category names and match final queries to objects."""
    phrase_lists = [sorted({o.category.name for o in s.objects}) for s in samples]
    out = model(images_tensor(samples), text=[TextPrompt.from_phrases(p) for p in phrase_lists])
    last = out["layers"][-1]
    pairs = []
    for b, (s, phrases) in enumerate(zip(samples, phrase_lists)):
        t = text_targets(s, phrases)
        m = hungarian_match(last["logits"][b], last["boxes"][b], t.phrase, t.boxes)
        pairs.append([(q, t.object_indices[g]) for q, g in m.pairs])
    return out, pairs


def keypoint_step_loss(model: DinoY, samples: Sequence[GroundingSample], weights: KeypointLossWeights) -> Tensor:
    out, pairs = matched_detections(model, samples)
    content = out["layers"][-1]["content"]
    boxes = out["layers"][-1]["boxes"]
    memory = out["memory"]
    groups: dict[str, list[tuple[int, int, int]]] = {}
    for b, plist in enumerate(pairs):
        for q, oi in plist:
            groups.setdefault(samples[b].objects[oi].category.shape_kind, []).append((b, q, oi))
    total = content.new_zeros(())
    n = sum(len(g) for g in groups.values())
    for kind, items in sorted(groups.items()):
        spec = SPECS[kind]
        bi = torch.tensor([b for b, _, _ in items])
        qi = torch.tensor([q for _, q, _ in items])
        objs = [samples[b].objects[oi] for b, _, oi in items]
        res = model.keypoint_head(content[bi, qi], boxes[bi, qi], spec, memory.tokens[bi], memory.shapes)
        gt = torch.tensor(np.stack([o.keypoints for o in objs]), dtype=torch.float32)
        vis = torch.tensor(np.stack([o.visibility for o in objs]))
        area = torch.tensor([float(o.box[2] * o.box[3]) for o in objs])
        total = total + keypoint_loss(res["points"], res["visibility_logits"], gt, vis, area, spec, weights) * len(items)
    return total / max(n, 1)


def language_step_loss(model: DinoY, samples: Sequence[GroundingSample], tasks: Sequence[str] = TRAINED_TASKS) -> Tensor:
    out, pairs = matched_detections(model, samples)
    content = out["layers"][-1]["content"]
    boxes = out["layers"][-1]["boxes"]
    fmap = out["memory"].level_map(0)
    obj_tokens, objs = [], []
    for b, plist in enumerate(pairs):
        for q, oi in plist:
            obj_tokens.append(model.language_head.region_tokens(fmap[b], boxes[b, q : q + 1], content[b, q : q + 1]))
            objs.append(samples[b].objects[oi])
    obj = torch.cat(obj_tokens)
    total = obj.new_zeros(())
    for task in tasks:
        total = total + model.language_head.caption_loss(obj, task, [task_target(o, task) for o in objs])
    return total / len(tasks)


def _head_training(base: Checkpoint, cfg: TrainConfig, data: DataConfig, step_loss, log_path, progress) -> tuple[Checkpoint, list[dict]]:
    cfg.validate()
    seed_everything(cfg.seed)
    model, params, before = _prepare_frozen(base, cfg.stage)
    train = make_splits(data)["train"]
    held_out = {c.name for c in data.held_out}
    opt = torch.optim.AdamW([{"params": params, "lr": cfg.lr_heads, "base_lr": cfg.lr_heads}], weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    log = MetricsLog(log_path)
    t0 = time.perf_counter()
    model.eval()
    for step, idx in enumerate(_batches(len(train), cfg.steps, cfg.batch_size, rng)):
        samples = [train[i] for i in idx]
        check_contamination(samples, held_out)
        lr = _set_lr(opt, lr_factor(step, cfg.steps, cfg.warmup, cfg.min_lr_ratio))
        loss = step_loss(model, samples)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        rec = {"step": step, "loss": float(loss.detach()), "lr": lr, "grad_norm": float(gnorm), "time": round(time.perf_counter() - t0, 3)}
        log.write(rec)
        if progress:
            progress(rec)
    after = named_arrays(model)
    digest = check_frozen(before, after, TRAINABLE[cfg.stage])
    record = {"stage": cfg.stage, "steps": cfg.steps, "seed": cfg.seed, "train_config": cfg.to_dict(), "frozen_set_digest": digest}
    return base.with_stage(after, record), log.records


def stage2_train(base: Checkpoint, cfg: TrainConfig, data: DataConfig | None = None, log_path=None, progress=None) -> tuple[Checkpoint, list[dict]]:
    if cfg.stage not in ("keypoint", "language"):
        raise ValueError(f"stage2_train needs stage 'keypoint' or 'language', got {cfg.stage!r}")
    data = data or DataConfig.from_dict(base.data_config)
    if cfg.stage == "keypoint":
        w = KeypointLossWeights(**cfg.keypoint_loss)
        fn = lambda m, s: keypoint_step_loss(m, s, w)  # noqa: E731
    else:
        fn = language_step_loss
    return _head_training(base, cfg, data, fn, log_path, progress)


def prompt_tune_universal(base: Checkpoint, cfg: TrainConfig, data: DataConfig | None = None, log_path=None, progress=None) -> tuple[Checkpoint, list[dict]]:
    if cfg.stage != "prompt-tune":
        raise ValueError(f"prompt_tune_universal needs stage 'prompt-tune', got {cfg.stage!r}")
    data = data or DataConfig.from_dict(base.data_config)
    crit = GroundingCriterion(LossWeights(**cfg.loss), MatchWeights(), masks=False)

    def fn(model: DinoY, samples):
        out = model(images_tensor(samples), customized=UNIVERSAL)
        return crit(model, out, universal_targets(samples))[0]

    return _head_training(base, cfg, data, fn, log_path, progress)
