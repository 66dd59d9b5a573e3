"""Evaluation over generated splits: text / visual / prompt-free detection,
masks, keypoints and region captions, assembled into a stable JSON report."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import DataConfig, GroundingSample, Split, counting_split, make_splits
from .heads import hungarian_match
from .keypoints import SPECS, pck, spec_for_phrase
from .language import decode_text
from .metrics import GT, Det, average_precision, binarize_mask_logits, counting_mae, oks_matrix, rare_categories, recall_at, rle_encode
from .model import DinoY, Detection, images_tensor, text_targets
from .prompts import UNIVERSAL, TextPrompt
from .training import visual_prompts_for

REPORT_SCHEMA_VERSION = 1
TASKS = ("text", "mask", "visual", "universal", "keypoint", "caption")
SCORE_THRESHOLD = 0.5
EXEMPLARS = 3
# counting threshold is calibrated on a separate single-category split over this grid
COUNT_THRESHOLDS = np.round(np.arange(0.05, 0.96, 0.05), 2)
CALIBRATION_SCENES = 200
CALIBRATION_SEED_OFFSET = 40_000_000
BATCH = 10


class MissingHeadError(ValueError):
    pass


# ---------------------------------------------------------------------------
# detection helpers shared with inference


@torch.no_grad()
def pair_detections(model: DinoY, out: dict, b: int, phrases: Sequence[str], top_k: int = 100, with_masks: bool = False) -> list[Detection]:
    """Top-k (query, phrase) pairs of image ``b`` ranked by probability."""
    last = out["layers"][-1]
    P = len(phrases)
    probs = last["logits"][b, :, :P].sigmoid()
    flat = probs.reshape(-1)
    k = min(top_k, flat.numel())
    order = torch.argsort(flat, descending=True, stable=True)[:k]
    queries = (order // P).tolist()
    masks = model.mask_logits(out, b, torch.tensor(queries)) if with_masks and queries else None
    dets = []
    for j, idx in enumerate(order.tolist()):
        q, p = divmod(idx, P)
        dets.append(
            Detection(
                box=[float(v) for v in last["boxes"][b, q]],
                token_logits=[float(v) for v in last["logits"][b, q, :P]],
                score=float(flat[idx]),
                phrase_index=p,
                phrase=phrases[p],
                query_index=q,
                mask_logits=None if masks is None else masks[j].numpy(),
            )
        )
    return dets


def _chunks(split: Split | Sequence[GroundingSample], n: int | None):
    n = len(split) if n is None else min(n, len(split))
    for i in range(0, n, BATCH):
        yield [split[j] for j in range(i, min(i + BATCH, n))]


def _gts(sample: GroundingSample, keep: Sequence[str] | None = None) -> list[GT]:
    return [
        GT(o.category.name, o.box.tolist(), o.mask, o.keypoints, o.visibility)
        for o in sample.objects
        if keep is None or o.category.name in keep
    ]


# ---------------------------------------------------------------------------
# task evaluators


@torch.no_grad()
def eval_text(model: DinoY, data: DataConfig, split: Split, n: int | None, masks: bool, overlays: Path | None = None) -> dict:
    names = [c.name for c in data.categories]
    dets, gts, mdets = [], [], []
    prompt = TextPrompt.from_phrases(names)
    for samples in _chunks(split, n):
        out = model(images_tensor(samples), text=[prompt] * len(samples))
        for b, s in enumerate(samples):
            ds = pair_detections(model, out, b, names, with_masks=masks)
            dets.append([Det(d.phrase, d.score, d.box) for d in ds])
            gts.append(_gts(s))
            if masks:
                mdets.append([Det(d.phrase, d.score, d.box, binarize_mask_logits(d.mask_logits, s.image.shape[:2])) for d in ds])
            if overlays is not None:
                save_overlay(overlays / split.name / f"{s.seed}.png", s, [d for d in ds if d.score >= SCORE_THRESHOLD])
    held_in = [c.name for c in data.held_in]
    held_out = [c.name for c in data.held_out]
    rare = rare_categories({c.name: c.frequency_rank for c in data.held_in})
    rep = average_precision(dets, gts, "box")
    result = {"box": _split_blocks(rep, held_in, held_out, rare)}
    if masks:
        mrep = average_precision(mdets, gts, "mask")
        result["mask"] = _split_blocks(mrep, held_in, held_out, rare)
    return result


def _split_blocks(rep, held_in, held_out, rare) -> dict:
    full = rep.to_dict(rare)
    def block(cats):
        present = [c for c in cats if c in rep.per_category]
        return {"AP": _r(rep.mean(categories=present)), "AP50": _r(rep.mean(0.5, present)), "AP75": _r(rep.mean(0.75, present)), "categories": present}
    return {"all": full, "held_in": block(held_in), "held_out": block(held_out)}


def _r(x):
    return None if x is None or not np.isfinite(x) else round(float(x), 10)


@torch.no_grad()
def _exemplar_scores(model: DinoY, samples: Sequence[GroundingSample], rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """Final-layer query scores under a 3-exemplar visual prompt for each scene's
    first category, and the true instance count of that category."""
    prompts, true = [], []
    for s in samples:
        cat = s.objects[0].category.name
        vp, idx = visual_prompts_for(s, cat, EXEMPLARS, rng)
        prompts.append(vp)
        true.append(len(idx))
    out = model(images_tensor(samples), visual=prompts)
    return out["layers"][-1]["logits"][:, :, 0].sigmoid().numpy(), true


def calibration_split(data: DataConfig, n: int = CALIBRATION_SCENES) -> Split:
    """Single-category held-in scenes from a seed range disjoint from every train / val split."""
    base = data.seed * 100_000_000 + CALIBRATION_SEED_OFFSET
    return Split("calibration", data, [base + i for i in range(n)], pool=data.held_in, single_category=True)


def calibrate_count_threshold(model: DinoY, data: DataConfig, n: int = CALIBRATION_SCENES) -> float:
    """Score threshold minimizing counting MAE on the calibration split (ties go to the lowest)."""
    rng = np.random.default_rng(data.seed + 1)
    scores, true = [], []
    for samples in _chunks(calibration_split(data, n), n):
        p, t = _exemplar_scores(model, samples, rng)
        scores.append(p)
        true.extend(t)
    scores = np.concatenate(scores)
    maes = [counting_mae((scores >= t).sum(1), true) for t in COUNT_THRESHOLDS]
    return float(COUNT_THRESHOLDS[int(np.argmin(maes))])


@torch.no_grad()
def eval_visual_counting(model: DinoY, data: DataConfig, n: int | None) -> dict:
    threshold = calibrate_count_threshold(model, data)
    split = counting_split(data)
    pred, true = [], []
    rng = np.random.default_rng(data.seed)
    for samples in _chunks(split, n):
        p, t = _exemplar_scores(model, samples, rng)
        pred.extend(int(c) for c in (p >= threshold).sum(1))
        true.extend(t)
    return {
        "counting_mae": _r(counting_mae(pred, true)),
        "n_images": len(true),
        "exemplars": EXEMPLARS,
        "score_threshold": _r(threshold),
        "calibration_scenes": CALIBRATION_SCENES,
    }


@torch.no_grad()
def eval_universal(model: DinoY, split: Split, n: int | None) -> dict:
    dets, gts = [], []
    for samples in _chunks(split, n):
        out = model(images_tensor(samples), customized=UNIVERSAL)
        last = out["layers"][-1]
        for b, s in enumerate(samples):
            probs = last["logits"][b, :, 0].sigmoid()
            keep = torch.argsort(probs, descending=True, stable=True)[:100]
            keep = keep[probs[keep] >= SCORE_THRESHOLD]
            dets.append([Det("object", float(probs[q]), last["boxes"][b, q].tolist()) for q in keep.tolist()])
            gts.append([GT("object", o.box.tolist()) for o in s.objects])
    return {"recall@0.5": _r(recall_at(dets, gts, 0.5)), "score_threshold": SCORE_THRESHOLD, "n_objects": sum(len(g) for g in gts)}


@torch.no_grad()
def attach_keypoints(model: DinoY, out: dict, b: int, dets: Sequence[Detection]) -> None:
    """Fill ``keypoints`` on detections whose phrase routes to a registered keypoint spec."""
    last = out["layers"][-1]
    memory = out["memory"]
    groups: dict[str, list[Detection]] = {}
    for d in dets:
        spec = spec_for_phrase(d.phrase)
        if spec is not None and spec.name in model.keypoint_head.embeddings:
            groups.setdefault(spec.name, []).append(d)
    for name, items in sorted(groups.items()):
        q = torch.tensor([d.query_index for d in items])
        res = model.keypoint_head(
            last["content"][b, q], last["boxes"][b, q], name, memory.tokens[b : b + 1].expand(len(items), -1, -1), memory.shapes
        )
        pts = res["points"][-1]
        vis = res["visibility_logits"].sigmoid()
        for j, d in enumerate(items):
            d.keypoints = (pts[j].numpy().astype(np.float64), vis[j].numpy().astype(np.float64), name)


@torch.no_grad()
def eval_keypoints(model: DinoY, data: DataConfig, split: Split, n: int | None) -> dict:
    names = [c.name for c in data.held_in]
    prompt = TextPrompt.from_phrases(names)
    dets, gts = [], []
    pcks, l2s = [], []
    for samples in _chunks(split, n):
        out = model(images_tensor(samples), text=[prompt] * len(samples))
        for b, s in enumerate(samples):
            ds = [d for d in pair_detections(model, out, b, names)]
            attach_keypoints(model, out, b, ds)
            dets.append([Det(d.phrase, d.score, d.box, keypoints=d.keypoints[0]) for d in ds if d.keypoints is not None])
            g = _gts(s, names)
            gts.append(g)
            # localization quality on the detections matched to each object (box IoU)
            matched = _matched_keypoints(model, out, b, s, names)
            for obj, pts in matched:
                vis = obj.visibility.astype(bool)
                if vis.any():
                    pcks.append(pck(pts, obj.keypoints, vis, obj.box))
                    l2s.extend(np.sqrt(((pts - obj.keypoints) ** 2).sum(-1))[vis].tolist())

    def sim(d, g):
        spec = SPECS[d[0].category.split()[-1]]
        return oks_matrix([x.keypoints for x in d], g, spec.oks_constants)

    rep = average_precision(dets, gts, similarity=sim)
    full = rep.to_dict()
    return {
        "AP": full["AP"],
        "AP50": full["AP50"],
        "AP75": full["AP75"],
        "per_category": full["per_category"],
        "pck@0.05": _r(float(np.mean(pcks))) if pcks else None,
        "mean_l2": _r(float(np.mean(l2s))) if l2s else None,
    }


def _matched_keypoints(model, out, b, sample, names):
    last = out["layers"][-1]
    t = text_targets(sample, names)
    if not len(t.boxes):
        return []
    m = hungarian_match(last["logits"][b], last["boxes"][b], t.phrase, t.boxes)
    res = []
    for q, g in m.pairs:
        obj = sample.objects[t.object_indices[g]]
        spec = SPECS[obj.category.shape_kind]
        r = model.keypoint_head(last["content"][b, q : q + 1], last["boxes"][b, q : q + 1], spec, out["memory"].tokens[b : b + 1], out["memory"].shapes)
        res.append((obj, r["points"][-1][0].numpy().astype(np.float64)))
    return res


@torch.no_grad()
def eval_caption(model: DinoY, data: DataConfig, split: Split, n: int | None) -> dict:
    from .training import matched_detections

    exact = differ = total = 0
    for samples in _chunks(split, n):
        out, pairs = matched_detections(model, samples)
        last = out["layers"][-1]
        fmap = out["memory"].level_map(0)
        for b, plist in enumerate(pairs):
            for q, oi in plist:
                obj = samples[b].objects[oi]
                tokens = model.language_head.region_tokens(fmap[b], last["boxes"][b, q : q + 1], last["content"][b, q : q + 1])
                rec = decode_text(model.language_head.generate(tokens, "recognize")[0])
                cap = decode_text(model.language_head.generate(tokens, "caption")[0])
                exact += rec == f"{obj.category.color} {obj.category.shape_kind}"
                differ += rec != cap
                total += 1
    return {"recognize_exact_match": _r(exact / max(total, 1)), "task_disagreement": _r(differ / max(total, 1)), "n_regions": total}


# ---------------------------------------------------------------------------
# orchestration


def evaluate_split(
    ck: Checkpoint,
    split_name: str,
    tasks: Sequence[str] = ("text",),
    n_images: int | None = None,
    data: DataConfig | None = None,
    overlays: str | Path | None = None,
    strict: bool = True,
    model: DinoY | None = None,
) -> dict[str, Any]:
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ValueError(f"unknown task(s) {unknown}; choose from {TASKS}")
    stages = ck.stages
    if strict and "keypoint" in tasks and "keypoint" not in stages:
        raise MissingHeadError("keypoint evaluation needs a checkpoint with a trained keypoint head")
    if strict and "caption" in tasks and "language" not in stages:
        raise MissingHeadError("caption evaluation needs a checkpoint with a trained language head")
    data = data or DataConfig.from_dict(ck.data_config)
    splits = make_splits(data)
    if split_name not in splits:
        raise ValueError(f"unknown split {split_name!r}; choose from {sorted(splits)}")
    split = splits[split_name]
    model = model or ck.build_model()
    model.eval()
    report: dict[str, Any] = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "split": split_name,
        "n_images": min(n_images or len(split), len(split)),
        "checkpoint_digest": ck.frozen_digest,
        "stages": stages,
        "tasks": {},
    }
    overlay_dir = Path(overlays) if overlays else None
    if "text" in tasks or "mask" in tasks:
        res = eval_text(model, data, split, n_images, "mask" in tasks, overlay_dir)
        if "text" in tasks:
            report["tasks"]["text"] = res["box"]
        if "mask" in tasks:
            report["tasks"]["mask"] = res["mask"]
    if "visual" in tasks:
        report["tasks"]["visual"] = eval_visual_counting(model, data, n_images)
    if "universal" in tasks:
        report["tasks"]["universal"] = eval_universal(model, split, n_images)
    if "keypoint" in tasks:
        report["tasks"]["keypoint"] = eval_keypoints(model, data, split, n_images)
    if "caption" in tasks:
        report["tasks"]["caption"] = eval_caption(model, data, split, n_images)
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# serialization and overlays


def detection_json(d: Detection, image_size: tuple[int, int] | None = None) -> dict:
    out: dict[str, Any] = {"box": [round(v, 6) for v in d.box], "score": round(d.score, 6), "phrase": d.phrase}
    if d.mask_logits is not None and image_size is not None:
        out["mask_rle"] = rle_encode(binarize_mask_logits(d.mask_logits, image_size))
    if d.keypoints is not None:
        pts, vis, _ = d.keypoints
        out["keypoints"] = [round(float(v), 6) for p, s in zip(pts, vis) for v in (p[0], p[1], s)]
    if d.caption is not None:
        out["caption"] = d.caption
    if d.label is not None:
        out["label"] = d.label
    return out


def save_overlay(path: str | Path, sample_or_image, detections: Sequence[Detection]) -> None:
    from PIL import Image, ImageDraw

    image = sample_or_image.image if hasattr(sample_or_image, "image") else sample_or_image
    H, W = image.shape[:2]
    img = Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).resize((W * 2, H * 2), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for d in detections:
        cx, cy, w, h = d.box
        x0, y0, x1, y1 = (cx - w / 2) * 2 * W, (cy - h / 2) * 2 * H, (cx + w / 2) * 2 * W, (cy + h / 2) * 2 * H
        draw.rectangle([x0, y0, x1, y1], outline=(255, 255, 255))
        draw.text((x0 + 2, max(y0 - 10, 0)), f"{d.phrase} {d.score:.2f}", fill=(255, 255, 255))
        if d.keypoints is not None:
            for (x, y), v in zip(d.keypoints[0], d.keypoints[1]):
                if v >= 0.5:
                    draw.ellipse([x * 2 * W - 2, y * 2 * H - 2, x * 2 * W + 2, y * 2 * H + 2], fill=(255, 0, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
