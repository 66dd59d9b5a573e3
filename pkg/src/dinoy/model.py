"""The promptable detector: prompt pathways, fusion trunk and perception heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import VOCAB, GroundingSample
from .fusion import Backbone, Decoder, EarlyFusionEncoder, MultiScaleFeatures, QuerySelector
from .heads import (
    MaskHead,
    MatchWeights,
    PixelDecoder,
    contrastive_logits,
    hungarian_match,
    l1_box_loss,
    giou_loss,
    point_sampled_mask_loss,
    sigmoid_focal_loss,
)
from .prompts import (
    CustomizedPromptBank,
    PromptEmbedding,
    TextEncoder,
    TextPrompt,
    VisualPrompt,
    VisualPromptEncoder,
)

MASKED_LOGIT = -1e4


@dataclass
class ModelConfig:
    d: int = 128
    n_heads: int = 4
    n_points: int = 4
    enc_layers: int = 3
    dec_layers: int = 3
    d_ff: int = 256
    num_queries: int = 100
    backbone_channels: tuple[int, ...] = (32, 48, 96, 128, 160)
    vocab_size: int = len(VOCAB)
    text_layers: int = 2
    visual_layers: int = 1
    universal_tokens: int = 16
    detach_query_content: bool = True
    logit_bias_init: float = -2.0
    keypoint_layers: int = 2
    roi_size: int = 3
    lm_dim: int = 128
    lm_layers: int = 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class Detection:
    box: list[float]
    token_logits: list[float]
    score: float
    phrase_index: int
    phrase: str = ""
    query_index: int = -1
    mask_logits: np.ndarray | None = None
    keypoints: Any = None
    caption: str | None = None
    label: str | None = None


class DinoY(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        from .keypoints import KeypointHead
        from .language import LanguageHead

        self.config = config
        d = config.d
        self.backbone = Backbone(d, config.backbone_channels)
        self.text_encoder = TextEncoder(config.vocab_size, d, config.text_layers, config.n_heads)
        self.visual_encoder = VisualPromptEncoder(d, 3, config.visual_layers, config.n_heads, config.n_points)
        self.customized_prompts = CustomizedPromptBank(d, config.universal_tokens)
        self.encoder = EarlyFusionEncoder(d, config.enc_layers, config.n_heads, config.n_points, config.d_ff)
        self.query_selection = QuerySelector(d, config.detach_query_content)
        self.decoder = Decoder(d, config.dec_layers, config.n_heads, config.n_points, config.d_ff)
        self.class_bias = nn.Parameter(torch.tensor([config.logit_bias_init, config.logit_bias_init]))
        self.pixel_decoder = PixelDecoder(d, d)
        self.mask_head = MaskHead(d)
        self.keypoint_head = KeypointHead(d, config.n_heads, config.n_points, config.keypoint_layers, config.d_ff)
        self.language_head = LanguageHead(d, config.lm_dim, config.vocab_size, config.roi_size, config.lm_layers, config.n_heads)

    # -- prompts ---------------------------------------------------------

    def encode_text(self, prompts: Sequence[TextPrompt] | TextPrompt) -> PromptEmbedding:
        if isinstance(prompts, TextPrompt):
            prompts = [prompts]
        return self.text_encoder(prompts)

    def embed_prompt(
        self,
        feats: MultiScaleFeatures,
        text: Sequence[TextPrompt] | None = None,
        visual: Sequence[Sequence[VisualPrompt]] | None = None,
        customized: str | None = None,
        prompt: PromptEmbedding | None = None,
        visual_phrase_ids: Sequence[Sequence[int]] | None = None,
    ) -> PromptEmbedding:
        given = [x is not None for x in (text, visual, customized, prompt)]
        if sum(given) != 1:
            raise ValueError("give exactly one of text, visual, customized or a precomputed prompt")
        B = feats.raw_s4.shape[0]
        if prompt is not None:
            return prompt
        if text is not None:
            return self.encode_text(text)
        if customized is not None:
            return self.customized_prompts.get(customized, B)
        emb, ref = self.visual_encoder.embed(visual, visual_phrase_ids)
        values, shapes = feats.flatten()
        return self.visual_encoder.refine(emb, ref, values, shapes)

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        images: Tensor,
        text: Sequence[TextPrompt] | None = None,
        visual: Sequence[Sequence[VisualPrompt]] | None = None,
        customized: str | None = None,
        prompt: PromptEmbedding | None = None,
        visual_phrase_ids: Sequence[Sequence[int]] | None = None,
    ) -> dict[str, Any]:
        feats = self.backbone(images)
        emb = self.embed_prompt(feats, text, visual, customized, prompt, visual_phrase_ids)
        if emb.tokens.shape[0] != images.shape[0]:
            if emb.tokens.shape[0] == 1:
                emb = PromptEmbedding(
                    emb.tokens.expand(images.shape[0], -1, -1),
                    emb.valid_mask.expand(images.shape[0], -1),
                    emb.source,
                    emb.phrase_ids.expand(images.shape[0], -1),
                    emb.phrases * images.shape[0],
                )
            else:
                raise ValueError("prompt batch does not match image batch")
        memory = self.encoder(feats, emb)
        queries, enc_token_logits = self.query_selection(memory, self.config.num_queries)
        layers = self.decoder(queries, memory)
        phrases, phrase_mask = memory.prompt.phrase_tokens()
        outs = []
        for content, boxes in layers:
            logits = contrastive_logits(content, phrases, self.class_bias[0])
            outs.append({"content": content, "boxes": boxes, "logits": logits.masked_fill(~phrase_mask[:, None], MASKED_LOGIT)})
        token_valid = memory.prompt.valid_mask
        enc_logits = (enc_token_logits + self.class_bias[1]).masked_fill(~token_valid[:, None], MASKED_LOGIT)
        return {
            "layers": outs,
            "enc": {"boxes": queries.anchors, "token_logits": enc_logits, "indices": queries.indices, "scores": queries.selection_scores},
            "phrase_mask": phrase_mask,
            "prompt": memory.prompt,
            "prompt_input": emb,
            "memory": memory,
            "feats": feats,
        }

    def pixel_map(self, out: dict[str, Any]) -> Tensor:
        if "pixel_map" not in out:
            out["pixel_map"] = self.pixel_decoder(out["feats"].level(4), out["memory"].level_map(0))
        return out["pixel_map"]

    def mask_logits(self, out: dict[str, Any], batch_index: int, query_indices: Sequence[int] | Tensor) -> Tensor:
        pm = self.pixel_map(out)[batch_index : batch_index + 1]
        content = out["layers"][-1]["content"][batch_index : batch_index + 1, query_indices]
        return self.mask_head(content, pm)[0]

    # -- inference helpers -------------------------------------------------

    @torch.no_grad()
    def detect(
        self,
        out: dict[str, Any],
        batch_index: int = 0,
        top_k: int = 100,
        score_threshold: float = 0.0,
        with_masks: bool = False,
    ) -> list[Detection]:
        last = out["layers"][-1]
        logits = last["logits"][batch_index]
        boxes = last["boxes"][batch_index]
        probs = logits.sigmoid()
        score, phrase = probs.max(-1)
        order = torch.argsort(score, descending=True, stable=True)[:top_k]
        order = order[score[order] > score_threshold]
        names = out["prompt"].phrases[batch_index] if out["prompt"].phrases else []
        valid_p = int(out["phrase_mask"][batch_index].sum())
        masks = self.mask_logits(out, batch_index, order) if with_masks and len(order) else None
        dets = []
        for j, q in enumerate(order.tolist()):
            p = int(phrase[q])
            dets.append(
                Detection(
                    box=[float(v) for v in boxes[q]],
                    token_logits=[float(v) for v in logits[q, :valid_p]],
                    score=float(score[q]),
                    phrase_index=p,
                    phrase=names[p] if p < len(names) else "",
                    query_index=q,
                    mask_logits=None if masks is None else masks[j].numpy(),
                )
            )
        return dets


# ---------------------------------------------------------------------------
# batching


def images_tensor(samples: Sequence[GroundingSample]) -> Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()


@dataclass
class Target:
    boxes: Tensor  # (G, 4)
    phrase: Tensor  # (G,) long
    masks: Tensor  # (G, H, W) float
    object_indices: list[int] = field(default_factory=list)


def text_targets(sample: GroundingSample, phrases: Sequence[str]) -> Target:
    keep = [i for i, o in enumerate(sample.objects) if o.category.name in phrases]
    return _target(sample, keep, [phrases.index(sample.objects[i].category.name) for i in keep])


def single_phrase_targets(sample: GroundingSample, keep: Sequence[int]) -> Target:
    return _target(sample, keep, [0] * len(keep))


def _target(sample: GroundingSample, keep: Sequence[int], phrase: Sequence[int]) -> Target:
    H, W = sample.image.shape[:2]
    if keep:
        boxes = torch.tensor(np.stack([sample.objects[i].box for i in keep]), dtype=torch.float32)
        masks = torch.from_numpy(np.stack([sample.objects[i].mask for i in keep])).float()
    else:
        boxes = torch.zeros(0, 4)
        masks = torch.zeros(0, H, W)
    return Target(boxes, torch.tensor(list(phrase), dtype=torch.long), masks, list(keep))


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    mask_bce: float = 5.0
    mask_dice: float = 5.0
    enc: float = 1.0


class GroundingCriterion:
    """Hungarian-matched focal / L1 / GIoU losses at every decoder layer and on
    the selected encoder proposals, plus the point-sampled mask loss on the
    final layer."""

    def __init__(
        self,
        weights: LossWeights = LossWeights(),
        match: MatchWeights = MatchWeights(),
        n_points: int = 1024,
        masks: bool = True,
    ):
        self.w = weights
        self.match = match
        self.n_points = n_points
        self.masks = masks

    def __call__(self, model: DinoY, out: dict[str, Any], targets: Sequence[Target], generator: torch.Generator | None = None):
        num_boxes = max(sum(len(t.boxes) for t in targets), 1)
        parts: dict[str, Tensor] = {}
        total = 0.0
        phrase_mask = out["phrase_mask"]
        matches_last = None
        for li, layer in enumerate(out["layers"]):
            matches = [hungarian_match(layer["logits"][b], layer["boxes"][b], t.phrase, t.boxes, self.match) for b, t in enumerate(targets)]
            cls, l1, gl = self._box_losses(layer["logits"], layer["boxes"], targets, matches, phrase_mask, num_boxes)
            parts[f"cls_{li}"], parts[f"l1_{li}"], parts[f"giou_{li}"] = cls, l1, gl
            total = total + self.w.cls * cls + self.w.l1 * l1 + self.w.giou * gl
            matches_last = matches
        # encoder proposals: token-level focal on the selected tokens
        enc = out["enc"]
        prompt = out["prompt"]
        P = phrase_mask.shape[1]
        tok_of_phrase = (prompt.phrase_ids[:, :, None] == torch.arange(P)[None, None, :]).float()  # (B, T, P)
        enc_phrase_logits = _phrase_max(enc["token_logits"], tok_of_phrase)
        enc_phrase_logits = enc_phrase_logits.masked_fill(~phrase_mask[:, None], MASKED_LOGIT)
        matches = [hungarian_match(enc_phrase_logits[b], enc["boxes"][b], t.phrase, t.boxes, self.match) for b, t in enumerate(targets)]
        tgt = torch.zeros_like(enc["token_logits"])
        for b, (m, t) in enumerate(zip(matches, targets)):
            for q, g in m.pairs:
                tgt[b, q] = tok_of_phrase[b, :, t.phrase[g]]
        valid = prompt.valid_mask[:, None, :].expand_as(tgt).float()
        enc_cls = (sigmoid_focal_loss(enc["token_logits"], tgt) * valid).sum() / num_boxes
        _, enc_l1, enc_giou = self._box_losses(None, enc["boxes"], targets, matches, phrase_mask, num_boxes)
        parts["enc_cls"], parts["enc_l1"], parts["enc_giou"] = enc_cls, enc_l1, enc_giou
        total = total + self.w.enc * (self.w.cls * enc_cls + self.w.l1 * enc_l1 + self.w.giou * enc_giou)
        if self.masks:
            pm = model.pixel_map(out)
            content = out["layers"][-1]["content"]
            pred, gt = [], []
            for b, (m, t) in enumerate(zip(matches_last, targets)):
                if not m.pairs:
                    continue
                # query order, so sampled points do not depend on ground-truth order
                pairs = sorted(m.pairs)
                q = torch.tensor([p[0] for p in pairs])
                g = torch.tensor([p[1] for p in pairs])
                pred.append(model.mask_head(content[b : b + 1, q], pm[b : b + 1])[0])
                gt.append(t.masks[g])
            if pred:
                pred_t, gt_t = torch.cat(pred), torch.cat(gt)
                mloss = point_sampled_mask_loss(
                    pred_t, gt_t, self.n_points, generator=generator, bce_weight=self.w.mask_bce, dice_weight=self.w.mask_dice
                )
                mloss = mloss * pred_t.shape[0] / num_boxes
            else:
                mloss = pm.sum() * 0.0
            parts["mask"] = mloss
            total = total + mloss
        return total, parts

    def _box_losses(self, logits, boxes, targets, matches, phrase_mask, num_boxes):
        cls = boxes.new_zeros(())
        if logits is not None:
            tgt = torch.zeros_like(logits)
            for b, (m, t) in enumerate(zip(matches, targets)):
                for q, g in m.pairs:
                    tgt[b, q, t.phrase[g]] = 1.0
            cls = (sigmoid_focal_loss(logits, tgt) * phrase_mask[:, None].float()).sum() / num_boxes
        src, dst = [], []
        for b, (m, t) in enumerate(zip(matches, targets)):
            if m.pairs:
                src.append(boxes[b, m.query_indices])
                dst.append(t.boxes[m.gt_indices])
        if not src:
            zero = boxes.sum() * 0.0
            return cls, zero, zero
        src_t, dst_t = torch.cat(src), torch.cat(dst)
        return cls, l1_box_loss(src_t, dst_t).sum() / num_boxes, giou_loss(src_t, dst_t).sum() / num_boxes


def _phrase_max(token_logits: Tensor, tok_of_phrase: Tensor) -> Tensor:
    """(B, Q, T) token logits -> (B, Q, P) max over each phrase's tokens."""
    big = token_logits[:, :, :, None].masked_fill(tok_of_phrase[:, None] == 0, MASKED_LOGIT)
    return big.max(2).values
