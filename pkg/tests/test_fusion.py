import numpy as np
import pytest
import torch

from dinoy.data import DataConfig, make_splits
from dinoy.fusion import Backbone, EarlyFusionEncoder, select_top_tokens
from dinoy.model import GroundingCriterion, images_tensor, text_targets
from dinoy.prompts import TextPrompt

from oracles import deform_module, deform_zero_offset_oracle


def test_backbone_level_shapes_and_errors():
    bb = Backbone(32, (8, 16, 16, 24, 32))
    f = bb(torch.zeros(1, 3, 128, 128))
    assert [s for s, _ in f.levels] == [4, 8, 16, 32]
    assert [tuple(m.shape[-2:]) for _, m in f.levels] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert all(m.shape[1] == 32 for _, m in f.levels)
    assert f.raw_s4.shape[1] == 16
    assert all(torch.isfinite(m).all() for _, m in f.levels)
    with pytest.raises(ValueError, match="pad"):
        bb(torch.zeros(1, 3, 100, 128))


def test_deformable_zero_offsets_match_bilinear_oracle():
    attn = deform_module()
    with torch.no_grad():
        attn.sampling_offsets.weight.zero_()
        attn.sampling_offsets.bias.zero_()
    shapes = [(6, 5), (3, 3)]
    g = torch.Generator().manual_seed(1)
    value = torch.randn(1, sum(h * w for h, w in shapes), 16, generator=g, dtype=torch.float64)
    query = torch.randn(1, 7, 16, generator=g, dtype=torch.float64)
    ref = torch.rand(1, 7, 2, generator=g, dtype=torch.float64)
    ref[0, 0] = torch.tensor([0.0, 1.0], dtype=torch.float64)  # border clamp
    got = attn(query, ref, value, shapes)[0].detach().numpy()
    want = deform_zero_offset_oracle(attn, query[0].numpy(), ref[0].numpy(), value[0].numpy(), shapes)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)


def test_deformable_constant_field_and_weight_normalization():
    attn = deform_module(d=16, L=3, H=4, P=3)
    with torch.no_grad():
        attn.sampling_offsets.weight.normal_(std=5.0)
    shapes = [(8, 8), (4, 4), (2, 2)]
    c = torch.randn(16, dtype=torch.float64)
    value = c.expand(1, 84, 16).clone()
    query = torch.randn(1, 5, 16, dtype=torch.float64)
    ref = torch.rand(1, 5, 2, dtype=torch.float64)
    out = attn(query, ref, value, shapes)
    expected = attn.output_proj(attn.value_proj(c))
    torch.testing.assert_close(out[0], expected.expand(5, 16), rtol=0, atol=1e-10)
    _, w = attn.sampling(query, ref, shapes)
    torch.testing.assert_close(w.sum((-1, -2)), torch.ones(1, 5, 4, dtype=torch.float64), rtol=0, atol=1e-6)
    with pytest.raises(ValueError):
        attn(query, ref, value[..., :8], shapes)


def test_encoder_shapes_prompt_dependence_and_cross_attention_ablation(tiny_model):
    img = torch.rand(1, 3, 128, 128)
    feats = tiny_model.backbone(img)
    enc: EarlyFusionEncoder = tiny_model.encoder
    p1 = tiny_model.encode_text(TextPrompt.from_phrases(["red circle"]))
    p2 = tiny_model.encode_text(TextPrompt.from_phrases(["blue star"]))
    m1, m2 = enc(feats, p1), enc(feats, p2)
    assert m1.tokens.shape == (1, 16**2 + 8**2 + 4**2, 32)
    assert (m1.tokens - m2.tokens).abs().mean() > 0
    for layer in enc.layers:
        with torch.no_grad():
            layer.img_from_prompt.out.weight.zero_()
            layer.img_from_prompt.out.bias.zero_()
    free = enc(feats, None)
    torch.testing.assert_close(enc(feats, p1).tokens, free.tokens, rtol=0, atol=0)


def test_query_selection_argmax_and_sorted_scores():
    d, N = 8, 30
    memory = torch.zeros(1, N, d)
    memory[0, :, 1:] = torch.randn(N, d - 1)
    prompt = torch.zeros(1, 2, d)
    prompt[0, :, 0] = 1.0  # every memory token orthogonal to the prompt ...
    memory[0, 17, 0] = 2.0  # ... except this one
    valid = torch.ones(1, 2, dtype=torch.bool)
    idx, scores, _ = select_top_tokens(memory, prompt, valid, 10)
    assert idx[0, 0] == 17
    assert (scores[0, :-1] >= scores[0, 1:]).all()
    with pytest.raises(ValueError):
        select_top_tokens(memory, prompt, valid, N + 1)


def test_query_selection_invariant_to_prompt_token_order():
    g = torch.Generator().manual_seed(3)
    memory = torch.randn(2, 50, 16, generator=g)
    prompt = torch.randn(2, 6, 16, generator=g)
    valid = torch.tensor([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=torch.bool)
    perm = torch.tensor([3, 5, 0, 4, 1, 2])
    a, _, _ = select_top_tokens(memory, prompt, valid, 12)
    b, _, _ = select_top_tokens(memory, prompt[:, perm], valid[:, perm], 12)
    assert torch.equal(a, b)


def test_decoder_zero_init_and_aux_outputs(tiny_model):
    out = tiny_model(torch.rand(2, 3, 64, 64), text=[TextPrompt.from_phrases(["red circle"])] * 2)
    assert len(out["layers"]) == tiny_model.config.dec_layers
    torch.testing.assert_close(out["layers"][0]["boxes"], out["enc"]["boxes"], rtol=0, atol=1e-6)
    anchors = out["enc"]["boxes"]
    assert (anchors > 0).all() and (anchors < 1).all()


def test_forward_is_nan_free_across_seeds(tiny_model):
    prompt = [TextPrompt.from_phrases(["red circle", "blue star"])]
    with torch.no_grad():
        for seed in range(100):
            g = torch.Generator().manual_seed(seed)
            img = torch.rand(1, 3, 64, 64, generator=g) * (seed % 3)
            out = tiny_model(img, text=prompt)
            for layer in out["layers"]:
                assert torch.isfinite(layer["boxes"]).all() and torch.isfinite(layer["logits"]).all()


def test_every_trunk_parameter_receives_gradient(tiny_config):
    from dinoy.model import DinoY

    torch.manual_seed(0)
    model = DinoY(tiny_config).train()
    cfg = DataConfig(image_size=64, scale_range=(5.0, 10.0), n_train=4, n_val=2)
    samples = [make_splits(cfg)["train"][i] for i in range(4)]
    vocab = [c.name for c in cfg.held_in]
    crit = GroundingCriterion(n_points=64)
    seen: dict[str, bool] = {}
    # two steps: zero-initialized box heads only pass gradient upstream once they are nonzero
    opt = torch.optim.SGD(model.parameters(), lr=1e-2)
    for _ in range(2):
        phrases = sorted({o.category.name for s in samples for o in s.objects})[:4] or vocab[:2]
        out = model(images_tensor(samples), text=[TextPrompt.from_phrases(phrases)] * len(samples))
        loss, _ = crit(model, out, [text_targets(s, phrases) for s in samples])
        opt.zero_grad()
        loss.backward()
        for n, p in model.named_parameters():
            if n.startswith(("backbone.", "encoder.", "decoder.", "query_selection.")):
                seen[n] = seen.get(n, False) or (p.grad is not None and bool(p.grad.abs().sum() > 0))
        opt.step()
    missing = [n for n, ok in seen.items() if not ok]
    assert not missing, missing
