import math

import pytest
import torch

from dinoy.data import VOCAB
from dinoy.language import TASKS, LanguageHead, roi_align, task_target


def test_roi_constant_field():
    fmap = torch.full((3, 8, 8), 2.5)
    out = roi_align(fmap, torch.tensor([[0.4, 0.5, 0.3, 0.2]]))
    assert out.shape == (1, 3, 3, 3)
    torch.testing.assert_close(out, torch.full_like(out, 2.5), rtol=0, atol=0)
    with pytest.raises(ValueError):
        roi_align(fmap, torch.tensor([[0.4, 0.5, 0.0, 0.2]]))


def test_roi_full_box_recovers_map():
    fmap = torch.randn(4, 6, 6, dtype=torch.float64)
    out = roi_align(fmap, torch.tensor([[0.5, 0.5, 1.0, 1.0]], dtype=torch.float64), size=6, sampling=1)
    torch.testing.assert_close(out[0], fmap, rtol=0, atol=1e-12)


def test_roi_linear_ramp_closed_form():
    H = W = 16
    xs = (torch.arange(W, dtype=torch.float64) + 0.5) / W  # pixel-center x in normalized units
    fmap = xs.expand(H, W)[None].clone()
    box = torch.tensor([[0.45, 0.5, 0.4, 0.3]], dtype=torch.float64)
    out = roi_align(fmap, box, size=3, sampling=2)[0, 0]
    x0, w = 0.45 - 0.2, 0.4
    for j in range(3):
        # the four samples of bin j sit at x0 + w * (2j + {0.5, 1.5}) / 6
        want = sum(x0 + w * (2 * j + o) / 6 for o in (0.5, 1.5)) / 2
        assert torch.allclose(out[:, j], torch.tensor(want, dtype=torch.float64), atol=1e-6)


def _head(**kw):
    torch.manual_seed(0)
    return LanguageHead(d=16, d_lm=16, n_layers=2, n_heads=4, **kw)


def test_object_tokens_shape_bias_and_gradients():
    head = _head()
    roi = torch.zeros(2, 16, 3, 3)
    obj = head.build_object_tokens(roi, torch.zeros(2, 16))
    assert obj.shape == (2, 10, 16) and head.num_object_tokens == 10
    torch.testing.assert_close(obj, head.object_proj.bias.expand(2, 10, 16), rtol=0, atol=0)
    roi = torch.randn(2, 16, 3, 3, requires_grad=True)
    q = torch.randn(2, 16, requires_grad=True)
    head.caption_loss(head.build_object_tokens(roi, q), "recognize", [[4, 5, VOCAB.eos_id]] * 2).backward()
    assert roi.grad.abs().sum() > 0 and q.grad.abs().sum() > 0


def test_generation_contract():
    head = _head().eval()
    obj = torch.randn(3, 10, 16)
    one = head.generate(obj, "caption", max_len=1)
    assert [len(s) for s in one] == [1, 1, 1]
    assert head.generate(obj, "recognize") == head.generate(obj, "recognize")
    with pytest.raises(ValueError):
        head.generate(obj, "caption", max_len=0)
    with pytest.raises(KeyError):
        head.generate(obj, "translate")
    assert set(TASKS) == set(head.task_tokens)


def test_causal_masking_is_exact():
    head = _head().eval()
    obj = torch.randn(2, 10, 16)
    inputs = torch.tensor([[VOCAB.bos_id, 4, 12, 17, 9], [VOCAB.bos_id, 6, 13, 15, 2]])
    base = head.logits(obj, "caption", inputs)
    for t in range(1, inputs.shape[1]):
        pert = inputs.clone()
        pert[:, t] = (pert[:, t] + 3) % len(VOCAB)
        out = head.logits(obj, "caption", pert)
        assert torch.equal(out[:, :t], base[:, :t])
        assert not torch.equal(out[:, t:], base[:, t:])


def test_uniform_logits_give_log_vocab():
    head = _head()
    with torch.no_grad():
        head.lm_head.weight.zero_()
        head.lm_head.bias.zero_()
    loss = head.caption_loss(torch.randn(1, 10, 16), "recognize", [[4, 12, VOCAB.eos_id]])
    assert float(loss.detach()) == pytest.approx(math.log(len(VOCAB)), abs=1e-6)


def test_perfect_logits_give_zero_loss(monkeypatch):
    head = _head()
    target = [4, 12, VOCAB.eos_id]

    def perfect(obj, tasks, inputs):
        out = torch.full((1, inputs.shape[1], len(VOCAB)), -50.0)
        for i, t in enumerate(target):
            out[0, i, t] = 50.0
        return out

    monkeypatch.setattr(head, "logits", perfect)
    assert float(head.caption_loss(torch.zeros(1, 10, 16), "recognize", [target])) < 1e-30


def test_loss_ignores_padding_after_eos():
    head = _head()
    obj = torch.randn(1, 10, 16)
    a = head.caption_loss(obj, "caption", [[4, 8, 12, VOCAB.eos_id]])
    b = head.caption_loss(obj, "caption", [[4, 8, 12, VOCAB.eos_id, VOCAB.pad_id, VOCAB.pad_id]])
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        head.caption_loss(obj, "caption", [[]])
    with pytest.raises(ValueError):
        head.caption_loss(obj, "caption", [[4, 8]])


def test_task_targets():
    from dinoy.data import DataConfig, generate_scene

    o = generate_scene(0, DataConfig()).objects[0]
    rec = VOCAB.decode(task_target(o, "recognize"))
    cap = VOCAB.decode(task_target(o, "caption"))
    assert rec == f"{o.category.color} {o.category.shape_kind}"
    assert cap == f"{o.category.color} {o.size_word} {o.category.shape_kind}"
    with pytest.raises(ValueError):
        task_target(o, "ocr")
