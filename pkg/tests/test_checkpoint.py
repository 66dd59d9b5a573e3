import numpy as np
import pytest
import torch

from dinoy import container
from dinoy.checkpoint import Checkpoint, load_arrays, param_name, storage_name
from dinoy.model import DinoY


def _ck(model):
    return Checkpoint.from_model(model, [{"stage": "1", "steps": 0, "seed": 0}], None)


def test_save_load_save_is_bit_identical(tiny_model, tmp_path):
    ck = _ck(tiny_model)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save(p1)
    Checkpoint.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_model_reproduces_outputs(tiny_model, tmp_path):
    from dinoy.prompts import TextPrompt

    ck = _ck(tiny_model)
    ck.save(tmp_path / "m.ckpt")
    model = Checkpoint.load(tmp_path / "m.ckpt").build_model()
    img = torch.rand(1, 3, 64, 64)
    prompt = [TextPrompt.from_phrases(["red circle"])]
    a = tiny_model(img, text=prompt)["layers"][-1]
    b = model(img, text=prompt)["layers"][-1]
    assert torch.equal(a["logits"], b["logits"]) and torch.equal(a["boxes"], b["boxes"])


def test_storage_namespaces(tiny_model):
    names = _ck(tiny_model).stored_arrays()
    assert "customized_prompts/universal" in names
    assert any(n.startswith("backbone/") for n in names)
    assert any(n.startswith("encoder/") for n in names) and any(n.startswith("decoder/") for n in names)
    for n in list(_ck(tiny_model).arrays)[:50]:
        assert param_name(storage_name(n)) == n


def test_extra_customized_prompts_survive(tiny_config, tmp_path):
    model = DinoY(tiny_config)
    model.customized_prompts.register("shiny", 3, torch.randn(3, tiny_config.d))
    _ck(model).save(tmp_path / "c.ckpt")
    back = Checkpoint.load(tmp_path / "c.ckpt").build_model()
    assert torch.equal(back.customized_prompts.prompts["shiny"], model.customized_prompts.prompts["shiny"])


def test_provenance_is_append_only(tiny_model):
    ck = _ck(tiny_model)
    child = ck.with_stage(ck.arrays, {"stage": "keypoint"})
    assert ck.stages == ["1"] and child.stages == ["1", "keypoint"]
    assert child.provenance[0] == ck.provenance[0]
    assert child.provenance[-1]["parent"] == container.sha256_bytes(ck.encode())


def test_tampering_is_detected(tiny_model, tmp_path):
    path = tmp_path / "t.ckpt"
    _ck(tiny_model).save(path)
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(container.ContainerError):
        Checkpoint.load(path)


def test_load_arrays_rejects_mismatch(tiny_model):
    arrays = dict(_ck(tiny_model).arrays)
    arrays.pop("class_bias")
    with pytest.raises(container.ContainerError, match="class_bias"):
        load_arrays(tiny_model, arrays)
    arrays = dict(_ck(tiny_model).arrays)
    arrays["bogus"] = np.zeros(1, np.float32)
    with pytest.raises(container.ContainerError, match="bogus"):
        load_arrays(tiny_model, arrays)
