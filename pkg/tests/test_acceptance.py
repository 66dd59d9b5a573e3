"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training-backed criteria use the cached checkpoint chain from ``chain.py``.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch

from dinoy.checkpoint import Checkpoint, named_arrays
from dinoy.data import VOCAB, DataConfig, make_splits
from dinoy.edge import Student, count_params, logit_mse
from dinoy.evaluate import dumps_report, evaluate_split
from dinoy.heads import assign, dense_mask_loss, giou, point_sampled_mask_loss
from dinoy.keypoints import KeypointSpec, oks, pck
from dinoy.training import TrainConfig, seed_everything, stage1_train

from acceptance_report import record
from chain import DATA, STAGE1_BUDGET_S, STUDENT, STUDENT_TRAIN, load_chain
from conftest import TINY
from oracles import (
    brute_force_min_cost,
    deform_module,
    deform_zero_offset_oracle,
    fp16_overflow_case,
    fp16_stress_suite,
    giou_raster_oracle,
    gradient_suite,
    mask_fixture,
    random_box,
)

UNIVERSAL_BEFORE_MAX = 0.1
MSE_PROBE = 16


@pytest.fixture(scope="session")
def chain():
    return load_chain()


@pytest.fixture(scope="session")
def stage1_report(chain):
    return evaluate_split(chain["stage1"], "val_held_in", ["text", "mask", "visual"])


def _check(num: int, title: str, checks: list[tuple[str, bool]], elapsed: float | None = None) -> None:
    ok = all(c for _, c in checks)
    detail = "; ".join(f"{'ok' if c else 'FAIL'} {msg}" for msg, c in checks)
    if elapsed is not None:
        detail += f"; {elapsed:.1f}s"
    record(num, title, ok, detail)
    assert ok, f"criterion {num} ({title}): {detail}"


# ---------------------------------------------------------------------------
# property criteria


def test_criterion_01_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    hung = 0
    for _ in range(100):
        cost = rng.random((6, 6))
        total = sum(cost[q, g] for q, g in assign(cost).pairs)
        hung += total == brute_force_min_cost(cost)
    giou_err = 0.0
    for _ in range(50):
        a, b = random_box(rng, 1000), random_box(rng, 1000)
        giou_err = max(giou_err, abs(float(giou(torch.tensor(a), torch.tensor(b))) - giou_raster_oracle(a, b)))
    attn = deform_module()
    with torch.no_grad():
        attn.sampling_offsets.weight.zero_()
        attn.sampling_offsets.bias.zero_()
    shapes = [(6, 5), (3, 3)]
    g = torch.Generator().manual_seed(1)
    value = torch.randn(1, sum(h * w for h, w in shapes), 16, generator=g, dtype=torch.float64)
    query = torch.randn(1, 7, 16, generator=g, dtype=torch.float64)
    ref = torch.rand(1, 7, 2, generator=g, dtype=torch.float64)
    with torch.no_grad():
        got = attn(query, ref, value, shapes)[0].numpy()
    deform_err = float(np.abs(got - deform_zero_offset_oracle(attn, query[0].numpy(), ref[0].numpy(), value[0].numpy(), shapes)).max())
    elapsed = time.perf_counter() - t0
    _check(
        1,
        "oracle equivalence",
        [
            (f"hungarian exact {hung}/100", hung == 100),
            (f"giou max err {giou_err:.2e} < 1e-3", giou_err < 1e-3),
            (f"deformable max err {deform_err:.2e} < 1e-6", deform_err < 1e-6),
            ("runtime < 60s", elapsed < 60),
        ],
        elapsed,
    )


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    worst = gradient_suite(20)
    elapsed = time.perf_counter() - t0
    checks = [(f"{name} {err:.1e}", err < 1e-4) for name, err in worst.items()]
    _check(2, "gradient suite", [*checks, ("runtime < 120s", elapsed < 120)], elapsed)


def test_criterion_03_mask_loss_degeneracy():
    logits, gt = mask_fixture()
    dense = float(dense_mask_loss(logits, gt))
    lattice = float(point_sampled_mask_loss(logits, gt, logits.shape[-1] * logits.shape[-2], lattice=True))
    g = torch.Generator().manual_seed(0)
    draws = [float(point_sampled_mask_loss(logits, gt, 256, importance=0.0, generator=g)) for _ in range(1000)]
    mc = abs(np.mean(draws) - dense) / dense
    _check(
        3,
        "mask-loss degeneracy",
        [(f"lattice |diff| {abs(lattice - dense):.1e} < 1e-6", abs(lattice - dense) < 1e-6), (f"uniform MC rel err {mc:.2%} < 2%", mc < 0.02)],
    )


# ---------------------------------------------------------------------------
# training-backed criteria


@pytest.mark.slow
def test_criterion_04_stage1_training(chain, stage1_report):
    held_out = evaluate_split(chain["stage1"], "val_held_out", ["text"])
    train_s = chain["stage1_records"][-1]["time"]
    ap_in = stage1_report["tasks"]["text"]["held_in"]["AP50"]
    ap_out = held_out["tasks"]["text"]["held_out"]["AP50"]
    mask_in = stage1_report["tasks"]["mask"]["held_in"]["AP50"]
    mae = stage1_report["tasks"]["visual"]["counting_mae"]
    _check(
        4,
        "stage-1 desk-scale training",
        [
            (f"train time {train_s / 60:.1f} min <= 30", train_s <= STAGE1_BUDGET_S),
            (f"held-in box AP50 {ap_in:.3f} >= 0.80", ap_in >= 0.80),
            (f"held-out box AP50 {ap_out:.3f} >= 0.50", ap_out >= 0.50),
            (f"held-in mask AP50 {mask_in:.3f} >= 0.60", mask_in >= 0.60),
            (f"counting MAE {mae:.3f} <= 1.0", mae <= 1.0),
        ],
    )


@pytest.mark.slow
def test_criterion_05_freeze_contracts(chain, stage1_report):
    base = chain["stage1"].frozen_digest
    digests = {k: chain[k].frozen_digest for k in ("keypoint", "language", "tuned")}
    final = evaluate_split(chain["tuned"], "val_held_in", ["text", "mask", "visual"])
    before = stage1_report["tasks"]["text"]["all"]["AP"]
    after = final["tasks"]["text"]["all"]["AP"]
    delta = abs(after - before)
    checks = [(f"{k} digest {'=' if d == base else '!='} stage-1", d == base) for k, d in digests.items()]
    checks.append((f"re-evaluated val AP {after:.6f} vs {before:.6f} (|diff| {delta:.1e} <= 1e-9)", delta <= 1e-9))
    checks.append(("stage chain 1 > keypoint > language > prompt-tune", chain["tuned"].stages == ["1", "keypoint", "language", "prompt-tune"]))
    _check(5, "freeze contracts", checks)


@pytest.mark.slow
def test_criterion_06_keypoint_head(chain):
    spec = KeypointSpec("one", 1, (0.2,))
    gt = np.array([[0.3, 0.3]])
    exact = oks(gt, gt, [True], 0.25, spec) == 1.0
    half = abs(oks(gt + [0.1, 0.0], gt, [True], 0.25, spec) - math.exp(-0.5))
    rng = np.random.default_rng(0)
    monotone = True
    for _ in range(200):
        g = rng.random((8, 2))
        p = g + rng.normal(0, 0.05, (8, 2))
        vis = rng.random(8) > 0.2
        vis[0] = True
        box = [0.5, 0.5, *rng.uniform(0.1, 1.0, 2)]
        vals = [pck(p, g, vis, box, t) for t in np.linspace(0.0, 0.5, 26)]
        monotone &= all(a <= b for a, b in zip(vals, vals[1:]))
    rep = evaluate_split(chain["keypoint"], "val_held_in", ["keypoint"])["tasks"]["keypoint"]
    ap = rep["AP50"]
    _check(
        6,
        "keypoint head",
        [
            ("OKS(pred=gt) == 1", exact),
            (f"OKS exp(-1/2) err {half:.1e} <= 1e-9", half <= 1e-9),
            ("PCK monotone on 200 random cases", monotone),
            (f"keypoint AP(OKS>=0.5) {ap:.3f} >= 0.70 (PCK@0.05 {rep['pck@0.05']})", ap >= 0.70),
        ],
    )


@pytest.mark.slow
def test_criterion_07_language_head(chain):
    model = chain["language"].build_model()
    head = model.language_head
    g = torch.Generator().manual_seed(0)
    obj = torch.randn(2, head.roi_size**2 + 1, head.token_embed.embedding_dim, generator=g)
    inputs = torch.randint(3, len(VOCAB), (2, 6), generator=g)
    inputs[:, 0] = VOCAB.bos_id
    causal = True
    with torch.no_grad():
        for task in ("recognize", "caption"):
            base = head.logits(obj, task, inputs)
            for t in range(1, inputs.shape[1]):
                pert = inputs.clone()
                pert[:, t] = (pert[:, t] + 3) % len(VOCAB)
                causal &= torch.equal(head.logits(obj, task, pert)[:, :t], base[:, :t])
    rep = evaluate_split(chain["language"], "val_held_in", ["caption"])["tasks"]["caption"]
    em = rep["recognize_exact_match"]
    _check(
        7,
        "language head",
        [("future-token perturbation leaves past logits identical", causal), (f"recognize exact match {em:.3f} >= 0.90 over {rep['n_regions']} regions", em >= 0.90)],
    )


@pytest.mark.slow
def test_criterion_08_universal_prompt(chain):
    before = evaluate_split(chain["language"], "val_held_in", ["universal"])["tasks"]["universal"]["recall@0.5"]
    after = evaluate_split(chain["tuned"], "val_held_in", ["universal"])["tasks"]["universal"]["recall@0.5"]
    _check(
        8,
        "universal prompt",
        [(f"recall before tuning {before:.3f} <= {UNIVERSAL_BEFORE_MAX}", before <= UNIVERSAL_BEFORE_MAX), (f"recall after tuning {after:.3f} >= 0.70", after >= 0.70)],
    )


def _initial_student(teacher_ck: Checkpoint):
    # replays the RNG consumption of distill_train up to student construction
    seed_everything(STUDENT_TRAIN.seed)
    teacher = teacher_ck.build_model()
    return Student(STUDENT, teacher.config, count_params(teacher)).model.eval(), teacher


@pytest.mark.slow
def test_criterion_09_edge(chain):
    dist = evaluate_split(chain["distilled"], "val_held_in", ["text"])["tasks"]["text"]["all"]["AP"]
    scratch = evaluate_split(chain["scratch"], "val_held_in", ["text"])["tasks"]["text"]["all"]["AP"]
    init, teacher = _initial_student(chain["stage1"])
    probe = list(make_splits(DATA)["val_held_in"])[:MSE_PROBE]
    phrases = [c.name for c in DATA.held_in]
    mse0 = logit_mse(init, teacher, probe, phrases)
    mse1 = logit_mse(chain["distilled"].build_model(), teacher, probe, phrases)
    drop = 1 - mse1 / mse0
    worst = fp16_stress_suite()
    naive, normalized, ref = fp16_overflow_case()
    overflow_rel = float(np.abs(normalized - ref).max() / np.abs(ref).max())
    _check(
        9,
        "edge distillation and FP16",
        [
            (f"distilled AP {dist:.3f} >= scratch AP {scratch:.3f}", dist >= scratch),
            (f"logit MSE {mse0:.3f} -> {mse1:.3f} (drop {drop:.1%} >= 50%)", drop >= 0.5),
            (f"stress suite worst rel err {worst:.2e} <= 1%", worst <= 0.01),
            ("naive half overflows", not np.isfinite(naive).all()),
            (f"normalized finite, rel err {overflow_rel:.2e} <= 1%", bool(np.isfinite(normalized).all()) and overflow_rel <= 0.01),
        ],
    )


@pytest.mark.slow
def test_criterion_10_determinism_and_round_trip(chain, tmp_path):
    torch.set_num_threads(1)
    data = DataConfig(image_size=64, scale_range=(5, 10), n_train=24, n_val=4)
    cfg = TrainConfig(steps=4, batch_size=2, warmup=1, mask_points=64)
    (ck_a, rec_a), (ck_b, rec_b) = (stage1_train(cfg, data, TINY) for _ in range(2))
    curve_a = [r["loss"] for r in rec_a]
    curve_b = [r["loss"] for r in rec_b]
    bitwise = curve_a == curve_b and ck_a.encode() == ck_b.encode()

    s1 = chain["tuned"]
    s1.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    loaded.save(tmp_path / "b.ckpt")
    round_trip = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    tensors = all(np.array_equal(v, named_arrays(loaded.build_model())[k]) for k, v in s1.arrays.items())

    tasks = ["text", "mask", "visual", "universal", "keypoint", "caption"]
    r1 = dumps_report(evaluate_split(s1, "val_held_in", tasks, n_images=16))
    r2 = dumps_report(evaluate_split(Checkpoint.load(tmp_path / "b.ckpt"), "val_held_in", tasks, n_images=16))
    _check(
        10,
        "determinism and round trip",
        [
            (f"fixed-seed loss curves bitwise equal over {len(curve_a)} steps", bitwise),
            ("checkpoint save/load/save bytes identical", round_trip),
            ("loaded tensors identical", tensors),
            ("evaluation report bytes identical", r1 == r2),
        ],
    )
