"""Cached training chain shared by the acceptance suite and the trained-model checks.

Stage 1, keypoint head, language head and universal prompt tuning run in
sequence; a distilled and a from-scratch student branch off stage 1. Each
checkpoint is cached under ``tests/.artifacts/<name>-<key>/`` where the key
hashes its training config, the parent key and the source of every module
that can affect trained weights. Delete that directory (or set
``DINOY_ACCEPTANCE_RETRAIN=1``) to force a retrain; the first run takes
roughly an hour on one CPU core.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
import shutil
from pathlib import Path

import torch

import dinoy
from dinoy.checkpoint import Checkpoint
from dinoy.data import DataConfig
from dinoy.edge import StudentConfig, distill_train
from dinoy.model import ModelConfig
from dinoy.training import TrainConfig, prompt_tune_universal, stage1_train, stage2_train

ARTIFACTS = Path(os.environ.get("DINOY_ACCEPTANCE_CACHE", Path(__file__).parent / ".artifacts"))

DATA = DataConfig()
MODEL = ModelConfig()
STAGE1 = TrainConfig(stage="1", steps=1500, lr=5e-4, lr_heads=1e-3)
KEYPOINT = TrainConfig(stage="keypoint", steps=600, lr_heads=1e-3, warmup=20)
LANGUAGE = TrainConfig(stage="language", steps=600, lr_heads=1e-3, warmup=20)
PROMPT_TUNE = TrainConfig(stage="prompt-tune", steps=2000, lr_heads=3e-2, warmup=20)
STUDENT = StudentConfig()
STUDENT_TRAIN = TrainConfig(stage="1", steps=400, lr=5e-4, lr_heads=1e-3, warmup=20)

STAGE1_BUDGET_S = 30 * 60


# modules that cannot change trained weights; editing them keeps the cache valid
EVAL_ONLY = {"cli.py", "evaluate.py", "metrics.py"}


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(dinoy.__file__).parent.glob("*.py")):
        if p.name in EVAL_ONLY:
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _key(*parts) -> str:
    blob = json.dumps([_source_digest(), *parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cached(name: str, key: str, build):
    """Load ``name`` from the artifact cache or build, save and return it.
    ``build`` returns (checkpoint, training records)."""
    d = ARTIFACTS / f"{name}-{key}"
    if os.environ.get("DINOY_ACCEPTANCE_RETRAIN") == "1" and d.exists():
        shutil.rmtree(d)
    if (d / "model.ckpt").exists():
        return Checkpoint.load(d / "model.ckpt"), json.loads((d / "records.json").read_text())
    ck, records = build()
    tmp = d.with_suffix(".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    ck.save(tmp / "model.ckpt")
    (tmp / "records.json").write_text(json.dumps(records))
    tmp.rename(d)
    return ck, records


@functools.cache
def load_chain() -> dict:
    torch.set_num_threads(1)
    k1 = _key("stage1", DATA.to_dict(), MODEL.to_dict(), STAGE1.to_dict())
    s1, r1 = _cached("stage1", k1, lambda: stage1_train(STAGE1, DATA, MODEL))
    kk = _key("keypoint", k1, KEYPOINT.to_dict())
    kp, _ = _cached("keypoint", kk, lambda: stage2_train(s1, KEYPOINT))
    kl = _key("language", kk, LANGUAGE.to_dict())
    lang, _ = _cached("language", kl, lambda: stage2_train(kp, LANGUAGE))
    kt = _key("prompt-tune", kl, PROMPT_TUNE.to_dict())
    tuned, _ = _cached("prompt-tune", kt, lambda: prompt_tune_universal(lang, PROMPT_TUNE))
    student_cfg = {**dataclasses.asdict(STUDENT), "train": STUDENT_TRAIN.to_dict()}
    dist, dist_rec = _cached("distilled", _key("distilled", k1, student_cfg), lambda: distill_train(s1, STUDENT, STUDENT_TRAIN))
    scratch, _ = _cached("scratch", _key("scratch", k1, student_cfg), lambda: distill_train(s1, STUDENT, STUDENT_TRAIN, weights=None))
    return {
        "stage1": s1,
        "stage1_records": r1,
        "keypoint": kp,
        "language": lang,
        "tuned": tuned,
        "distilled": dist,
        "distill_records": dist_rec,
        "scratch": scratch,
    }
