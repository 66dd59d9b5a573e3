"""Command-line entry point: ``dinoy <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .checkpoint import Checkpoint, StageOrderError
from .container import ContainerError, sha256_bytes
from .data import DataConfig, make_splits, counting_split, save_split
from .model import ModelConfig

CHECKPOINT_FILE = "model.ckpt"


class ConfigError(ValueError):
    """Invalid configuration or command-line usage (exit code 2)."""


# ---------------------------------------------------------------------------
# config handling


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(cfg) - {"data", "model", "train", "eval", "distill"})
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {unknown}; expected data, model, train, eval, distill")
    return cfg


def merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict):
            out[k] = merge(out.get(k) or {}, v)
        else:
            out[k] = v
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def data_config(section: dict) -> DataConfig:
    try:
        base = DataConfig().to_dict()
        unknown = sorted(set(section) - set(base))
        if unknown:
            raise ConfigError(f"unknown data option(s): {unknown}")
        cfg = DataConfig.from_dict({**base, **section})
        cfg.validate()
        return cfg
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid data config: {e}") from None


def model_config(section: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict({**ModelConfig().to_dict(), **section})
    except TypeError as e:
        raise ConfigError(f"invalid model config: {e}") from None


def train_config(section: dict, stage: str):
    from .training import TrainConfig

    try:
        cfg = TrainConfig.from_dict({**section, "stage": stage})
        cfg.validate()
        return cfg
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from None


@contextmanager
def run_dir(out: str):
    """Own ``out`` for the duration of a run via an exclusive lockfile."""
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{path} is locked by another run (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def file_digest(path: Path) -> str:
    return sha256_bytes(path.read_bytes())


def write_manifest(out: Path, command: str, cfg: dict, seed: int | None, artifacts: Sequence[Path], extra: dict | None = None) -> Path:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "artifacts": {str(p.relative_to(out)): file_digest(p) for p in sorted(artifacts)},
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_checkpoint(path: str | None, flag: str = "--from") -> Checkpoint:
    if not path:
        raise ConfigError(f"{flag} <checkpoint> is required")
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_FILE
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    try:
        return Checkpoint.load(p)
    except ContainerError as e:
        raise ConfigError(f"cannot load checkpoint {p}: {e}") from None


def _progress(every: int = 50):
    def cb(rec: dict) -> None:
        if rec["step"] % every == 0:
            print(json.dumps({k: rec[k] for k in ("step", "loss", "lr") if k in rec}), file=sys.stderr, flush=True)
    return cb


# ---------------------------------------------------------------------------
# subcommands


def cmd_data_gen(args) -> int:
    cfg = merge(load_config(args.config), {"data": {"seed": args.seed, "n_train": args.n_train, "n_val": args.n_val, "image_size": args.image_size}})
    data = data_config(cfg.get("data", {}))
    with run_dir(args.out) as out:
        splits = make_splits(data)
        splits["val_counting"] = counting_split(data)
        artifacts = []
        for name, split in splits.items():
            if args.only and name not in args.only:
                continue
            save_split(out / name, split)
            artifacts += [p for p in (out / name).iterdir() if p.is_file()]
            print(f"{name}: {len(split)} scenes", file=sys.stderr)
        write_manifest(out, "data gen", cfg, data.seed, artifacts)
    return 0


def _train_overrides(args) -> dict:
    return {"steps": args.steps, "batch_size": args.batch_size, "lr": args.lr, "lr_heads": args.lr_heads, "seed": args.seed}


def cmd_train(args) -> int:
    from .training import prompt_tune_universal, stage1_train, stage2_train

    stage = {"1": "1", "keypoint": "keypoint", "language": "language", "prompt-tune": "prompt-tune"}[args.stage]
    cfg = merge(load_config(args.config), {"train": _train_overrides(args)})
    tcfg = train_config(cfg.get("train", {}), stage)
    if stage != "1":
        base = load_checkpoint(args.from_)
        try:
            base.require_stage1()
        except StageOrderError as e:
            raise ConfigError(str(e)) from None
    elif args.from_:
        raise ConfigError("stage 1 trains from scratch; drop --from")
    else:
        data, mcfg = data_config(cfg.get("data", {})), model_config(cfg.get("model", {}))
    with run_dir(args.out) as out:
        log = out / "metrics.jsonl"
        log.unlink(missing_ok=True)
        if stage == "1":
            ck, _ = stage1_train(tcfg, data, mcfg, log, _progress())
        elif stage == "prompt-tune":
            ck, _ = prompt_tune_universal(base, tcfg, None, log, _progress())
        else:
            ck, _ = stage2_train(base, tcfg, None, log, _progress())
        path = out / CHECKPOINT_FILE
        ck.save(path)
        write_manifest(out, f"train --stage {args.stage}", cfg, tcfg.seed, [path, log], {"frozen_digest": ck.frozen_digest, "stages": ck.stages})
    print(str(path))
    return 0


def cmd_prompt_tune(args) -> int:
    args.stage = "prompt-tune"
    return cmd_train(args)


def cmd_distill(args) -> int:
    from .edge import DistillWeights, StudentConfig, distill_train

    teacher = load_checkpoint(args.from_)
    try:
        teacher.require_stage1()
    except StageOrderError as e:
        raise ConfigError(str(e)) from None
    cfg = merge(load_config(args.config), {"train": _train_overrides(args), "distill": {"student_d": args.student_d}})
    tcfg = train_config(cfg.get("train", {}), "1")
    dsec = dict(cfg.get("distill") or {})
    try:
        student = StudentConfig(d=int(dsec.pop("student_d", None) or StudentConfig.d))
        weights = None if args.scratch else DistillWeights(**{k: float(v) for k, v in dsec.items() if k in ("feature", "response")})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid distill config: {e}") from None
    with run_dir(args.out) as out:
        log = out / "metrics.jsonl"
        log.unlink(missing_ok=True)
        try:
            ck, _ = distill_train(teacher, student, tcfg, None, weights, log, _progress())
        except ValueError as e:
            raise ConfigError(str(e)) from None
        path = out / CHECKPOINT_FILE
        ck.save(path)
        write_manifest(out, "distill", cfg, tcfg.seed, [path, log], {"teacher_digest": teacher.frozen_digest})
    print(str(path))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import TASKS, MissingHeadError, dumps_report, evaluate_split

    ck = load_checkpoint(args.ckpt, "--ckpt")
    tasks = [t for t in args.tasks.replace(",", " ").split() if t]
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise ConfigError(f"unknown task(s) {bad or tasks}; choose from {', '.join(TASKS)}")
    try:
        report = evaluate_split(ck, args.split, tasks, args.n_images, overlays=args.overlays)
    except MissingHeadError as e:
        raise ConfigError(str(e)) from None
    text = dumps_report(report)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _load_image(args, ck: Checkpoint) -> tuple[np.ndarray, str]:
    if args.image and args.scene:
        raise ConfigError("give either --image or --scene, not both")
    if args.scene:
        try:
            split_name, idx = args.scene.rsplit(":", 1)
            data = DataConfig.from_dict(ck.data_config)
            splits = {**make_splits(data), "val_counting": counting_split(data)}
            return splits[split_name][int(idx)].image, args.scene
        except (ValueError, KeyError, IndexError):
            raise ConfigError(f"--scene expects <split>:<index>, got {args.scene!r}") from None
    if not args.image:
        raise ConfigError("--image <png> or --scene <split>:<index> is required")
    from PIL import Image

    try:
        img = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    except (FileNotFoundError, OSError) as e:
        raise ConfigError(f"cannot read image {args.image}: {e}") from None
    if img.shape[0] % 32 or img.shape[1] % 32:
        raise ConfigError(f"image size {img.shape[1]}x{img.shape[0]} is not a multiple of 32; pad it first")
    return img, args.image


def parse_visual_prompt(text: str):
    from .prompts import VisualPrompt

    prompts = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        kind, _, nums = part.partition(":")
        try:
            prompts.append(VisualPrompt(kind.strip(), tuple(float(v) for v in nums.split(","))))
        except ValueError as e:
            raise ConfigError(f"bad visual prompt {part!r}: {e}") from None
    if not prompts:
        raise ConfigError("visual prompt needs at least one 'box:cx,cy,w,h' or 'point:x,y'")
    return prompts


def cmd_infer(args) -> int:
    import torch

    from .edge import EmbeddingCache, build_embedding_cache, default_cache_dir
    from .evaluate import attach_keypoints, detection_json, pair_detections, save_overlay
    from .language import decode_text
    from .prompts import UNIVERSAL

    ck = load_checkpoint(args.ckpt, "--ckpt")
    if args.keypoints and "keypoint" not in ck.stages:
        raise ConfigError("--keypoints needs a checkpoint with a trained keypoint head")
    if args.caption and "language" not in ck.stages:
        raise ConfigError("--caption needs a checkpoint with a trained language head")
    image, image_name = _load_image(args, ck)
    model = ck.build_model()
    images = torch.from_numpy(image).permute(2, 0, 1)[None].contiguous()
    with torch.no_grad():
        if args.prompt_type == "text":
            phrases = [p.strip() for p in (args.prompt or "").split(".") if p.strip()]
            if not phrases:
                raise ConfigError("text prompt is empty; separate phrases with '.'")
            try:
                from .data import VOCAB

                for p in phrases:
                    VOCAB.encode(p)
            except ValueError as e:
                raise ConfigError(str(e)) from None
            ckpt_dir = Path(args.ckpt) if Path(args.ckpt).is_dir() else Path(args.ckpt).parent
            cache_dir = default_cache_dir(ckpt_dir / "cache")
            cache = EmbeddingCache.load(cache_dir, model) or build_embedding_cache([], model)
            n_before = len(cache)
            emb = cache.get_or_encode(phrases, model)
            if len(cache) != n_before:
                cache.save(cache_dir)
            out = model(images, prompt=emb)
        elif args.prompt_type == "visual":
            vp = parse_visual_prompt(args.prompt or "")
            phrases = ["exemplar"]
            out = model(images, visual=[vp])
        else:
            name = args.prompt or UNIVERSAL
            if name not in model.customized_prompts.names():
                raise ConfigError(f"unknown customized prompt {name!r}; known: {model.customized_prompts.names()}")
            phrases = [name]
            out = model(images, customized=name)
        dets = pair_detections(model, out, 0, phrases, top_k=args.top_k, with_masks=args.masks)
        # one detection per query: keep each query's best phrase only
        seen, kept = set(), []
        for d in dets:
            if d.score >= args.score_threshold and d.query_index not in seen:
                seen.add(d.query_index)
                kept.append(d)
        if args.keypoints and kept:
            attach_keypoints(model, out, 0, kept)
        if args.caption and kept:
            last = out["layers"][-1]
            fmap = out["memory"].level_map(0)
            for d in kept:
                q = d.query_index
                tokens = model.language_head.region_tokens(fmap[0], last["boxes"][0, q : q + 1], last["content"][0, q : q + 1])
                d.label = decode_text(model.language_head.generate(tokens, "recognize")[0])
                d.caption = decode_text(model.language_head.generate(tokens, "caption")[0])
    result = {"image": image_name, "detections": [detection_json(d, image.shape[:2] if args.masks else None) for d in kept]}
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.overlay:
        save_overlay(args.overlay, image, kept)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dinoy", description="Promptable open-vocabulary detector toolkit.")
    p.add_argument("--version", action="version", version=f"dinoy {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="synthetic dataset utilities")
    dsub = d.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", help="generate and store the train / validation splits")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="YAML config file (data section)")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--n-train", type=int, dest="n_train", help="number of training scenes")
    g.add_argument("--n-val", type=int, dest="n_val", help="number of scenes per validation split")
    g.add_argument("--image-size", type=int, dest="image_size", help="square image side in pixels (multiple of 32, >= 64)")
    g.add_argument("--only", nargs="+", help="write only these splits (train, val_held_in, val_held_out, val_counting)")
    g.set_defaults(fn=cmd_data_gen)

    def train_flags(sp):
        sp.add_argument("--out", required=True, help="run directory (checkpoint, metrics, manifest)")
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--steps", type=int, help="optimization steps")
        sp.add_argument("--batch-size", type=int, dest="batch_size", help="images per step")
        sp.add_argument("--lr", type=float, help="trunk learning rate")
        sp.add_argument("--lr-heads", type=float, dest="lr_heads", help="head learning rate")
        sp.add_argument("--seed", type=int, help="training seed")

    t = sub.add_parser("train", help="run a training stage")
    t.add_argument("--stage", required=True, choices=["1", "keypoint", "language"], help="1 = joint grounding; keypoint / language = frozen-trunk head")
    t.add_argument("--from", dest="from_", help="stage-1 checkpoint (file or run directory); required for keypoint / language")
    train_flags(t)
    t.set_defaults(fn=cmd_train)

    pt = sub.add_parser("prompt-tune", help="tune the universal prompt for prompt-free detection")
    pt.add_argument("--from", dest="from_", required=True, help="stage-1 (or later) checkpoint")
    train_flags(pt)
    pt.set_defaults(fn=cmd_prompt_tune)

    ds = sub.add_parser("distill", help="train a compact student from a teacher checkpoint")
    ds.add_argument("--from", dest="from_", required=True, help="teacher checkpoint")
    ds.add_argument("--student-d", type=int, dest="student_d", help="student hidden width")
    ds.add_argument("--scratch", action="store_true", help="train the student without distillation (baseline)")
    train_flags(ds)
    ds.set_defaults(fn=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a validation split")
    e.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    e.add_argument("--split", default="val_held_in", help="val_held_in or val_held_out (default: %(default)s)")
    e.add_argument("--tasks", default="text", help="comma-separated: text, mask, visual, universal, keypoint, caption")
    e.add_argument("--n-images", type=int, dest="n_images", help="evaluate only the first N scenes")
    e.add_argument("--out", help="report path (default: stdout)")
    e.add_argument("--overlays", help="directory for PNG overlays (<split>/<image_id>.png)")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="detect prompted objects in one image")
    i.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    i.add_argument("--prompt-type", required=True, dest="prompt_type", choices=["text", "visual", "universal"], help="prompt modality")
    i.add_argument("--prompt", help="text: phrases separated by '.'; visual: 'box:cx,cy,w,h;point:x,y'; universal: prompt name")
    i.add_argument("--image", help="RGB PNG whose sides are multiples of 32")
    i.add_argument("--scene", help="generated scene as <split>:<index> instead of --image")
    i.add_argument("--caption", action="store_true", help="attach recognize label and caption")
    i.add_argument("--keypoints", action="store_true", help="attach keypoints as [x, y, v] triplets")
    i.add_argument("--masks", action="store_true", help="attach run-length encoded masks")
    i.add_argument("--score-threshold", type=float, default=0.5, dest="score_threshold", help="minimum score (default: %(default)s)")
    i.add_argument("--top-k", type=int, default=100, dest="top_k", help="candidate (query, phrase) pairs (default: %(default)s)")
    i.add_argument("--out", help="detection JSON path (default: stdout)")
    i.add_argument("--overlay", help="write an overlay PNG here")
    i.set_defaults(fn=cmd_infer)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"dinoy: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001
        print(f"dinoy: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
