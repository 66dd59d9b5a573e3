"""Checkpoints: model tensors plus config snapshot and stage provenance in one container."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch
from torch import nn

from . import container
from .data import VOCAB

KIND = "dinoy-checkpoint"
# parameters outside these prefixes form the trunk that later stages must not touch
HEAD_PREFIXES = ("keypoint_head.", "language_head.", "customized_prompts.")


PROMPT_PREFIX = "customized_prompts.prompts."


def storage_name(param_name: str) -> str:
    """Container entry name: top-level module as a ``/`` namespace; customized prompts keyed by name."""
    if param_name.startswith(PROMPT_PREFIX):
        return "customized_prompts/" + param_name[len(PROMPT_PREFIX) :]
    return param_name.replace(".", "/", 1)


def param_name(storage: str) -> str:
    if storage.startswith("customized_prompts/"):
        return PROMPT_PREFIX + storage.split("/", 1)[1]
    return storage.replace("/", ".", 1)


class FreezeViolation(RuntimeError):
    pass


class StageOrderError(ValueError):
    pass


def named_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def params_digest(arrays: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of the selected arrays in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays if names is None else names):
        a = np.ascontiguousarray(arrays[name])
        h.update(f"{name}|{a.dtype.str}|{a.shape}|".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def trunk_names(names: Iterable[str]) -> list[str]:
    return sorted(n for n in names if not n.startswith(HEAD_PREFIXES))


def trunk_digest(module_or_arrays: nn.Module | Mapping[str, np.ndarray]) -> str:
    arrays = named_arrays(module_or_arrays) if isinstance(module_or_arrays, nn.Module) else module_or_arrays
    return params_digest(arrays, trunk_names(arrays))


def frozen_names(arrays: Mapping[str, np.ndarray], trainable_prefixes: Iterable[str]) -> list[str]:
    prefixes = tuple(trainable_prefixes)
    return sorted(n for n in arrays if not n.startswith(prefixes))


def check_frozen(before: Mapping[str, np.ndarray], after: Mapping[str, np.ndarray], trainable_prefixes: Iterable[str]) -> str:
    """Compare the frozen subset of two snapshots; raise with a per-tensor diff report on mismatch."""
    names = frozen_names(before, trainable_prefixes)
    d0, d1 = params_digest(before, names), params_digest(after, names)
    if d0 != d1:
        changed = [n for n in names if not np.array_equal(before[n], after[n])]
        lines = [f"  {n}: max |delta| = {np.abs(after[n].astype(np.float64) - before[n]).max():.3e}" for n in changed[:20]]
        more = f"\n  ... and {len(changed) - 20} more" if len(changed) > 20 else ""
        raise FreezeViolation(f"frozen digest changed ({d0[:12]} -> {d1[:12]}); {len(changed)} tensors differ:\n" + "\n".join(lines) + more)
    return d0


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    model_config: dict
    provenance: list[dict] = field(default_factory=list)
    data_config: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def stages(self) -> list[str]:
        return [str(p["stage"]) for p in self.provenance]

    @property
    def frozen_digest(self) -> str:
        return trunk_digest(self.arrays)

    def require_stage1(self) -> None:
        if "1" not in self.stages:
            raise StageOrderError(f"checkpoint lacks stage-1 provenance (stages: {self.stages or 'none'})")

    def meta(self) -> dict[str, Any]:
        return {
            "kind": KIND,
            "model_config": self.model_config,
            "data_config": self.data_config,
            "provenance": self.provenance,
            "frozen_digest": self.frozen_digest,
            "vocabulary": list(VOCAB.words),
            "extra": self.extra,
        }

    def stored_arrays(self) -> dict[str, np.ndarray]:
        return {storage_name(k): v for k, v in self.arrays.items()}

    def encode(self) -> bytes:
        return container.encode(self.stored_arrays(), self.meta())

    def save(self, path: str | Path) -> str:
        return container.save(path, self.stored_arrays(), self.meta())

    def with_stage(self, arrays: dict[str, np.ndarray], record: dict) -> "Checkpoint":
        """New checkpoint with ``record`` appended to a copy of the provenance chain."""
        parent = container.sha256_bytes(self.encode())
        return Checkpoint(arrays, dict(self.model_config), [*self.provenance, {**record, "parent": parent}], self.data_config, dict(self.extra))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        stored, meta = container.load(path)
        arrays = {param_name(k): v for k, v in stored.items()}
        if meta.get("kind") != KIND:
            raise container.ContainerError(f"{path} is not a model checkpoint")
        if meta.get("vocabulary") != list(VOCAB.words):
            raise container.ContainerError("checkpoint vocabulary differs from this build")
        ck = cls(arrays, meta["model_config"], meta["provenance"], meta.get("data_config"), meta.get("extra", {}))
        if ck.frozen_digest != meta["frozen_digest"]:
            raise container.ContainerError("stored frozen digest does not match tensors")
        return ck

    def build_model(self):
        from .model import DinoY, ModelConfig

        model = DinoY(ModelConfig.from_dict(self.model_config))
        for name, arr in self.arrays.items():
            if name.startswith(PROMPT_PREFIX) and name[len(PROMPT_PREFIX) :] not in model.customized_prompts.prompts:
                model.customized_prompts.register(name[len(PROMPT_PREFIX) :], arr.shape[0])
        load_arrays(model, self.arrays)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model, provenance: list[dict], data_config: dict | None = None, extra: dict | None = None) -> "Checkpoint":
        return cls(named_arrays(model), model.config.to_dict(), list(provenance), data_config, dict(extra or {}))


def load_arrays(model: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise container.ContainerError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
