"""
Named-tensor checkpoints.

A checkpoint is a torch.save'd dict:
    tensors:   {"<namespace>/<param name>": tensor}
    frozen:    {"<namespace>/<param name>": bool}
    config:    TrainConfig as a plain dict
    phase, step
    optimizer: optimizer state_dict or None
    rng_state: JSON string (mask-ratio sampler state and anything else a resumed run needs)
Everything is loadable with weights_only=True.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import torch
import torch.nn as nn

from .errors import DimensionMismatchError
from .utils import sanitize_for_json, tensor_checksum

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor]
    frozen: Dict[str, bool]
    config: Dict[str, Any]
    phase: str
    step: int = 0
    optimizer: Optional[Dict[str, Any]] = None
    rng_state: Dict[str, Any] = field(default_factory=dict)

    def namespace(self, prefix: str) -> Dict[str, torch.Tensor]:
        head = prefix.rstrip("/") + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}

    def checksum(self, prefix: Optional[str] = None) -> str:
        items = self.tensors.items() if prefix is None else self.namespace(prefix).items()
        return tensor_checksum(items)

    def frozen_checksum(self) -> str:
        return tensor_checksum((k, v) for k, v in self.tensors.items() if self.frozen.get(k, False))


def _key(ns: str, module: nn.Module, name: str) -> str:
    # The MLLM is stored as two namespaces, base/ and gen/, split by parameter role.
    split = getattr(module, "is_generation_parameter", None)
    if split is not None:
        return ("gen" if split(name) else "base") + "/" + name
    return f"{ns}/{name}"


def collect_tensors(modules: Mapping[str, nn.Module]) -> Dict[str, torch.Tensor]:
    """Snapshot parameters and buffers of each module under its namespace."""
    tensors = {}
    for ns, module in modules.items():
        for name, tensor in module.state_dict().items():
            tensors[_key(ns, module, name)] = tensor.detach().clone()
    return tensors


def collect_frozen(modules: Mapping[str, nn.Module]) -> Dict[str, bool]:
    frozen = {}
    for ns, module in modules.items():
        params = dict(module.named_parameters())
        for name in module.state_dict():
            # Buffers are never trained.
            frozen[_key(ns, module, name)] = not params[name].requires_grad if name in params else True
    return frozen


def make_checkpoint(
    modules: Mapping[str, nn.Module],
    config: Dict[str, Any],
    phase: str,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng_state: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    return Checkpoint(
        tensors=collect_tensors(modules),
        frozen=collect_frozen(modules),
        config=dict(config),
        phase=phase,
        step=int(step),
        optimizer=optimizer.state_dict() if optimizer is not None else None,
        rng_state=dict(rng_state or {}),
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "tensors": ckpt.tensors,
            "frozen": ckpt.frozen,
            "config": sanitize_for_json(ckpt.config),
            "phase": ckpt.phase,
            "step": ckpt.step,
            "optimizer": ckpt.optimizer,
            "rng_state": json.dumps(sanitize_for_json(ckpt.rng_state), sort_keys=True),
        },
        p,
    )
    logger.info(f"✅ Saved {ckpt.phase} checkpoint at step {ckpt.step} to {p}")
    return p


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Checkpoint not found: {p}")
    raw = torch.load(p, map_location="cpu", weights_only=True)
    return Checkpoint(
        tensors=raw["tensors"],
        frozen=raw["frozen"],
        config=raw["config"],
        phase=raw["phase"],
        step=int(raw["step"]),
        optimizer=raw.get("optimizer"),
        rng_state=json.loads(raw.get("rng_state") or "{}"),
    )


def restore_module(module: nn.Module, ckpt: Checkpoint, namespace: str) -> nn.Module:
    """Copy a namespace back into a module; every key must match exactly."""
    expected = set(module.state_dict())
    if getattr(module, "is_generation_parameter", None) is None:
        state = ckpt.namespace(namespace)
    else:
        keys = {name: _key(namespace, module, name) for name in expected}
        state = {name: ckpt.tensors[key] for name, key in keys.items() if key in ckpt.tensors}
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise DimensionMismatchError(f"Checkpoint namespace '{namespace}' mismatch: missing={missing} extra={extra}")
    module.load_state_dict(state)
    for name, p in module.named_parameters():
        p.requires_grad_(not ckpt.frozen.get(_key(namespace, module, name), False))
    return module

