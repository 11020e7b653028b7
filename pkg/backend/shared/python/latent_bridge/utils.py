# Shared utilities for the latent_bridge library and stage handlers
# This module contains common logic shared across all pipeline stages (hashing, JSON sanitizing, seeded RNG streams)
import hashlib
import json
from typing import Any, Iterable

import numpy as np
import torch


# --- RNG STREAMS ---
# Every stochastic op draws from a stream keyed by (seed, step, stream id), so a batch
# or noise draw never depends on what ran before it.
STREAM_BATCH = 0
STREAM_MASK = 1
STREAM_NOISE = 2
STREAM_SCHEDULE = 3


def step_rng(seed: int, step: int = 0, stream: int = 0) -> np.random.Generator:
    """Numpy generator for one (seed, step, stream) cell."""
    return np.random.default_rng([int(seed), int(step), int(stream)])


def step_generator(seed: int, step: int = 0, stream: int = 0) -> torch.Generator:
    """Torch CPU generator for one (seed, step, stream) cell."""
    state = np.random.SeedSequence([int(seed), int(step), int(stream)]).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)
    return generator


# --- HELPER: JSON-safe conversion ---
def sanitize_for_json(obj: Any) -> Any:
    """
    Recursively convert numpy / torch scalars and arrays into JSON-safe types.
    """
    if isinstance(obj, torch.Tensor):
        return sanitize_for_json(obj.detach().cpu().numpy())
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): sanitize_for_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_for_json(i) for i in obj]
    return obj


def compute_hash(data: Any) -> str:
    content = json.dumps(sanitize_for_json(data), sort_keys=True)
    return hashlib.sha256(content.encode()).hexdigest()[:16]


def batch_hash(indices: Iterable[int]) -> str:
    """Short digest of a batch's sample indices, used to compare data order across runs."""
    arr = np.asarray(list(indices), dtype="<i8")
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def tensor_checksum(named_tensors: Iterable[tuple]) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes) of tensors, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(named_tensors, key=lambda item: item[0]):
        t = tensor.detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(t.dtype).encode())
        digest.update(str(tuple(t.shape)).encode())
        digest.update(t.numpy().tobytes())
    return digest.hexdigest()
