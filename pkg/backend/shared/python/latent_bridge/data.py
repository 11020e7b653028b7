"""
Synthetic shapes dataset: coloured circles / squares / triangles on plain backgrounds,
with templated captions such as "a red circle above a blue square on a gray background".

Everything derives from a numpy Generator seeded by the caller, so a dataset is regenerable
bit-for-bit from its seed.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import DimensionMismatchError, OutOfRangeError
from .utils import STREAM_BATCH, step_rng

logger = logging.getLogger(__name__)

# --- VOCABULARY ---
COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
BACKGROUNDS: Dict[str, Tuple[float, float, float]] = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("above", "below", "left of", "right of")
RADII = (5, 6, 7)

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
WORDS = ("a", "on", "background", "of", "above", "below", "left", "right") + SHAPES + tuple(COLORS) + tuple(BACKGROUNDS)


class Tokenizer:
    """Word-level tokenizer over the fixed caption vocabulary."""

    def __init__(self, max_len: int = 16):
        self.max_len = max_len
        self.itos = list(SPECIAL_TOKENS) + list(WORDS)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, caption: str) -> List[int]:
        ids = [BOS_ID] + [self.stoi.get(w, UNK_ID) for w in caption.split()] + [EOS_ID]
        if len(ids) > self.max_len:
            raise DimensionMismatchError(f"Caption '{caption}' needs {len(ids)} tokens, max is {self.max_len}")
        return ids + [PAD_ID] * (self.max_len - len(ids))

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else "<unk>")
        return " ".join(words)

    def batch(self, captions: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.encode(c) for c in captions], dtype=torch.long)


# --- RENDERING ---

def shape_mask(shape: str, cx: int, cy: int, r: int, size: int = 32) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = xs + 0.5 - cx, ys + 0.5 - cy
    if shape == "circle":
        return px ** 2 + py ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(px) <= r) & (np.abs(py) <= r)
    if shape == "triangle":
        # apex up, base on the bottom edge of the bounding box
        depth = (py + r) / (2.0 * r)
        return (py >= -r) & (py <= r) & (np.abs(px) <= r * depth)
    raise OutOfRangeError(f"Unknown shape '{shape}'")


def render(label: Dict[str, Any], size: int = 32) -> np.ndarray:
    image = np.empty((3, size, size), dtype=np.float32)
    image[:] = np.asarray(BACKGROUNDS[label["background"]], dtype=np.float32)[:, None, None]
    for s in label["shapes"]:
        mask = shape_mask(s["shape"], s["cx"], s["cy"], s["r"], size)
        image[:, mask] = np.asarray(COLORS[s["color"]], dtype=np.float32)[:, None]
    return image


def caption_for(label: Dict[str, Any]) -> str:
    first = label["shapes"][0]
    text = f"a {first['color']} {first['shape']}"
    if len(label["shapes"]) == 2:
        second = label["shapes"][1]
        text += f" {label['relation']} a {second['color']} {second['shape']}"
    return f"{text} on a {label['background']} background"


def _draw_label(rng: np.random.Generator, size: int) -> Dict[str, Any]:
    background = str(rng.choice(list(BACKGROUNDS)))
    n_shapes = int(rng.integers(1, 3))
    colors = rng.choice(list(COLORS), size=n_shapes, replace=False)
    half = size // 2
    if n_shapes == 1:
        r = int(rng.choice(RADII))
        cx, cy = int(rng.integers(r, size - r + 1)), int(rng.integers(r, size - r + 1))
        return {"background": background, "relation": None,
                "shapes": [{"shape": str(rng.choice(SHAPES)), "color": str(colors[0]), "cx": cx, "cy": cy, "r": r}]}

    relation = str(rng.choice(RELATIONS))
    shapes = []
    for k in range(2):
        r = int(rng.choice(RADII))
        # first shape goes in the half named by the relation, second in the other
        first_half = (k == 0) == (relation in ("above", "left of"))
        lo, hi = (r, half - r) if first_half else (half + r, size - r)
        along, across = int(rng.integers(lo, hi + 1)), int(rng.integers(r, size - r + 1))
        cx, cy = (across, along) if relation in ("above", "below") else (along, across)
        shapes.append({"shape": str(rng.choice(SHAPES)), "color": str(colors[k]), "cx": cx, "cy": cy, "r": r})
    return {"background": background, "relation": relation, "shapes": shapes}


# --- DATASET ---

@dataclass
class SyntheticDataset:
    images: torch.Tensor  # (n, 3, H, W) float32 in [0, 1]
    captions: List[str]
    tokens: torch.Tensor  # (n, max_len) long
    labels: List[Dict[str, Any]]
    seed: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.captions)

    def subset(self, indices: Sequence[int]) -> "SyntheticDataset":
        idx = [int(i) for i in indices]
        return SyntheticDataset(
            self.images[idx], [self.captions[i] for i in idx], self.tokens[idx],
            [self.labels[i] for i in idx], self.seed, dict(self.meta),
        )


def _iter_samples(rng: np.random.Generator, size: int) -> Iterator[Tuple[Dict[str, Any], np.ndarray]]:
    seen = set()
    while True:
        label = _draw_label(rng, size)
        image = render(label, size)
        digest = hashlib.sha256(image.tobytes()).hexdigest()
        if digest in seen:
            continue
        seen.add(digest)
        yield label, image


def _assemble(samples, seed: int, max_text_len: int) -> SyntheticDataset:
    tokenizer = Tokenizer(max_text_len)
    labels = [label for label, _ in samples]
    captions = [caption_for(label) for label in labels]
    images = torch.from_numpy(np.stack([image for _, image in samples]))
    return SyntheticDataset(images, captions, tokenizer.batch(captions), labels, seed)


def generate_synthetic_dataset(seed: int, n: int, image_size: int = 32, max_text_len: int = 16) -> SyntheticDataset:
    """n distinct image/caption pairs, deterministic in `seed`."""
    if n <= 0:
        raise OutOfRangeError(f"Dataset size must be positive, got {n}")
    stream = _iter_samples(np.random.default_rng(seed), image_size)
    return _assemble([next(stream) for _ in range(n)], seed, max_text_len)


def generate_splits(
    seed: int, n_train: int, n_val: int, image_size: int = 32, max_text_len: int = 16
) -> Tuple[SyntheticDataset, SyntheticDataset]:
    """Train and validation splits drawn from one de-duplicated stream, so no image is in both."""
    if n_train <= 0 or n_val <= 0:
        raise OutOfRangeError("Split sizes must be positive")
    stream = _iter_samples(np.random.default_rng(seed), image_size)
    samples = [next(stream) for _ in range(n_train + n_val)]
    return (
        _assemble(samples[:n_train], seed, max_text_len),
        _assemble(samples[n_train:], seed, max_text_len),
    )


# --- RULE-BASED CHECKER ---

def describe_image(image: Union[np.ndarray, torch.Tensor]) -> Dict[str, Any]:
    """Recover (background, shapes, relation) from exact colours and shape geometry."""
    img = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    pixels = img.reshape(3, -1).T
    values, counts = np.unique(pixels, axis=0, return_counts=True)
    bg_rgb = tuple(float(v) for v in values[np.argmax(counts)])
    background = next((n for n, c in BACKGROUNDS.items() if c == bg_rgb), None)

    shapes = []
    for name, rgb in COLORS.items():
        mask = np.all(np.abs(img - np.asarray(rgb, dtype=img.dtype)[:, None, None]) < 1e-6, axis=0)
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        fill = mask.sum() / box
        kind = "square" if fill >= 0.95 else "circle" if fill >= 0.65 else "triangle"
        shapes.append({"color": name, "shape": kind, "cx": float(xs.mean() + 0.5), "cy": float(ys.mean() + 0.5)})
    return {"background": background, "shapes": shapes}


def _holds(relation: str, a: Dict[str, Any], b: Dict[str, Any]) -> bool:
    """Centroid test for "a <relation> b"."""
    return {
        "above": a["cy"] < b["cy"],
        "below": a["cy"] > b["cy"],
        "left of": a["cx"] < b["cx"],
        "right of": a["cx"] > b["cx"],
    }.get(relation, False)


def verify_caption(image, caption: str) -> bool:
    """True iff the caption's colours, shapes, relation and background match what is drawn."""
    found = describe_image(image)
    by_color = {s["color"]: s for s in found["shapes"]}
    words = caption.split()
    if found["background"] is None or words[-2:] != [found["background"], "background"]:
        return False
    mentioned = [(words[i + 1], words[i + 2]) for i, w in enumerate(words[:-3]) if w == "a" and words[i + 1] in COLORS]
    if len(mentioned) != len(found["shapes"]):
        return False
    for color, shape in mentioned:
        if color not in by_color or by_color[color]["shape"] != shape:
            return False
    if len(mentioned) == 2:
        rel_words = " ".join(words[3:words.index("a", 3)])
        return _holds(rel_words, by_color[mentioned[0][0]], by_color[mentioned[1][0]])
    return True


# --- PERSISTENCE ---

def save_dataset(dataset: SyntheticDataset, directory: Union[str, Path], name: str = "train") -> Path:
    """<dir>/<name>_images.npy, <name>_tokens.npy, <name>_captions.jsonl (no timestamps, so files are reproducible)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / f"{name}_images.npy", dataset.images.numpy())
    np.save(d / f"{name}_tokens.npy", dataset.tokens.numpy())
    with open(d / f"{name}_captions.jsonl", "w") as fh:
        for caption, label in zip(dataset.captions, dataset.labels):
            fh.write(json.dumps({"caption": caption, "label": label}, sort_keys=True) + "\n")
    (d / f"{name}_meta.json").write_text(json.dumps({"seed": dataset.seed, "n": len(dataset)}, sort_keys=True))
    logger.info(f"Wrote {len(dataset)} '{name}' samples to {d}")
    return d


def load_dataset(directory: Union[str, Path], name: str = "train") -> SyntheticDataset:
    d = Path(directory)
    images_path = d / f"{name}_images.npy"
    if not images_path.exists():
        raise FileNotFoundError(f"No '{name}' split under {d} (run gen-data first)")
    images = torch.from_numpy(np.load(images_path))
    tokens = torch.from_numpy(np.load(d / f"{name}_tokens.npy")).long()
    rows = [json.loads(line) for line in (d / f"{name}_captions.jsonl").read_text().splitlines() if line]
    meta = json.loads((d / f"{name}_meta.json").read_text())
    return SyntheticDataset(images, [r["caption"] for r in rows], tokens, [r["label"] for r in rows], meta["seed"], meta)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch for a given step. Depends only on (seed, step), never on earlier batches."""
    rng = step_rng(seed, step, STREAM_BATCH)
    return rng.choice(n, size=batch_size, replace=batch_size > n)
