"""
Binary grid files and 8-bit image dumps.

Grid record layout (all little-endian):

    offset  size        type      value
    0       4           bytes     magic b"LBG1"
    4       4           uint32    d
    8       4           uint32    H'
    12      4           uint32    W'
    16      4*d*H'*W'   float32   grid values, C order over (d, H', W')

A file holds one or more records back to back.
"""
import logging
import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch

from .errors import DimensionMismatchError

logger = logging.getLogger(__name__)

GRID_MAGIC = b"LBG1"
_HEADER = struct.Struct("<4sIII")


def encode_grid(grid: Union[torch.Tensor, np.ndarray]) -> bytes:
    arr = grid.detach().cpu().numpy() if isinstance(grid, torch.Tensor) else np.asarray(grid)
    if arr.ndim != 3:
        raise DimensionMismatchError(f"Grid record must be (d, H', W'), got shape {arr.shape}")
    d, h, w = arr.shape
    return _HEADER.pack(GRID_MAGIC, d, h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_grids(payload: bytes) -> List[np.ndarray]:
    grids = []
    offset = 0
    while offset < len(payload):
        if len(payload) - offset < _HEADER.size:
            raise DimensionMismatchError(f"Truncated grid header at byte {offset}")
        magic, d, h, w = _HEADER.unpack_from(payload, offset)
        if magic != GRID_MAGIC:
            raise DimensionMismatchError(f"Bad grid magic {magic!r} at byte {offset}")
        offset += _HEADER.size
        n_bytes = 4 * d * h * w
        if len(payload) - offset < n_bytes:
            raise DimensionMismatchError(f"Truncated grid payload at byte {offset}")
        values = np.frombuffer(payload, dtype="<f4", count=d * h * w, offset=offset)
        grids.append(values.reshape(d, h, w).astype(np.float32))
        offset += n_bytes
    return grids


def write_grids(path: Union[str, Path], grids: Sequence) -> None:
    """Write one record per grid. Accepts a (B, d, H', W') tensor or a list of (d, H', W') grids."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        for grid in grids:
            fh.write(encode_grid(grid))
    logger.info(f"Wrote {len(grids)} grid record(s) to {p}")


def read_grids(path: Union[str, Path]) -> List[np.ndarray]:
    return decode_grids(Path(path).read_bytes())


def image_to_u8(image: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    """(3, H, W) float image in [0, 1] -> (H, W, 3) uint8."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.clip(arr, 0.0, 1.0)
    return np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def write_ppm(path: Union[str, Path], image) -> None:
    """Binary PPM (P6) dump of one image."""
    pixels = image_to_u8(image)
    h, w, _ = pixels.shape
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise DimensionMismatchError(f"{path} is not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
