import struct

import numpy as np
import pytest
import torch

from latent_bridge.errors import DimensionMismatchError
from latent_bridge.gridio import (
    GRID_MAGIC,
    decode_grids,
    encode_grid,
    image_to_u8,
    read_grids,
    read_ppm,
    write_grids,
    write_ppm,
)


def test_record_layout():
    grid = torch.arange(2 * 1 * 3, dtype=torch.float32).view(2, 1, 3)
    payload = encode_grid(grid)
    assert payload[:4] == GRID_MAGIC
    assert struct.unpack("<III", payload[4:16]) == (2, 1, 3)
    assert len(payload) == 16 + 4 * 6
    assert struct.unpack("<f", payload[16 + 4 * 4:16 + 4 * 5])[0] == 4.0


def test_multi_record_file(tmp_path):
    grids = torch.randn(3, 4, 2, 2)
    write_grids(tmp_path / "g.lbg", grids)
    loaded = read_grids(tmp_path / "g.lbg")
    assert len(loaded) == 3
    assert np.array_equal(np.stack(loaded), grids.numpy())


def test_mixed_shapes_in_one_file():
    payload = encode_grid(np.zeros((1, 2, 2))) + encode_grid(np.ones((3, 1, 1)))
    first, second = decode_grids(payload)
    assert first.shape == (1, 2, 2) and second.shape == (3, 1, 1)
    assert second.tolist() == [[[1.0]], [[1.0]], [[1.0]]]


@pytest.mark.parametrize("payload", [b"LBG1\x01\x00", b"XXXX" + b"\x00" * 12, encode_grid(np.zeros((1, 2, 2)))[:-1]])
def test_corrupt_payloads(payload):
    with pytest.raises(DimensionMismatchError):
        decode_grids(payload)


def test_record_needs_three_dims():
    with pytest.raises(DimensionMismatchError):
        encode_grid(np.zeros((2, 2)))


def test_ppm_dump(tmp_path):
    image = torch.zeros(3, 2, 4)
    image[0, 0, 0] = 1.0
    image[2, 1, 3] = 2.0  # clipped
    write_ppm(tmp_path / "img.ppm", image)
    pixels = read_ppm(tmp_path / "img.ppm")
    assert pixels.shape == (2, 4, 3)
    assert pixels[0, 0].tolist() == [255, 0, 0]
    assert pixels[1, 3].tolist() == [0, 0, 255]
    assert np.array_equal(pixels, image_to_u8(image))
