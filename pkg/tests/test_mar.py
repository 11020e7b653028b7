import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_bridge.errors import DimensionMismatchError, OutOfRangeError
from latent_bridge.mar import (
    InferenceSchedule,
    MaskRatioSampler,
    build_inference_schedule,
    cosine_step_sizes,
    mar_generate,
    mask_count,
    masked_mse_loss,
    sample_training_mask,
    sample_training_planes,
)


# --- MASK RATIO ---

def test_mask_ratio_bounds_and_mean():
    sampler = MaskRatioSampler(seed=0)
    samples = sampler.sample_many(100_000)
    assert samples.min() >= 0.7
    assert samples.max() <= 1.0
    assert sampler.analytic_mean() == pytest.approx(0.867, abs=1e-3)
    assert abs(samples.mean() - sampler.analytic_mean()) < 0.002
    assert abs(samples.std() - sampler.analytic_std()) < 0.002


def test_degenerate_std_gives_clamped_mean():
    sampler = MaskRatioSampler(mean=1.0, std=0.0)
    assert set(sampler.sample_many(50).tolist()) == {1.0}
    assert sampler.analytic_mean() == 1.0
    assert MaskRatioSampler(mean=1.3, std=0.0).sample() == 1.0


def test_sampler_state_resumes_sequence():
    sampler = MaskRatioSampler(seed=3)
    sampler.sample_many(5)
    state = sampler.get_state()
    first = sampler.sample_many(5)
    sampler.set_state(state)
    assert np.array_equal(sampler.sample_many(5), first)


@pytest.mark.parametrize("kwargs", [{"low": 0.0}, {"low": 0.9, "high": 0.8}, {"high": 1.2}, {"std": -1.0}])
def test_sampler_rejects_bad_parameters(kwargs):
    with pytest.raises(OutOfRangeError):
        MaskRatioSampler(**kwargs)


# --- TRAINING MASKS ---

def test_mask_count_rounding():
    assert mask_count(64, 1.0) == 64
    assert mask_count(64, 0.7) == 45
    assert mask_count(4, 0.625) == 3  # 2.5 rounds up
    assert mask_count(64, 0.001) == 1
    with pytest.raises(OutOfRangeError):
        mask_count(0, 0.7)
    with pytest.raises(OutOfRangeError):
        mask_count(64, 0.0)


def test_training_mask_is_sorted_unique_subset():
    mask = sample_training_mask(np.random.default_rng(0), 64, 0.7)
    assert len(mask) == 45
    assert list(mask) == sorted(set(mask.tolist()))
    assert mask.min() >= 0 and mask.max() < 64
    assert len(sample_training_mask(np.random.default_rng(0), 64, 1.0)) == 64


def test_different_seeds_give_different_masks():
    collisions = sum(
        np.array_equal(sample_training_mask(np.random.default_rng(s), 64, 0.7),
                       sample_training_mask(np.random.default_rng(s + 1000), 64, 0.7))
        for s in range(50)
    )
    assert collisions == 0


def test_training_planes_draw_one_ratio_per_sample():
    planes = sample_training_planes(np.random.default_rng(0), MaskRatioSampler(seed=0), 6, 8, 8)
    assert planes.shape == (6, 8, 8)
    counts = planes.flatten(1).sum(1)
    assert bool(((counts >= 45) & (counts <= 64)).all())


# --- MASKED MSE ---

def test_masked_mse_examples():
    target = torch.randn(16, 4, 4)
    assert masked_mse_loss(target.clone(), target, [0, 3]) == 0
    pred = target.clone()
    pred[0, 1, 2] += 1.0
    assert masked_mse_loss(pred, target, [6]).item() == pytest.approx(1 / 16)


def test_masked_mse_matches_loop():
    pred, target = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    plane = torch.rand(2, 4, 4) < 0.5
    plane[0, 0, 0] = True
    total, count = 0.0, 0
    for b in range(2):
        for i in range(4):
            for j in range(4):
                if plane[b, i, j]:
                    for c in range(3):
                        total += float(pred[b, c, i, j] - target[b, c, i, j]) ** 2
                        count += 1
    assert masked_mse_loss(pred, target, plane).item() == pytest.approx(total / count, abs=1e-6)


def test_masked_mse_ignores_unmasked_cells():
    pred = torch.randn(4, 3, 3, requires_grad=True)
    masked_mse_loss(pred, torch.zeros(4, 3, 3), [4]).backward()
    grad = pred.grad.abs().sum(0)
    assert grad[1, 1] > 0
    grad[1, 1] = 0
    assert not grad.any()


def test_masked_mse_errors():
    with pytest.raises(OutOfRangeError):
        masked_mse_loss(torch.zeros(2, 2, 2), torch.zeros(2, 2, 2), [])
    with pytest.raises(DimensionMismatchError):
        masked_mse_loss(torch.zeros(2, 2, 2), torch.zeros(3, 2, 2), [0])


# --- INFERENCE SCHEDULE ---

def test_step_size_examples():
    assert cosine_step_sizes(64, 1) == [64]
    assert cosine_step_sizes(64, 64) == [1] * 64
    sizes = cosine_step_sizes(64, 8)
    assert sum(sizes) == 64
    assert sizes == sorted(sizes)
    assert sizes[0] < sizes[-1]


@pytest.mark.parametrize("steps", [0, 65])
def test_step_sizes_reject_out_of_range(steps):
    with pytest.raises(OutOfRangeError):
        cosine_step_sizes(64, steps)


def _assert_partition(schedule, n, k):
    flat = [i for step in schedule.steps for i in step]
    assert schedule.num_steps == k
    assert sorted(flat) == list(range(n))
    sizes = [len(step) for step in schedule.steps]
    assert min(sizes) >= 1
    assert sizes == sorted(sizes)


def test_schedule_extremes():
    rng = np.random.default_rng(0)
    one = build_inference_schedule(rng, 64, 1)
    assert sorted(one.steps[0]) == list(range(64))
    singles = build_inference_schedule(rng, 64, 64)
    assert all(len(step) == 1 for step in singles.steps)
    _assert_partition(singles, 64, 64)


def test_thousand_random_schedules_are_partitions():
    meta = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(meta.integers(1, 129))
        k = int(meta.integers(1, n + 1))
        seed = int(meta.integers(0, 2 ** 31))
        _assert_partition(build_inference_schedule(np.random.default_rng(seed), n, k), n, k)


@given(n=st.integers(1, 256), data=st.data())
@settings(max_examples=200, deadline=None)
def test_step_sizes_property(n, data):
    k = data.draw(st.integers(1, n))
    sizes = cosine_step_sizes(n, k)
    assert len(sizes) == k
    assert sum(sizes) == n
    assert min(sizes) >= 1
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))


def test_schedule_validation():
    InferenceSchedule(((1, 0), (2, 3))).validate(4)
    with pytest.raises(DimensionMismatchError):
        InferenceSchedule(((1, 0), (2, 2))).validate(4)
    with pytest.raises(DimensionMismatchError):
        InferenceSchedule(((0, 1, 2),)).validate(4)
    with pytest.raises(OutOfRangeError):
        InferenceSchedule(((0, 1), ())).validate(2)


def test_schedule_lists_are_json_friendly():
    schedule = build_inference_schedule(np.random.default_rng(1), 16, 4)
    lists = schedule.to_lists()
    assert all(isinstance(i, int) for step in lists for i in step)
    assert InferenceSchedule.from_lists(lists) == schedule


# --- GENERATION ---

class LinearToy:
    """Each cell predicts 0.5 * (sum of committed cells) + (index + 1) * [1, -1]."""

    grid_shape = (2, 2, 2)

    def __init__(self):
        self.calls = []

    def predict_grid(self, text_tokens, grid, mask_plane):
        self.calls.append(mask_plane.clone())
        committed = (grid * (~mask_plane).unsqueeze(1)).sum(dim=(-1, -2))  # (B, 2)
        offsets = torch.arange(1, 5, dtype=torch.float32).view(1, 1, 2, 2) * torch.tensor([1.0, -1.0]).view(1, 2, 1, 1)
        return 0.5 * committed.view(-1, 2, 1, 1) + offsets


def test_sequential_decoding_matches_hand_rollout():
    model = LinearToy()
    schedule = InferenceSchedule(((2,), (0,), (3,), (1,)))
    grid = mar_generate(torch.zeros(1, 3, dtype=torch.long), model, schedule)
    expected = {0: 2.5, 1: 8.125, 2: 3.0, 3: 6.75}
    for idx, value in expected.items():
        r, c = divmod(idx, 2)
        assert grid[0, :, r, c].tolist() == [value, -value]
    masked = [int(plane.sum()) for plane in model.calls]
    assert masked == [4, 3, 2, 1]


def test_single_step_equals_one_forward():
    model = LinearToy()
    grid = mar_generate(torch.zeros(2, 3, dtype=torch.long), model, InferenceSchedule(((0, 1, 2, 3),)))
    direct = LinearToy().predict_grid(None, torch.zeros(2, 2, 2, 2), torch.ones(2, 2, 2, dtype=torch.bool))
    assert torch.equal(grid, direct)


def test_generation_is_deterministic_with_mllm(stack):
    schedule = build_inference_schedule(np.random.default_rng(0), 16, 4)
    tokens = torch.randint(4, 20, (2, 8))
    a = mar_generate(tokens, stack.mllm, schedule)
    b = mar_generate(tokens, stack.mllm, schedule)
    assert a.shape == (2, 8, 4, 4)
    assert torch.equal(a, b)


def test_generation_rejects_mismatched_schedule():
    with pytest.raises(DimensionMismatchError):
        mar_generate(torch.zeros(1, 3, dtype=torch.long), LinearToy(), InferenceSchedule(((0, 1, 2),)))
