import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crvos.config import ModelConfig, TrainConfig
from crvos.data import DataError, SyntheticSpec, generate_synthetic, synthetic_dataset
from crvos.model import CRVOS, read_checkpoint
from crvos.training import (AugmentParams, Clip, TrainingDiverged, augment_clip, clip_tensors, nll_loss,
                            overfit, run_stage, sample_augment_params, sample_clip, train_clip, unroll_clip)


def nll_loop(pred: np.ndarray, target: np.ndarray) -> float:
    """Scalar per-pixel loop."""
    total = 0.0
    _, h, w = pred.shape
    for y in range(h):
        for x in range(w):
            p = pred[0, y, x] if target[y, x] else pred[1, y, x]
            total += -math.log(max(p, 1e-7))
    return total / (h * w)


def test_nll_perfect_prediction():
    pred = torch.zeros(2, 8, 8)
    pred[0] = 1.0
    assert nll_loss(pred, torch.ones(8, 8, dtype=torch.long)).item() == pytest.approx(0.0, abs=1e-6)


def test_nll_uniform_is_ln2():
    pred = torch.full((2, 5, 7), 0.5, dtype=torch.float64)
    target = torch.randint(0, 2, (5, 7))
    assert nll_loss(pred, target).item() == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nll_matches_loop(seed):
    rng = np.random.default_rng(seed)
    fg = rng.random((9, 11))
    fg[0, 0] = 0.0  # exercises the clamp
    pred = np.stack([fg, 1 - fg])
    target = rng.random((9, 11)) < 0.5
    assert nll_loss(torch.as_tensor(pred), torch.as_tensor(target)).item() == pytest.approx(
        nll_loop(pred, target), abs=1e-6)
    perm = rng.permutation(99)
    shuffled = pred.reshape(2, -1)[:, perm].reshape(2, 9, 11)
    assert nll_loss(torch.as_tensor(shuffled), torch.as_tensor(target.ravel()[perm].reshape(9, 11))).item() == \
        pytest.approx(nll_loss(torch.as_tensor(pred), torch.as_tensor(target)).item(), abs=1e-12)


def test_nll_rejects_nan():
    pred = torch.full((2, 2, 2), 0.5)
    pred[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        nll_loss(pred, torch.zeros(2, 2))


@pytest.fixture(scope="module")
def three_target_seq():
    return generate_synthetic(SyntheticSpec(canvas=(64, 64), num_targets=3, size=10, length=6,
                                            translation=(0, 0), seed=11))


def test_clip_full_length_starts_at_zero(three_target_seq):
    clip = sample_clip([three_target_seq], 6, np.random.default_rng(0))
    assert clip.start == 0 and clip.frames.shape == (6, 64, 64, 3)
    assert set(np.unique(clip.masks)) <= {0, 1}


def test_clip_sampling_reproducible(three_target_seq):
    a = sample_clip([three_target_seq], 3, np.random.default_rng(42))
    b = sample_clip([three_target_seq], 3, np.random.default_rng(42))
    assert (a.start, a.target) == (b.start, b.target)
    assert np.array_equal(a.frames, three_target_seq.frames[a.start:a.start + 3])
    assert np.array_equal(a.masks, three_target_seq.masks[a.start:a.start + 3] == a.target)


def test_target_choice_uniform(three_target_seq):
    rng = np.random.default_rng(0)
    counts = np.zeros(3)
    for _ in range(10_000):
        counts[sample_clip([three_target_seq], 2, rng).target - 1] += 1
    np.testing.assert_allclose(counts / counts.sum(), 1 / 3, atol=0.02)


def test_clip_too_long(three_target_seq):
    with pytest.raises(DataError):
        sample_clip([three_target_seq], 7, np.random.default_rng(0))


def random_clip(seed=0, t=3, h=32, w=48):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, (t, h, w, 3), dtype=np.uint8)
    masks = np.zeros((t, h, w), np.int64)
    masks[:, 8:24, 12:36] = 1
    return frames, masks


def test_augment_identity_bitwise():
    frames, masks = random_clip()
    f2, m2 = augment_clip(frames, masks, AugmentParams())
    assert np.array_equal(f2, frames) and np.array_equal(m2, masks)


def test_hflip_involution():
    frames, masks = random_clip()
    p = AugmentParams(hflip=True)
    f2, m2 = augment_clip(*augment_clip(frames, masks, p), p)
    assert np.array_equal(f2, frames) and np.array_equal(m2, masks)


def test_scale_area_ratio():
    masks = np.zeros((1, 64, 64), np.int64)
    masks[0, 20:44, 20:44] = 1
    _, m2 = augment_clip(np.zeros((1, 64, 64, 3), np.uint8), masks, AugmentParams(scale=1.25))
    assert m2.sum() / masks.sum() == pytest.approx(1.5625, rel=0.05)


@pytest.mark.parametrize("kwargs", [dict(rotation_deg=31), dict(shear_deg=-30.5), dict(scale=0.7),
                                    dict(scale=1.3)])
def test_augment_params_validated(kwargs):
    with pytest.raises(ValueError):
        AugmentParams(**kwargs)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_same_transform_every_frame(seed):
    frames, masks = random_clip(seed, t=4)
    params = sample_augment_params(np.random.default_rng(seed))
    f_all, m_all = augment_clip(frames, masks, params)
    for i in range(4):
        f1, m1 = augment_clip(frames[i:i + 1], masks[i:i + 1], params)
        assert np.array_equal(f1[0], f_all[i]) and np.array_equal(m1[0], m_all[i])
    assert set(np.unique(m_all)) <= {0, 1}


def test_out_of_bounds_is_background():
    frames, masks = random_clip()
    masks[:] = 1
    _, m2 = augment_clip(frames, masks, AugmentParams(rotation_deg=30, scale=0.75))
    assert m2[:, 0, 0].max() == 0 and m2.min() == 0


def static_clip(t=4):
    rec = generate_synthetic(SyntheticSpec(canvas=(64, 64), size=20, translation=(0, 0), length=1, seed=3))
    return Clip(np.repeat(rec.frames, t, 0), np.repeat((rec.masks == 1).astype(np.int64), t, 0))


def test_unroll_counts_terms():
    model = CRVOS(ModelConfig())
    for t in (2, 4):
        frames, masks = clip_tensors(static_clip(t))
        assert len(unroll_clip(model, frames, masks)) == t - 1


def test_fresh_gradient_nonzero():
    model = CRVOS(ModelConfig())
    frames, masks = clip_tensors(Clip(*random_clip(h=64, w=64)))
    torch.stack(unroll_clip(model, frames, masks)).mean().backward()
    norm = sum(p.grad.norm() ** 2 for p in model.parameters()) ** 0.5
    assert norm > 0


@pytest.mark.parametrize("through", [False, True])
def test_clue_gradient_isolation(through):
    model = CRVOS(ModelConfig())
    frames, masks = clip_tensors(Clip(*random_clip(h=64, w=64)))
    frames.requires_grad_(True)
    losses = unroll_clip(model, frames, masks, backprop_through_clue=through)
    (grad,) = torch.autograd.grad(losses[-1], frames)
    assert (grad[:, 1].abs().sum() > 0) == through
    assert grad[:, 2].abs().sum() > 0


def test_overfit_static_clip():
    torch.manual_seed(0)
    model = CRVOS(ModelConfig(seed=0))
    history = overfit(model, static_clip(), 300, lr=1e-3)
    assert history[-1] < 0.05


def test_divergence_aborts():
    model = CRVOS(ModelConfig())
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    cfg = TrainConfig(stage="pretrain", clip_len=4, resolution=(64, 64), augment=False)
    opt = torch.optim.Adam(model.parameters())
    with pytest.raises(TrainingDiverged):
        train_clip(model, opt, static_clip(), cfg)


def desk_config(**kw):
    base = dict(clip_len=3, resolution=(64, 64), lr=1e-3, epochs=2, augment=False, seed=5,
                clips_per_epoch=4)
    base.update(kw)
    return TrainConfig.for_stage(base.pop("stage", "pretrain"), **base)


@pytest.fixture(scope="module")
def desk_data():
    return synthetic_dataset(SyntheticSpec(canvas=(64, 64), num_targets=2, size=14, length=6), 3)


def test_epochs_zero_keeps_init(tmp_path, desk_data):
    model = CRVOS(ModelConfig(seed=2))
    init = {k: v.clone() for k, v in model.state_dict().items()}
    res = run_stage(model, desk_data, desk_config(epochs=0), out_dir=tmp_path)
    saved = read_checkpoint(res.checkpoint)["state_dict"]
    assert all(torch.equal(saved[k], init[k]) for k in init)
    assert res.step == 0


def test_same_seed_same_curve(desk_data):
    curves = []
    for _ in range(2):
        model = CRVOS(ModelConfig(seed=2))
        curves.append(run_stage(model, desk_data, desk_config(augment=True, stage="finetune")).epoch_losses)
    assert curves[0] == curves[1]


def test_resume_matches_straight_run(tmp_path, desk_data):
    straight = CRVOS(ModelConfig(seed=2))
    full = run_stage(straight, desk_data, desk_config(epochs=4))
    part = CRVOS(ModelConfig(seed=2))
    first = run_stage(part, desk_data, desk_config(epochs=2), out_dir=tmp_path)
    resumed = CRVOS(ModelConfig(seed=2))
    rest = run_stage(resumed, desk_data, desk_config(epochs=4), resume=first.checkpoint)
    assert rest.epoch_losses == full.epoch_losses
    assert rest.step == full.step
    for k, v in straight.state_dict().items():
        assert torch.equal(resumed.state_dict()[k], v)


def test_training_log_records(tmp_path, desk_data):
    run_stage(CRVOS(ModelConfig()), desk_data, desk_config(epochs=1), out_dir=tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "train.log").read_text().splitlines()]
    steps = [l for l in lines if "step" in l]
    assert len(steps) == 4
    assert set(steps[0]) >= {"step", "stage", "loss", "lr", "wall_time"}
    assert lines[-1]["mean_loss"] == pytest.approx(np.mean([s["loss"] for s in steps]))


def test_empty_dataset():
    with pytest.raises(DataError):
        run_stage(CRVOS(ModelConfig()), [], desk_config())


def test_stage_defaults():
    pre, fine = TrainConfig.for_stage("pretrain"), TrainConfig.for_stage("finetune")
    assert (pre.clip_len, pre.resolution, pre.lr, pre.epochs, pre.augment) == (8, (240, 432), 1e-4, 100, False)
    assert (fine.clip_len, fine.resolution, fine.lr, fine.epochs, fine.augment) == (16, (480, 864), 1e-5, 500, True)


def test_desk_run_moving_average_decreases():
    data = synthetic_dataset(SyntheticSpec(canvas=(64, 64), num_targets=1, size=16, length=6, seed=100), 8)
    model = CRVOS(ModelConfig(seed=0))
    res = run_stage(model, data, desk_config(epochs=20, clips_per_epoch=16, clip_len=3, lr=1e-3))
    ma = np.convolve(res.epoch_losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0), ma
