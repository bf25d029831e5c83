"""Tests for the generator and PatchGAN critic architectures."""

import numpy as np
import pytest
import torch

from regseg.losses import bending_energy, ncc
from regseg.nets import (CriticMode, assemble_critic_input, build_critic, build_generator,
                         clip_parameters)
from regseg.warpfield import warp_tensor


class TestGenerator:
    def test_standard_size_arithmetic(self):
        gen = build_generator(96, depth=4, base_filters=16, margin=20)
        with torch.no_grad():
            out = gen(torch.zeros(1, 2, 96, 96, 96))
        assert tuple(out.shape) == (1, 3, 56, 56, 56)

    def test_identity_at_initialization(self):
        gen = build_generator(32, depth=3, base_filters=8, margin=4)
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.random((1, 2, 32, 32, 32)), dtype=torch.float32)
        with torch.no_grad():
            out = gen(x)
        assert float(out.abs().max()) == 0.0

    def test_size_validation(self):
        gen = build_generator(32, depth=3, base_filters=8, margin=4)
        with pytest.raises(ValueError, match="not divisible"):
            gen(torch.zeros(1, 2, 30, 30, 30))
        with pytest.raises(ValueError, match="margin"):
            build_generator(16, depth=3, base_filters=8, margin=8)

    def test_margin_is_configurable(self):
        gen = build_generator(32, depth=3, base_filters=8, margin=2)
        with torch.no_grad():
            out = gen(torch.zeros(1, 2, 32, 32, 32))
        assert tuple(out.shape[2:]) == (28, 28, 28)

    def test_toy_training_decreases_loss(self):
        # 50 RMSProp steps on one fixed pair: the similarity trend must go down
        torch.manual_seed(0)
        rng = np.random.default_rng(1)
        gen = build_generator(16, depth=3, base_filters=8, margin=2)
        base = rng.random((20, 20, 20))
        from scipy.ndimage import gaussian_filter
        smooth = gaussian_filter(base, 2.0)
        fixed = torch.tensor(smooth[2:18, 2:18, 2:18], dtype=torch.float32)[None, None]
        moving = torch.tensor(smooth[1:17, 2:18, 2:18], dtype=torch.float32)[None, None]
        opt = torch.optim.RMSprop(gen.parameters(), lr=1e-3)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            dvf = gen(torch.cat([fixed, moving], dim=1))
            warped = warp_tensor(moving[0], dvf[0])
            target = fixed[0, :, 2:-2, 2:-2, 2:-2]
            loss = (1 - ncc(warped, target)) + bending_energy(dvf[0])
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        assert np.mean(losses[-10:]) < np.mean(losses[:10])


class TestCritic:
    def test_score_grid_shape(self):
        critic = build_critic(depth=4, base_filters=16, mode=CriticMode.CONCAT_CHANNEL)
        with torch.no_grad():
            s = critic(torch.zeros(1, 3, 96, 96, 96))
        assert tuple(s.shape) == (1, 1, 6, 6, 6)

    def test_extent_doubles_with_input(self):
        critic = build_critic(depth=4, base_filters=8)
        with torch.no_grad():
            s32 = critic(torch.zeros(1, 3, 32, 32, 32))
            s64 = critic(torch.zeros(1, 3, 64, 64, 64))
        assert tuple(s32.shape[2:]) == (2, 2, 2)
        assert tuple(s64.shape[2:]) == (4, 4, 4)

    def test_rank3_grid_not_scalar(self):
        critic = build_critic(depth=3, base_filters=8)
        with torch.no_grad():
            s = critic(torch.zeros(2, 3, 24, 24, 24))
        assert s.ndim == 5 and s.shape[1] == 1
        assert min(s.shape[2:]) > 1

    def test_mode_channel_validation(self):
        critic = build_critic(depth=2, base_filters=4, mode=CriticMode.MASK_MULTIPLY)
        with pytest.raises(ValueError, match="channels"):
            critic(torch.zeros(1, 3, 16, 16, 16))

    def test_translation_covariance_one_stride_step(self):
        # depth-2 critic: one score stride = 4 voxels, receptive field 15 voxels.
        # A blob with wide zero margins makes the two windows exact translates.
        torch.manual_seed(3)
        critic = build_critic(depth=2, base_filters=8)
        field = np.zeros((48, 32, 32), dtype=np.float32)
        blob = np.random.default_rng(4).random((8, 8, 8)).astype(np.float32)
        field[14:22, 12:20, 12:20] = blob
        w1 = torch.from_numpy(field[0:32])
        w2 = torch.from_numpy(field[4:36])
        x1 = torch.stack([w1, w1, w1])[None]
        x2 = torch.stack([w2, w2, w2])[None]
        with torch.no_grad():
            s1 = critic(x1).numpy()[0, 0]
            s2 = critic(x2).numpy()[0, 0]
        # shifting input by +4 along x shifts scores by one cell; compare
        # interior cells (2+ cells from every border, where padding cannot leak)
        inner = s2[2:5, 2:6, 2:6]
        shifted = s1[3:6, 2:6, 2:6]
        assert np.abs(blob).max() > 0.5  # blob cells participate in the window
        assert np.abs(inner - shifted).max() < 1e-4


class TestAssembleCriticInput:
    def test_concat_with_unit_mask(self):
        rng = np.random.default_rng(5)
        f, o = rng.random((4, 4, 4)), rng.random((4, 4, 4))
        s = np.ones((4, 4, 4))
        stack = assemble_critic_input(f, o, s, CriticMode.CONCAT_CHANNEL).numpy()
        assert stack.shape == (3, 4, 4, 4)
        assert np.allclose(stack[0], f)
        assert np.allclose(stack[1], o)
        assert np.allclose(stack[2], 1.0)

    def test_mask_multiply_zero_mask(self):
        rng = np.random.default_rng(6)
        f, o = rng.random((4, 4, 4)), rng.random((4, 4, 4))
        stack = assemble_critic_input(f, o, np.zeros((4, 4, 4)), "mask_multiply").numpy()
        assert stack.shape == (2, 4, 4, 4)
        assert np.all(stack == 0)

    def test_mask_multiply_half_space(self):
        rng = np.random.default_rng(7)
        f, o = rng.random((4, 4, 4)), rng.random((4, 4, 4))
        s = np.zeros((4, 4, 4))
        s[2:] = 1.0
        stack = assemble_critic_input(f, o, s, CriticMode.MASK_MULTIPLY).numpy()
        assert np.all(stack[:, :2] == 0)
        assert np.allclose(stack[0, 2:], f[2:])
        assert np.allclose(stack[1, 2:], o[2:])

    def test_batched_form(self):
        t = torch.zeros(2, 1, 4, 4, 4)
        stack = assemble_critic_input(t, t, t, CriticMode.CONCAT_CHANNEL)
        assert tuple(stack.shape) == (2, 3, 4, 4, 4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            assemble_critic_input(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)),
                                  np.zeros((4, 4, 5)), CriticMode.CONCAT_CHANNEL)


class TestClipParameters:
    def test_clamps_out_of_range(self):
        lin = torch.nn.Linear(3, 1, bias=False)
        with torch.no_grad():
            lin.weight.copy_(torch.tensor([[-0.5, 0.005, 2.0]]))
        clip_parameters(lin, 0.01)
        assert torch.allclose(lin.weight, torch.tensor([[-0.01, 0.005, 0.01]]))

    def test_idempotent(self):
        critic = build_critic(depth=2, base_filters=4)
        clip_parameters(critic, 0.01)
        before = [p.clone() for p in critic.parameters()]
        clip_parameters(critic, 0.01)
        for b, p in zip(before, critic.parameters()):
            assert torch.equal(b, p)

    def test_bound_holds_for_all_params(self):
        critic = build_critic(depth=3, base_filters=8)
        clip_parameters(critic, 0.01)
        assert max(float(p.detach().abs().max()) for p in critic.parameters()) <= 0.01

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            clip_parameters(build_critic(depth=2, base_filters=4), 0.0)
