"""Memory assembly from a window of frames."""

import numpy as np
import pytest

from nvm.geometry import Pose6D, SE3Transform, exp_map
from nvm.memory import build_memory, ground_truth_transforms, learned_poses, memory_to_policy_input
from nvm.networks import NetConfig, enc3d_forward, encpose_forward, init_params, refine3d
from nvm.tensor import ShapeError, Tensor
from nvm.volume import GridSpec


@pytest.fixture(scope="module")
def cfg():
    return NetConfig()


@pytest.fixture(scope="module")
def params(cfg):
    return init_params(cfg, seed=1)


@pytest.fixture
def frames(rng):
    return rng.uniform(0, 1, (5, 64, 64)).astype(np.float32)


def shift_depth(vol, k):
    """Shift along the depth axis by k voxels with zero fill (index oracle)."""
    out = np.zeros_like(vol)
    d = vol.shape[-3]
    if k >= 0:
        out[..., k:, :, :] = vol[..., : d - k, :, :]
    else:
        out[..., : d + k, :, :] = vol[..., -k:, :, :]
    return out


class TestBuildMemory:
    def test_shapes(self, cfg, params, frames):
        mem = build_memory(params, Tensor(frames), cfg, "identity")
        assert mem.shape == (8, 12, 6, 6)
        batched = build_memory(params, Tensor(np.stack([frames, frames])), cfg, "identity")
        assert batched.shape == (2, 8, 12, 6, 6)
        np.testing.assert_allclose(batched.data[0], mem.data, atol=1e-6)
        assert memory_to_policy_input(mem).shape == (96, 6, 6)

    def test_identity_source_is_mean_of_refined_volumes(self, cfg, params, frames):
        vols = enc3d_forward(params, Tensor(frames), cfg)
        expect = refine3d(params, vols).data.mean(axis=0)
        got = build_memory(params, Tensor(frames), cfg, "identity").data
        np.testing.assert_allclose(got, expect, rtol=1e-5, atol=1e-6)

    def test_forward_motion_shifts_by_whole_voxels(self, cfg, params, frames):
        # camera i sits k_i voxels (1/11 m each at scale 0.5) behind the present camera
        grid = GridSpec((12, 6, 6))
        ks = [4, 3, 2, 1, 0]
        poses = [SE3Transform(np.eye(3), np.array([-k / 11.0, 0.0, 0.0])) for k in ks]
        got = build_memory(params, Tensor(frames), cfg, "ground_truth", poses, grid, refine=False).data
        vols = enc3d_forward(params, Tensor(frames), cfg).data
        expect = np.mean([shift_depth(v, -k) for v, k in zip(vols, ks)], axis=0)
        np.testing.assert_allclose(got, expect, atol=2e-6)

    def test_static_camera_matches_identity(self, cfg, params, frames, rng):
        cam = exp_map(Pose6D(rng.normal(0, 0.3, 3), rng.normal(0, 1, 3)))
        gt = build_memory(params, Tensor(frames), cfg, "ground_truth", [cam] * 5).data
        ident = build_memory(params, Tensor(frames), cfg, "identity").data
        np.testing.assert_allclose(gt, ident, atol=1e-5)

    def test_unrefined_memory_is_linear_in_volumes(self, cfg, params, frames):
        # refine=False leaves a mean of warps: scaling the window's encoder output scales the memory
        p2 = params.copy()
        for name in ("enc3d.c3d1.w", "enc3d.c3d1.b"):
            p2[name] = Tensor(params[name].data * 2, requires_grad=True)
        a = build_memory(params, Tensor(frames), cfg, "learned", refine=False).data
        b = build_memory(p2, Tensor(frames), cfg, "learned", refine=False).data
        np.testing.assert_allclose(b, 2 * a, rtol=1e-5, atol=1e-6)

    def test_errors(self, cfg, params, frames):
        with pytest.raises(ShapeError):
            build_memory(params, Tensor(frames[:4]), cfg)
        with pytest.raises(ValueError):
            build_memory(params, Tensor(frames), cfg, "magic")
        with pytest.raises(ValueError):
            build_memory(params, Tensor(frames), cfg, "ground_truth")


class TestPoses:
    def test_learned_present_slot_zero(self, cfg, params, frames):
        for present in (0, 2, 4):
            poses = learned_poses(params, Tensor(frames[None]), present, cfg).data
            assert poses.shape == (1, 5, 6)
            assert not poses[0, present].any()

    def test_learned_matches_pairwise_encoder(self, cfg, params, frames):
        poses = learned_poses(params, Tensor(frames[None]), 4, cfg).data[0]
        for i in range(4):
            direct = encpose_forward(params, Tensor(frames[i]), Tensor(frames[4]), cfg).data
            np.testing.assert_allclose(poses[i], direct, rtol=1e-5, atol=1e-7)

    def test_ground_truth_present_exact_identity(self, rng):
        cams = [exp_map(Pose6D(rng.normal(0, 0.3, 3), rng.normal(0, 1, 3))) for _ in range(5)]
        tf = ground_truth_transforms(cams, GridSpec(), present=2)
        np.testing.assert_array_equal(tf[2], np.eye(3, 4))
        assert tf.shape == (5, 3, 4)
