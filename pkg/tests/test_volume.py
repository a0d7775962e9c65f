"""Volume warp, grid mapping and layout helpers."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvm.geometry import Pose6D, SE3Transform, exp_map, rodrigues
from nvm.tensor import ShapeError, Tensor
from nvm.volume import (
    CAMERA_TO_VOLUME,
    GridSpec,
    channels_to_depth,
    depth_to_channels,
    fuse_mean,
    load_volume,
    save_volume,
    warp,
)

from oracles import band_limited, pitch, shift_oracle, two_step_mask

DIMS = (12, 6, 6)


class TestWarpExactness:
    def test_identity_bitwise(self, rng):
        for _ in range(50):
            vol = rng.standard_normal((3,) + DIMS).astype(np.float32)
            out = warp(Tensor(vol), SE3Transform.identity()).data
            np.testing.assert_array_equal(out, vol)

    def test_integer_shift_matches_index_oracle(self, rng):
        p = pitch(DIMS)
        for _ in range(50):
            vol = rng.standard_normal((2,) + DIMS)
            k = rng.integers(-3, 4, size=3)
            T = SE3Transform(np.eye(3), k * p)
            out = warp(Tensor(vol), T).data
            np.testing.assert_allclose(out, shift_oracle(vol, k), atol=1e-12)

    def test_quarter_turn_permutes_voxels(self, rng):
        # rotation by +90 deg about the depth axis: out(d, h, w) = in(d, w, -h)
        vol = rng.standard_normal((2, 5, 6, 6))
        R = rodrigues(np.array([math.pi / 2, 0.0, 0.0]))
        out = warp(Tensor(vol), SE3Transform(R, np.zeros(3))).data
        expect = np.empty_like(vol)
        for i in range(6):
            for j in range(6):
                expect[:, :, i, j] = vol[:, :, j, 5 - i]
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_half_voxel_shift_averages_neighbours(self, rng):
        vol = rng.standard_normal((1,) + DIMS)
        T = SE3Transform(np.eye(3), np.array([0.5 * pitch(DIMS)[0], 0.0, 0.0]))
        out = warp(Tensor(vol), T).data
        np.testing.assert_allclose(out[:, 1:], 0.5 * (vol[:, 1:] + vol[:, :-1]), atol=1e-12)
        np.testing.assert_allclose(out[:, 0], 0.5 * vol[:, 0], atol=1e-12)

    def test_far_translation_gives_zeros(self, rng):
        vol = rng.standard_normal((1,) + DIMS)
        out = warp(Tensor(vol), SE3Transform(np.eye(3), np.array([5.0, 0, 0]))).data
        assert not out.any()

    def test_batched_matches_single(self, rng):
        vols = rng.standard_normal((3, 2) + DIMS)
        Ts = [exp_map(Pose6D(rng.normal(0, 0.2, 3), rng.normal(0, 0.3, 3))) for _ in range(3)]
        batched = warp(Tensor(vols), Ts).data
        for v, T, b in zip(vols, Ts, batched):
            np.testing.assert_allclose(warp(Tensor(v), T).data, b, atol=1e-12)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeError):
            warp(Tensor(np.zeros((2, 1, 4, 4))), SE3Transform.identity())
        with pytest.raises(ShapeError):
            warp(Tensor(np.zeros((2, 3, 4, 4, 4))), Tensor(np.zeros((3, 4))))


class TestComposition:
    def test_band_limited_equivariance(self, rng):
        worst = 0.0
        for _ in range(20):
            vol = band_limited(rng, 2, DIMS)
            A = exp_map(Pose6D(rng.normal(0, 0.15, 3), rng.normal(0, 0.15, 3)))
            B = exp_map(Pose6D(rng.normal(0, 0.15, 3), rng.normal(0, 0.15, 3)))
            two = warp(warp(Tensor(vol), A), B).data
            one = warp(Tensor(vol), B.compose(A)).data
            mask = two_step_mask(A, B, DIMS)
            worst = max(worst, np.abs(two - one)[:, mask].max() / np.abs(one).max())
        assert worst < 0.15

    @given(st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2))
    def test_integer_shifts_compose_like_index_shifts(self, a, b, c, d):
        vol = np.arange(np.prod(DIMS), dtype=np.float64).reshape((1,) + DIMS)
        p = pitch(DIMS)
        A = SE3Transform(np.eye(3), np.array([a, b, 0]) * p)
        B = SE3Transform(np.eye(3), np.array([c, 0, d]) * p)
        two = warp(warp(Tensor(vol), A), B).data
        np.testing.assert_allclose(two, shift_oracle(shift_oracle(vol, (a, b, 0)), (c, 0, d)), atol=1e-9)


class TestGridSpec:
    def test_from_camera_matches_homogeneous_oracle(self, rng):
        grid = GridSpec(DIMS, scale=0.5, center_forward=0.5)
        P, c, s = CAMERA_TO_VOLUME, np.array([0.5, 0.0, 0.0]), 0.5
        G = np.eye(4)
        G[:3, :3], G[:3, 3] = P / s, -P @ c / s
        for _ in range(10):
            T = exp_map(Pose6D(rng.normal(0, 0.5, 3), rng.normal(0, 0.5, 3)))
            expect = G @ T.matrix() @ np.linalg.inv(G)
            np.testing.assert_allclose(grid.from_camera(T).matrix(), expect, atol=1e-12)

    def test_camera_axes_to_volume_axes(self):
        # camera x forward, y left, z up -> volume (forward, down, right)
        np.testing.assert_array_equal(CAMERA_TO_VOLUME @ [1, 0, 0], [1, 0, 0])
        np.testing.assert_array_equal(CAMERA_TO_VOLUME @ [0, 0, 1], [0, -1, 0])
        np.testing.assert_array_equal(CAMERA_TO_VOLUME @ [0, 1, 0], [0, 0, -1])

    def test_identity_maps_to_identity(self):
        T = GridSpec().from_camera(SE3Transform.identity())
        np.testing.assert_array_equal(T.matrix(), np.eye(4))

    def test_index_norm_roundtrip(self):
        grid = GridSpec(DIMS)
        idx = np.array([[0, 0, 0], [11, 5, 5], [3, 2, 4]])
        np.testing.assert_allclose(grid.norm_to_index(grid.index_to_norm(idx)), idx)
        np.testing.assert_allclose(grid.index_to_norm([[0, 0, 0], [11, 5, 5]]), [[-1, -1, -1], [1, 1, 1]])


class TestLayout:
    def test_channels_depth_roundtrip(self, rng):
        fmap = rng.standard_normal((2, 24, 6, 6))
        vol = channels_to_depth(Tensor(fmap), 12)
        assert vol.shape == (2, 2, 12, 6, 6)
        np.testing.assert_array_equal(vol.data[1, 1, 3], fmap[1, 1 * 12 + 3])
        np.testing.assert_array_equal(depth_to_channels(vol).data, fmap)

    def test_channels_not_divisible(self):
        with pytest.raises(ShapeError):
            channels_to_depth(Tensor(np.zeros((10, 4, 4))), 3)

    def test_fuse_mean(self, rng):
        vols = [rng.standard_normal((2, 3, 4, 4)) for _ in range(4)]
        np.testing.assert_allclose(fuse_mean([Tensor(v) for v in vols]).data, np.mean(vols, axis=0))
        with pytest.raises(ShapeError):
            fuse_mean([Tensor(vols[0]), Tensor(np.zeros((1, 3, 4, 4)))])

    def test_volume_file_roundtrip(self, tmp_path, rng):
        vol = rng.standard_normal((8,) + DIMS).astype(np.float32)
        save_volume(vol, tmp_path / "v.nvmv")
        np.testing.assert_array_equal(load_volume(tmp_path / "v.nvmv"), vol)
