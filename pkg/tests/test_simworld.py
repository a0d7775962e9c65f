"""Procedural terrain, depth rendering, the walker and episode files."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvm.geometry import SE3Transform
from nvm.simworld.camera import (
    MAX_DEPTH,
    NOISE_PIXELS,
    Intrinsics,
    apply_depth_noise,
    read_pgm,
    render_depth,
    render_depth_metres,
    write_pgm,
)
from nvm.simworld.episodes import EpisodeRecord, collect_episode
from nvm.simworld.robot import (
    DENSE_SHAPE,
    H_TARGET,
    LATTICE,
    PRIVILEGED_DIM,
    PROPRIO_DIM,
    REWARD_WEIGHTS,
    SPARSE_SHAPE,
    V_TARGET,
    EnvParams,
    camera_world,
    decode_action,
    encode_command,
    energy_reward,
    forward_reward,
    height_reward,
    initial_state,
    metrics,
    privileged_vector,
    proprio_vector,
    sample_elevation,
    step_walker,
    weighted_total,
)
from nvm.simworld.terrain import (
    KINDS,
    REAL_STAIR_HEIGHTS,
    VOID_HEIGHT,
    Heightfield,
    gen_terrain,
    load_terrain,
    save_terrain,
)
from nvm.training import teacher_oracle


@pytest.fixture(scope="module")
def flat():
    return gen_terrain("flat")


class TestTerrain:
    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, kind):
        a, b = gen_terrain(kind, seed=5), gen_terrain(kind, seed=5)
        np.testing.assert_array_equal(a.heights, b.heights)
        assert a.meta == b.meta
        if kind != "flat":
            assert not np.array_equal(a.heights, gen_terrain(kind, seed=6).heights)

    def test_flat_is_zero(self, flat):
        assert not flat.heights.any()

    def test_stones_have_voids_and_start_pad(self):
        hf = gen_terrain("stones", seed=1)
        assert (hf.heights == VOID_HEIGHT).any()
        assert hf.height_at([0.0, 0.0]) == 0.0

    def test_real_stair_preset(self):
        hf = gen_terrain("stairs", seed=2, preset="real")
        assert {abs(r) for r in hf.meta["risers"]} <= set(REAL_STAIR_HEIGHTS)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            gen_terrain("lava")
        with pytest.raises(ValueError):
            gen_terrain("flat", difficulty=1.5)
        with pytest.raises(ValueError):
            Heightfield(np.full((2, 2), np.nan))

    @pytest.mark.parametrize("kind", ["stairs", "obstacles"])
    def test_file_roundtrip(self, tmp_path, kind):
        hf = gen_terrain(kind, seed=3)
        save_terrain(hf, tmp_path / "t.nvmt")
        back = load_terrain(tmp_path / "t.nvmt")
        np.testing.assert_array_equal(back.heights, hf.heights)
        assert back.cell == hf.cell and back.origin == hf.origin

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError):
            load_terrain(tmp_path / "x")

    @given(st.integers(-50, 50), st.integers(-50, 50))
    def test_shift_moves_surface(self, cx, cy):
        hf = gen_terrain("stairs", seed=0)
        moved = hf.shifted((cx, cy))
        pts = np.array([[0.3, 0.1], [2.7, -0.4], [5.1, 0.9]])
        np.testing.assert_array_equal(moved.height_at(pts + [cx * hf.cell, cy * hf.cell]), hf.height_at(pts))

    def test_outside_is_void(self, flat):
        assert flat.height_at([100.0, 0.0]) == VOID_HEIGHT


class TestRendering:
    def test_flat_plane_matches_ray_plane_oracle(self, flat):
        cam = camera_world(initial_state(flat), flat)
        depth = render_depth_metres(flat, cam)
        rays = Intrinsics().rays()
        dz = rays @ cam.R[2]  # world z component of each (unit-x) ray
        s = np.where(dz < 0, -cam.t[2] / np.where(dz < 0, dz, -1.0), np.inf)
        hit = cam.t[:2] + s[..., None] * (rays @ cam.R[:2].T)
        on_field = flat.height_at(np.where(np.isfinite(hit), hit, 1e6)) != VOID_HEIGHT
        expect = np.where(on_field, np.minimum(s, MAX_DEPTH), MAX_DEPTH)
        np.testing.assert_allclose(depth, expect, atol=1e-5)
        assert (depth < MAX_DEPTH).any() and (depth == MAX_DEPTH).any()

    def test_normalised_range(self, flat):
        img = render_depth(flat, camera_world(initial_state(flat), flat)).values
        assert img.dtype == np.float32 and img.shape == (64, 64)
        assert img.min() >= 0 and img.max() == 1.0

    def test_camera_below_ground_rejected(self, flat):
        with pytest.raises(ValueError):
            render_depth_metres(flat, SE3Transform(np.eye(3), np.array([0.0, 0.0, -0.1])))

    def test_noise_sets_exactly_forty_pixels(self, rng):
        img = rng.uniform(0, 0.9, (64, 64)).astype(np.float32)
        noisy = apply_depth_noise(img, seed=11)
        assert NOISE_PIXELS == 40
        assert np.count_nonzero(noisy != img) == 40
        assert np.all(noisy[noisy != img] == 1.0)
        np.testing.assert_array_equal(noisy, apply_depth_noise(img, seed=11))
        np.testing.assert_array_equal(apply_depth_noise(img, seed=11, enabled=False), img)

    def test_pgm_roundtrip(self, tmp_path, rng):
        img = rng.uniform(0, 1, (64, 48))
        write_pgm(img, tmp_path / "a.pgm")
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img, atol=0.5 / 65535 + 1e-12)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n48 64\n65535\n")


class TestRobot:
    def test_observation_dimensions(self, flat):
        state = initial_state(flat)
        assert proprio_vector(state).shape == (PROPRIO_DIM,) == (63,)
        assert privileged_vector(state, EnvParams()).shape == (PRIVILEGED_DIM,) == (14,)
        elev = sample_elevation(flat, state)
        assert elev.dense.shape == DENSE_SHAPE == (21, 26)
        assert elev.sparse.shape == SPARSE_SHAPE == (10, 19)
        np.testing.assert_allclose(elev.dense, -H_TARGET, atol=LATTICE)

    def test_command_roundtrip(self):
        np.testing.assert_allclose(decode_action(encode_command(0.4, -0.3, 0.05)), [0.4, -0.3, 0.05], atol=1e-12)
        np.testing.assert_allclose(decode_action(encode_command(5.0, 9.0, 1.0)), [0.8, 1.5, 0.2])

    def test_walks_forward_on_flat(self, flat):
        state = initial_state(flat)
        a = encode_command(V_TARGET, 0.0, 0.05)
        for _ in range(10):
            state = step_walker(state, a, flat)
        assert not state.fallen
        assert state.course_x(flat) == pytest.approx(10 * V_TARGET * 0.1, abs=1e-4)
        assert state.pos[2] - state.support == pytest.approx(H_TARGET, abs=1e-3)
        np.testing.assert_array_equal(state.pos, np.round(state.pos / LATTICE) * LATTICE)

    def test_gap_is_a_fall_and_absorbing(self):
        h = np.zeros((336, 96))
        h[40:80] = VOID_HEIGHT  # 1.25 m gap starting 0.25 m ahead of the start
        hf = Heightfield(h, kind="stages")
        state = initial_state(hf)
        a = encode_command(V_TARGET, 0.0, 0.1)
        for _ in range(30):
            state = step_walker(state, a, hf)
        assert state.fallen and state.fall_reason == "gap"
        frozen = step_walker(state, a, hf)
        np.testing.assert_array_equal(frozen.pos, state.pos)

    def test_wall_is_a_collision(self):
        h = np.zeros((336, 96))
        h[45:] = 0.6
        hf = Heightfield(h, kind="obstacles")
        state = initial_state(hf)
        for _ in range(20):
            state = step_walker(state, encode_command(V_TARGET, 0.0, 0.2), hf)
        assert state.fallen and state.fall_reason in ("collision", "trip")


class TestRewards:
    def test_terms_at_targets(self):
        assert forward_reward(0.4) == 1.0
        assert forward_reward(0.4, corrected=True) == 1.0
        assert energy_reward(np.zeros(12), np.ones(12)) == 0.0
        assert height_reward(0.265) == 0.0

    def test_forward_printed_and_corrected(self):
        assert forward_reward(0.2) == pytest.approx(1.5)
        assert forward_reward(0.2, corrected=True) == pytest.approx(0.5)

    def test_energy_and_height_oracles(self, rng):
        tau, qd = rng.standard_normal(12), rng.standard_normal(12)
        assert energy_reward(tau, qd) == pytest.approx(sum(abs(a * b) for a, b in zip(tau, qd)))
        assert height_reward(0.3) == pytest.approx(0.035)

    def test_weighted_total(self):
        assert REWARD_WEIGHTS == (1.0, -0.005, -2.0)
        assert weighted_total(1.0, 10.0, 0.1) == pytest.approx(1.0 - 0.05 - 0.2)


class TestMetrics:
    def test_partial_progress(self):
        assert metrics(np.array([0.0, 2.0, 4.0]), fell=True) == (0.5, False)

    def test_success(self):
        assert metrics(np.array([0.0, 5.0, 8.1]), fell=False) == (1.0, True)

    def test_reaching_goal_then_falling(self):
        assert metrics(np.array([0.0, 8.0, 7.9]), fell=True) == (1.0, False)

    def test_backwards_and_empty(self):
        assert metrics(np.array([0.0, -1.0]), fell=False) == (0.0, False)
        assert metrics(np.array([]), fell=False) == (0.0, False)


class TestEpisodes:
    @pytest.fixture(scope="class")
    @classmethod
    def episode(cls):
        return collect_episode(gen_terrain("stairs", seed=4), teacher_oracle, seed=9, steps=12)

    def test_streams(self, episode):
        assert len(episode) == 12
        assert episode.depth.shape == (12, 64, 64)
        np.testing.assert_allclose(np.diff(episode.timestamp), 0.1, atol=1e-6)
        assert not np.array_equal(episode.action, episode.teacher_action)

    def test_deterministic(self, episode):
        again = collect_episode(gen_terrain("stairs", seed=4), teacher_oracle, seed=9, steps=12)
        for name, arr in episode.streams.items():
            np.testing.assert_array_equal(arr, again.streams[name])

    def test_write_read_roundtrip(self, episode, tmp_path):
        episode.write(tmp_path / "ep")
        back = EpisodeRecord.read(tmp_path / "ep")
        assert back.meta == episode.meta
        for name, arr in episode.streams.items():
            np.testing.assert_array_equal(back.streams[name], arr)
        np.testing.assert_array_equal(back.observation(3).depth, episode.noisy_depth(3))

    def test_noisy_view(self, episode):
        noisy = episode.noisy_depth()
        assert noisy.shape == episode.depth.shape
        assert np.all(np.count_nonzero(noisy != episode.depth, axis=(1, 2)) <= 40)

    def test_camera_poses_roundtrip(self, episode):
        cams = episode.camera_poses([0, 5])
        assert cams[0].t[0] == pytest.approx(0.25, abs=0.05)
        np.testing.assert_allclose(cams[0].R @ cams[0].R.T, np.eye(3), atol=1e-6)

    def test_check_rejects_bad_streams(self, episode):
        streams = dict(episode.streams)
        streams["proprio"] = streams["proprio"][:, :10]
        with pytest.raises(ValueError):
            EpisodeRecord(streams, episode.meta).check()

    def test_teacher_progress_metric(self, episode):
        rate, success = episode.metrics()
        expect = (episode.meta["final_x"]) / 8.0
        assert rate == pytest.approx(expect, rel=1e-6) and not success
        assert 0.3 < episode.meta["final_x"] < 12 * 0.06
