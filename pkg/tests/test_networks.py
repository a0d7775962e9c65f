"""Network shapes, initialisation and configuration rules."""

import numpy as np
import pytest

from nvm.networks import (
    NETWORKS,
    NetConfig,
    baseline_framestack_forward,
    decoder_forward,
    enc3d_forward,
    encpose_forward,
    init_params,
    param_report,
    policy_forward,
    refine3d,
    teacher_mlp_forward,
    tiny_config,
)
from nvm.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def cfg():
    return NetConfig()


@pytest.fixture(scope="module")
def params(cfg):
    return init_params(cfg, seed=0, nets=NETWORKS + ("teacher", "baseline"))


class TestShapes:
    def test_enc3d(self, cfg, params, rng):
        depth = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
        assert enc3d_forward(params, depth, cfg).shape == (3, 8, 12, 6, 6)
        assert enc3d_forward(params, Tensor(depth.data[0]), cfg).shape == (8, 12, 6, 6)

    def test_encpose(self, cfg, params, rng):
        a = Tensor(rng.uniform(0, 1, (2, 64, 64)).astype(np.float32))
        out = encpose_forward(params, a, a, cfg)
        assert out.shape == (2, 6)
        assert np.all(np.linalg.norm(out.data[:, :3], axis=1) <= np.pi + 1e-6)

    def test_decoder_range(self, cfg, params, rng):
        v = Tensor(rng.standard_normal((2, 8, 12, 6, 6)).astype(np.float32))
        out = decoder_forward(params, v, cfg).data
        assert out.shape == (2, 64, 64)
        assert out.min() > 0 and out.max() < 1

    def test_refine_preserves_shape(self, params, rng):
        v = Tensor(rng.standard_normal((8, 12, 6, 6)).astype(np.float32))
        assert refine3d(params, v).shape == v.shape

    def test_policy(self, cfg, params, rng):
        mem = Tensor(rng.standard_normal((4, 8, 12, 6, 6)).astype(np.float32))
        prop = Tensor(rng.standard_normal((4, 63)).astype(np.float32))
        assert policy_forward(params, mem, prop, cfg).shape == (4, 12)
        with pytest.raises(ShapeError):
            policy_forward(params, mem, Tensor(np.zeros((4, 62), np.float32)), cfg)

    def test_baseline(self, cfg, params, rng):
        frames = Tensor(rng.uniform(0, 1, (2, 5, 64, 64)).astype(np.float32))
        prop = Tensor(np.zeros((2, 63), np.float32))
        assert baseline_framestack_forward(params, frames, prop, cfg).shape == (2, 12)

    def test_teacher_mlp_input_width(self, cfg, params):
        # 63 proprio + 14 privileged + 21*26 dense + 10*19 sparse
        assert cfg.teacher_input == 63 + 14 + 546 + 190 == 813
        out = teacher_mlp_forward(params, Tensor(np.zeros(813, np.float32)), cfg)
        assert out.shape == (12,)
        with pytest.raises(ShapeError):
            teacher_mlp_forward(params, Tensor(np.zeros(714, np.float32)), cfg)

    def test_wrong_image_size(self, cfg, params):
        with pytest.raises(ShapeError):
            enc3d_forward(params, Tensor(np.zeros((2, 32, 32), np.float32)), cfg)


class TestInit:
    def test_deterministic(self, cfg):
        a, b = init_params(cfg, 3), init_params(cfg, 3)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_networks_independent(self, cfg):
        alone = init_params(cfg, 3, ("decoder",))
        full = init_params(cfg, 3)
        for name in alone:
            np.testing.assert_array_equal(alone[name].data, full[name].data)

    def test_biases_zero_weights_bounded(self, cfg):
        p = init_params(cfg, 0)
        for name, t in p.items():
            if name.endswith(".b"):
                assert not t.data.any()
        w = p["enc3d.conv1.w"].data
        assert np.abs(w).max() <= np.sqrt(6 / (16 * 9))

    def test_param_report_groups(self, params):
        report = param_report(params)
        assert set(report) == {"enc3d", "encpose", "refine", "decoder", "policy", "teacher", "baseline"}
        assert sum(report.values()) == sum(t.size for _, t in params.items())

    def test_unknown_network(self, cfg):
        with pytest.raises(KeyError):
            init_params(cfg, 0, ("nope",))


class TestConfig:
    @pytest.mark.parametrize("D,H,n", [(3, 6, 5), (6, 6, 5), (12, 4, 5), (12, 8, 5), (12, 6, 3), (12, 6, 9)])
    def test_ablation_rows_build(self, D, H, n, rng):
        cfg = NetConfig(D=D, H=H, W=H, n=n)
        assert cfg.in_ablation_grid
        p = init_params(cfg, 0, ("enc3d", "decoder"))
        v = enc3d_forward(p, Tensor(rng.uniform(0, 1, (64, 64)).astype(np.float32)), cfg)
        assert v.shape == (8, D, H, H)
        assert decoder_forward(p, v, cfg).shape == (64, 64)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(H=6, W=4)

    def test_unreachable_grid_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(H=5, W=5)

    def test_tiny_config(self):
        cfg = tiny_config()
        assert cfg.trunk_size == 8 and cfg.H == 4
        assert not NetConfig(D=4).in_ablation_grid
