"""Finite-difference gradient checks for every differentiable op and network path.

Each check builds a scalar ``sum(f(inputs) * G)`` with a fixed random
projection ``G`` and compares the tape's gradient with central differences in
64-bit arithmetic. A coordinate whose one-sided differences disagree lies
within a step of a kink (relu, abs, trilinear cell boundary) and is skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry, memory, networks, tensor as T, training, volume

STEP = 1e-6
TOLERANCE = 1e-3
ABS_FLOOR = 1e-6  # derivative magnitude below which round-off dominates
KINK_TOL = 1e-4
NOISE_FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_err: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE and self.checked > 0


def _scalar(fn, arrays: dict, proj: dict):
    out = fn({k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()})
    return float(np.sum(out.data * proj["G"]))


def check_function(fn: Callable[[dict], T.Tensor], arrays: dict[str, np.ndarray], rng: np.random.Generator,
                   max_coords: int = 12) -> tuple[float, int, int]:
    """Max relative error, coordinates checked, coordinates skipped near kinks."""
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with T.Tape() as tape:
        out = fn(leaves)
        proj = {"G": rng.standard_normal(out.shape)}
        loss = T.sum_all(T.mul(out, T.Tensor(proj["G"])))
    grads = T.backward(tape, loss)
    worst, checked, skipped = 0.0, 0, 0
    for name, arr in arrays.items():
        analytic = grads.get(leaves[name], np.zeros_like(arr))
        flat_idx = rng.choice(arr.size, size=min(max_coords, arr.size), replace=False)
        for flat in flat_idx:
            idx = np.unravel_index(flat, arr.shape)
            base = arr[idx]
            vals = []
            for delta in (STEP, -STEP):
                arr[idx] = base + delta
                vals.append(_scalar(fn, arrays, proj))
            arr[idx] = base
            f0 = _scalar(fn, arrays, proj)
            right, left = (vals[0] - f0) / STEP, (f0 - vals[1]) / STEP
            if abs(right - left) > KINK_TOL * max(abs(right), abs(left)) + NOISE_FLOOR:
                skipped += 1
                continue
            num = (vals[0] - vals[1]) / (2 * STEP)
            a = float(analytic[idx])
            checked += 1
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), ABS_FLOOR))
    return worst, checked, skipped


# ---------------------------------------------------------------------------
# registry: name -> builder(rng) -> (fn, arrays)

CHECKS: dict[str, Callable] = {}


def register(name):
    def deco(builder):
        CHECKS[name] = builder
        return builder
    return deco


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


@register("conv2d")
def _conv2d(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    arrays = {"x": rng.standard_normal((2, 3, 7, 7)), "w": rng.standard_normal((4, 3, 3, 3)),
              "b": rng.standard_normal(4)}
    return (lambda t: T.conv2d(t["x"], t["w"], t["b"], stride, pad)), arrays


@register("conv3d")
def _conv3d(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    arrays = {"x": rng.standard_normal((2, 5, 5, 4)), "w": rng.standard_normal((3, 2, 3, 3, 3)),
              "b": rng.standard_normal(3)}
    return (lambda t: T.conv3d(t["x"], t["w"], t["b"], stride, pad)), arrays


@register("linear")
def _linear(rng):
    arrays = {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((4, 5)), "b": rng.standard_normal(4)}
    return (lambda t: T.linear(t["x"], t["w"], t["b"])), arrays


@register("relu")
def _relu(rng):
    return (lambda t: T.relu(t["x"])), {"x": _away_from_zero(rng, (4, 6))}


@register("abs_sub_mean")
def _abs_sub(rng):
    a = rng.standard_normal((3, 5))
    b = a + _away_from_zero(rng, (3, 5))
    return (lambda t: T.mean_all(T.elementwise_abs(T.elementwise_sub(t["a"], t["b"])))), {"a": a, "b": b}


@register("sigmoid")
def _sigmoid(rng):
    return (lambda t: T.sigmoid(t["x"])), {"x": rng.standard_normal((3, 4))}


@register("reshape_concat")
def _reshape_concat(rng):
    arrays = {"a": rng.standard_normal((12, 2, 3)), "b": rng.standard_normal((6, 2, 3))}
    return (lambda t: T.reshape(T.concat([t["a"], t["b"]], axis=0), (3, 6, 6))), arrays


@register("channels_to_depth")
def _c2d(rng):
    return (lambda t: volume.channels_to_depth(t["x"], 3)), {"x": rng.standard_normal((6, 2, 3))}


@register("take_mean_axis")
def _take(rng):
    return (lambda t: T.mean_axis(T.take(t["x"], [2, 0, 2, 1]), 0)), {"x": rng.standard_normal((3, 4, 2))}


@register("resize_nearest")
def _resize(rng):
    return (lambda t: T.resize_nearest(t["x"], (7, 9))), {"x": rng.standard_normal((2, 3, 4))}


@register("exp_map")
def _exp_map(rng):
    return (lambda t: geometry.exp_map_op(t["p"])), {"p": rng.standard_normal((3, 6))}


@register("canonicalize")
def _canon(rng):
    p = rng.standard_normal((3, 6))
    p[:, :3] *= rng.uniform(0.5, 2.5, size=(3, 1)) * np.pi / np.linalg.norm(p[:, :3], axis=1, keepdims=True)
    return (lambda t: geometry.canonicalize_op(t["p"])), {"p": p}


def _smooth_volume(rng, shape):
    from scipy.ndimage import gaussian_filter
    v = rng.standard_normal(shape)
    return gaussian_filter(v, sigma=(0,) * (len(shape) - 3) + (1.0, 1.0, 1.0))


@register("warp_volume")
def _warp_volume(rng):
    pose = rng.standard_normal((2, 6)) * 0.3
    Rt = geometry.exp_map_op(T.Tensor(pose, dtype=np.float64)).data
    arrays = {"v": rng.standard_normal((2, 2, 4, 3, 5))}
    return (lambda t: volume.warp(t["v"], T.Tensor(Rt))), arrays


@register("warp_pose")
def _warp_pose(rng):
    arrays = {"v": _smooth_volume(rng, (2, 2, 5, 4, 4)), "p": rng.standard_normal((2, 6)) * 0.3}
    return (lambda t: volume.warp(t["v"], geometry.exp_map_op(t["p"]))), arrays


@register("fuse_mean")
def _fuse(rng):
    arrays = {f"v{i}": rng.standard_normal((2, 3, 2, 2)) for i in range(3)}
    return (lambda t: volume.fuse_mean([t["v0"], t["v1"], t["v2"]])), arrays


def _net_arrays(rng, cfg, nets):
    params = networks.init_params(cfg, int(rng.integers(2**31)), nets)
    arrays = {}
    for name, t in params.items():
        arr = t.data.astype(np.float64)
        if name.endswith(".b"):
            arr = rng.standard_normal(arr.shape) * 0.1
        arrays[name] = arr
    return arrays


def _store(t: dict) -> T.ParamStore:
    store = T.ParamStore()
    for k, v in t.items():
        store[k] = v
    return store


@register("enc3d")
def _enc3d(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("enc3d",))
    arrays["img"] = rng.uniform(0, 1, (2, cfg.image, cfg.image))
    return (lambda t: networks.enc3d_forward(_store(t), t["img"], cfg)), arrays


@register("encpose")
def _encpose(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("encpose",))
    arrays["encpose.fc.w"] *= 100  # undo the small init so the check is not dominated by round-off
    arrays["a"] = rng.uniform(0, 1, (2, cfg.image, cfg.image))
    arrays["b"] = rng.uniform(0, 1, (2, cfg.image, cfg.image))
    return (lambda t: networks.encpose_forward(_store(t), t["a"], t["b"], cfg)), arrays


@register("refine3d")
def _refine(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("refine",))
    arrays["v"] = rng.standard_normal((2, cfg.vol_channels, cfg.D, cfg.H, cfg.W))
    return (lambda t: networks.refine3d(_store(t), t["v"])), arrays


@register("decoder")
def _decoder(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("decoder",))
    arrays["v"] = rng.standard_normal((2, cfg.vol_channels, cfg.D, cfg.H, cfg.W))
    return (lambda t: networks.decoder_forward(_store(t), t["v"], cfg)), arrays


@register("policy")
def _policy(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("policy",))
    arrays["mem"] = rng.standard_normal((2, cfg.vol_channels, cfg.D, cfg.H, cfg.W))
    arrays["prop"] = rng.standard_normal((2, cfg.proprio_dim))
    return (lambda t: networks.policy_forward(_store(t), t["mem"], t["prop"], cfg)), arrays


@register("build_memory")
def _memory(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("enc3d", "encpose", "refine"))
    arrays["encpose.fc.w"] *= 30
    arrays["frames"] = rng.uniform(0, 1, (1, cfg.n, cfg.image, cfg.image))
    return (lambda t: memory.build_memory(_store(t), t["frames"], cfg)), arrays


@register("ssl_loss")
def _ssl(rng):
    cfg = networks.tiny_config()
    arrays = _net_arrays(rng, cfg, ("enc3d", "encpose", "decoder"))
    arrays["encpose.fc.w"] *= 30
    inputs = rng.uniform(0, 1, (1, cfg.n, cfg.image, cfg.image))
    targets = T.Tensor(rng.uniform(0, 1, inputs.shape))
    return (lambda t: training.ssl_loss(_store(t), T.Tensor(inputs), targets, cfg)), arrays


def run_check(name: str, seeds: int = 20, base_seed: int = 0, max_coords: int = 12) -> CheckResult:
    builder = CHECKS[name]
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s, sum(name.encode())])
        fn, arrays = builder(rng)
        w, c, k = check_function(fn, arrays, rng, max_coords)
        worst, checked, skipped = max(worst, w), checked + c, skipped + k
    return CheckResult(name, seeds, worst, checked, skipped, time.perf_counter() - t0)


def run_all(names=None, seeds: int = 20, base_seed: int = 0) -> list[CheckResult]:
    return [run_check(n, seeds, base_seed) for n in (names or list(CHECKS))]
