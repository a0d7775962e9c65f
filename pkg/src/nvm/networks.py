"""Parameterised networks: encoders, refinement, decoder, policy heads.

Every forward takes a :class:`ParamStore` plus inputs and returns Tensors on
the active tape. Inputs may carry a leading batch axis. Parameter names are
``<net>.<layer>.w`` / ``<net>.<layer>.b`` so each network can be selected by
prefix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import canonicalize_op
from .tensor import (
    ParamStore,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    conv3d,
    kaiming_uniform,
    linear,
    relu,
    reshape,
    resize_nearest,
    sigmoid,
)
from .volume import channels_to_depth, depth_to_channels

NETWORKS = ("enc3d", "encpose", "refine", "decoder", "policy")

SUPPORTED_DEPTH = (3, 6, 12)
SUPPORTED_HW = (4, 6, 8)
SUPPORTED_HISTORY = (3, 5, 9)


@dataclass
class NetConfig:
    D: int = 12
    H: int = 6
    W: int = 6
    n: int = 5
    image: int = 64
    action_dim: int = 12
    proprio_dim: int = 63
    privileged_dim: int = 14
    dense_shape: tuple[int, int] = (21, 26)
    sparse_shape: tuple[int, int] = (10, 19)
    enc_widths: tuple[int, ...] = (16, 32, 64)
    vol_channels: int = 8
    pose_width: int = 64
    dec_widths: tuple[int, ...] = (64, 32, 16, 8)
    policy_conv: int = 32
    policy_feat: int = 64
    policy_hidden: int = 128
    teacher_hidden: tuple[int, ...] = (256, 128, 128, 64)

    def __post_init__(self):
        for name in ("enc_widths", "dec_widths", "teacher_hidden", "dense_shape", "sparse_shape"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.H != self.W:
            raise ValueError(f"voxel grid must be square in H, W; got {self.H}x{self.W}")
        if self.trunk_size not in (self.H, self.H + 2, 2 * self.H):
            raise ValueError(
                f"2D trunk ends at {self.trunk_size}x{self.trunk_size}; cannot reach H={self.H}"
            )
        if self.image % (1 << (len(self.dec_widths) - 1)):
            raise ValueError("image size must be divisible by the decoder's upsampling factor")

    @property
    def trunk_size(self) -> int:
        return self.image >> len(self.enc_widths)

    @property
    def teacher_input(self) -> int:
        d, s = self.dense_shape, self.sparse_shape
        return self.proprio_dim + self.privileged_dim + d[0] * d[1] + s[0] * s[1]

    @property
    def in_ablation_grid(self) -> bool:
        return self.D in SUPPORTED_DEPTH and self.H in SUPPORTED_HW and self.n in SUPPORTED_HISTORY

    def to_dict(self) -> dict:
        return asdict(self)


def tiny_config(**overrides) -> NetConfig:
    """Small shapes for finite-difference checks."""
    base = dict(D=3, H=4, W=4, n=3, image=16, enc_widths=(4,), vol_channels=2, pose_width=4,
                dec_widths=(6, 4), policy_conv=4, policy_feat=6, policy_hidden=8, proprio_dim=5,
                action_dim=3, teacher_hidden=(8, 6))
    base.update(overrides)
    return NetConfig(**base)


# ---------------------------------------------------------------------------
# parameter construction


def _conv(store, rng, name, cin, cout, k=3, nd=2, gain=1.0):
    fan_in = cin * k**nd
    store.add(f"{name}.w", kaiming_uniform(rng, (cout, cin) + (k,) * nd, fan_in) * np.float32(gain))
    store.add(f"{name}.b", np.zeros(cout, dtype=np.float32))


def _dense(store, rng, name, nin, nout, gain=1.0):
    store.add(f"{name}.w", kaiming_uniform(rng, (nout, nin), nin) * np.float32(gain))
    store.add(f"{name}.b", np.zeros(nout, dtype=np.float32))


def _trunk_params(store, rng, prefix, cin, cfg: NetConfig):
    for i, width in enumerate(cfg.enc_widths):
        _conv(store, rng, f"{prefix}.conv{i}", cin, width)
        cin = width
    return cin


def _policy_head_params(store, rng, prefix, cfg: NetConfig):
    cin = cfg.vol_channels * cfg.D
    _conv(store, rng, f"{prefix}.vconv0", cin, cfg.policy_conv)
    _conv(store, rng, f"{prefix}.vconv1", cfg.policy_conv, cfg.policy_conv)
    side = (cfg.H + 1) // 2
    _dense(store, rng, f"{prefix}.vfc", cfg.policy_conv * side * side, cfg.policy_feat)
    _dense(store, rng, f"{prefix}.pfc", cfg.proprio_dim, cfg.policy_feat)
    _dense(store, rng, f"{prefix}.fc0", 2 * cfg.policy_feat, cfg.policy_hidden)
    _dense(store, rng, f"{prefix}.out", cfg.policy_hidden, cfg.action_dim, gain=0.1)


def init_params(cfg: NetConfig, seed: int = 0, nets=NETWORKS) -> ParamStore:
    """Kaiming-uniform weights and zero biases for the requested networks."""
    store = ParamStore()
    for net in nets:
        # one stream per network so adding a network never perturbs another's init
        sub = np.random.default_rng([seed, sum(net.encode())])
        if net == "enc3d":
            c = _trunk_params(store, sub, "enc3d", 1, cfg)
            _conv(store, sub, "enc3d.proj", c, cfg.vol_channels * cfg.D)
            _conv(store, sub, "enc3d.c3d0", cfg.vol_channels, cfg.vol_channels, nd=3)
            _conv(store, sub, "enc3d.c3d1", cfg.vol_channels, cfg.vol_channels, nd=3)
        elif net == "encpose":
            c = _trunk_params(store, sub, "encpose", 2, cfg)
            _conv(store, sub, "encpose.down", c, cfg.pose_width)
            side = (cfg.trunk_size + 1) // 2
            _dense(store, sub, "encpose.fc", cfg.pose_width * side * side, 6, gain=0.01)
        elif net == "refine":
            _conv(store, sub, "refine.c0", cfg.vol_channels, cfg.vol_channels, nd=3)
            _conv(store, sub, "refine.c1", cfg.vol_channels, cfg.vol_channels, nd=3)
        elif net == "decoder":
            widths = cfg.dec_widths
            _conv(store, sub, "decoder.conv0", cfg.vol_channels * cfg.D, widths[0])
            for i in range(1, len(widths)):
                _conv(store, sub, f"decoder.up{i}", widths[i - 1], widths[i])
            _conv(store, sub, "decoder.out", widths[-1], 1)
        elif net == "policy":
            _policy_head_params(store, sub, "policy", cfg)
        elif net == "teacher":
            nin = cfg.teacher_input
            for i, width in enumerate(cfg.teacher_hidden):
                _dense(store, sub, f"teacher.fc{i}", nin, width)
                nin = width
            _dense(store, sub, "teacher.out", nin, cfg.action_dim)
        elif net == "baseline":
            c = _trunk_params(store, sub, "baseline", cfg.n, cfg)
            _conv(store, sub, "baseline.proj", c, cfg.vol_channels * cfg.D)
            _policy_head_params(store, sub, "baseline", cfg)
        else:
            raise KeyError(f"unknown network {net!r}")
    return store


# ---------------------------------------------------------------------------
# forwards


def _c2(p, name, x, stride=1, pad=1):
    return conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)


def _c3(p, name, x):
    return conv3d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, pad=1)


def _fc(p, name, x):
    return linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _as_image_batch(frames: Tensor, cfg: NetConfig, channels: int, what: str):
    """Add the channel axis: [(B,) 64, 64] -> [(B,) 1, 64, 64] for single-channel inputs."""
    side = (cfg.image, cfg.image)
    if channels == 1:
        if frames.shape[-2:] != side or frames.ndim not in (2, 3):
            raise ShapeError(f"{what}: expected [(B,) {cfg.image}, {cfg.image}] depth, got {frames.shape}")
        return reshape(frames, frames.shape[:-2] + (1,) + side)
    if frames.shape[-3:] != (channels,) + side or frames.ndim not in (3, 4):
        raise ShapeError(f"{what}: expected [(B,) {channels}, {cfg.image}, {cfg.image}], got {frames.shape}")
    return frames


def _trunk(p, prefix, x, cfg):
    for i in range(len(cfg.enc_widths)):
        x = relu(_c2(p, f"{prefix}.conv{i}", x, stride=2))
    return x


def _project(p, name, x, cfg):
    """Final trunk conv that lands exactly on the H x W voxel footprint."""
    s = cfg.trunk_size
    if s == cfg.H:
        return _c2(p, name, x, stride=1, pad=1)
    if s == cfg.H + 2:
        return _c2(p, name, x, stride=1, pad=0)
    return _c2(p, name, x, stride=2, pad=1)


def enc3d_forward(p: ParamStore, depth: Tensor, cfg: NetConfig) -> Tensor:
    """[(B,) 64, 64] depth -> [(B,) C, D, H, W] feature volume."""
    x = _as_image_batch(depth, cfg, 1, "enc3d")
    x = _trunk(p, "enc3d", x, cfg)
    x = relu(_project(p, "enc3d.proj", x, cfg))
    v = channels_to_depth(x, cfg.D)
    v = relu(_c3(p, "enc3d.c3d0", v))
    return _c3(p, "enc3d.c3d1", v)


def encpose_forward(p: ParamStore, src: Tensor, dst: Tensor, cfg: NetConfig) -> Tensor:
    """Pose that carries volumes from ``src``'s camera frame into ``dst``'s.

    Returns [(B,) 6]: rotation vector (canonicalised) then translation, both
    in normalised volume coordinates.
    """
    if src.shape != dst.shape:
        raise ShapeError(f"encpose: frame shapes differ {src.shape} vs {dst.shape}")
    a = _as_image_batch(src, cfg, 1, "encpose")
    b = _as_image_batch(dst, cfg, 1, "encpose")
    x = concat([a, b], axis=-3)
    x = _trunk(p, "encpose", x, cfg)
    x = relu(_c2(p, "encpose.down", x, stride=2))
    batched = x.ndim == 4
    pose = _fc(p, "encpose.fc", _flatten(x, batched))
    if not batched:
        return reshape(canonicalize_op(reshape(pose, (1, 6))), (6,))
    return canonicalize_op(pose)


def refine3d(p: ParamStore, v: Tensor) -> Tensor:
    """Shape-preserving conv3d -> relu -> conv3d."""
    return _c3(p, "refine.c1", relu(_c3(p, "refine.c0", v)))


def decoder_forward(p: ParamStore, v: Tensor, cfg: NetConfig) -> Tensor:
    """[(B,) C, D, H, W] -> [(B,) 64, 64] predicted depth in (0, 1)."""
    if v.shape[-4:] != (cfg.vol_channels, cfg.D, cfg.H, cfg.W):
        raise ShapeError(f"decoder: expected [(B,) {cfg.vol_channels}, {cfg.D}, {cfg.H}, {cfg.W}], got {v.shape}")
    x = relu(_c2(p, "decoder.conv0", depth_to_channels(v)))
    size = cfg.image >> (len(cfg.dec_widths) - 1)
    for i in range(1, len(cfg.dec_widths)):
        x = resize_nearest(x, (size, size))
        x = relu(_c2(p, f"decoder.up{i}", x))
        size *= 2
    x = resize_nearest(x, (cfg.image, cfg.image))
    x = sigmoid(_c2(p, "decoder.out", x))
    return reshape(x, x.shape[:-3] + (cfg.image, cfg.image))


def _flatten(x: Tensor, batched: bool) -> Tensor:
    if batched:
        return reshape(x, (x.shape[0], x.size // x.shape[0]))
    return reshape(x, (x.size,))


def _policy_head(p, prefix, fmap: Tensor, proprio: Tensor, cfg: NetConfig) -> Tensor:
    batched = fmap.ndim == 4
    if proprio.shape[-1] != cfg.proprio_dim or proprio.ndim != (2 if batched else 1):
        raise ShapeError(f"{prefix}: proprio {proprio.shape} does not match features {fmap.shape}")
    x = relu(_c2(p, f"{prefix}.vconv0", fmap))
    x = relu(_c2(p, f"{prefix}.vconv1", x, stride=2))
    vis = relu(_fc(p, f"{prefix}.vfc", _flatten(x, batched)))
    prop = relu(_fc(p, f"{prefix}.pfc", proprio))
    h = relu(_fc(p, f"{prefix}.fc0", concat([vis, prop], axis=-1)))
    return _fc(p, f"{prefix}.out", h)


def policy_forward(p: ParamStore, mem: Tensor, proprio: Tensor, cfg: NetConfig) -> Tensor:
    """Memory [(B,) C, D, H, W] and proprio [(B,) 63] -> [(B,) 12] joint targets."""
    if mem.shape[-4:] != (cfg.vol_channels, cfg.D, cfg.H, cfg.W):
        raise ShapeError(f"policy: memory shape {mem.shape} does not match config")
    return _policy_head(p, "policy", depth_to_channels(mem), proprio, cfg)


def teacher_mlp_forward(p: ParamStore, state: Tensor, cfg: NetConfig) -> Tensor:
    """[(B,) teacher_input] privileged state (proprio, privileged, dense, sparse) -> [(B,) 12]."""
    if state.shape[-1] != cfg.teacher_input:
        raise ShapeError(f"teacher: expected {cfg.teacher_input} inputs, got {state.shape}")
    x = state
    for i in range(len(cfg.teacher_hidden)):
        x = relu(_fc(p, f"teacher.fc{i}", x))
    return _fc(p, "teacher.out", x)


def baseline_framestack_forward(p: ParamStore, frames: Tensor, proprio: Tensor, cfg: NetConfig) -> Tensor:
    """Frames stacked on the channel axis [(B,) n, 64, 64] -> [(B,) 12]."""
    x = _as_image_batch(frames, cfg, cfg.n, "baseline")
    x = _trunk(p, "baseline", x, cfg)
    x = relu(_project(p, "baseline.proj", x, cfg))
    return _policy_head(p, "baseline", x, proprio, cfg)


def param_report(p: ParamStore) -> dict[str, int]:
    """Parameter count per network prefix."""
    counts: dict[str, int] = {}
    for name in p:
        net = name.split(".", 1)[0]
        counts[net] = counts.get(net, 0) + p[name].size
    return counts
