"""Learning objectives and loops, plus the scripted privileged teacher."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import exp_map_op, relative_pose
from .memory import build_memory
from .networks import (
    NetConfig,
    baseline_framestack_forward,
    decoder_forward,
    enc3d_forward,
    encpose_forward,
    init_params,
    policy_forward,
)
from .simworld.camera import apply_depth_noise
from .simworld.episodes import Observation
from .simworld.robot import (
    DENSE_FORWARD,
    DENSE_LATERAL,
    SPARSE_FORWARD,
    SPARSE_LATERAL,
    V_TARGET,
    encode_command,
)
from .tensor import (
    AdamState,
    Gradients,
    NumericError,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    elementwise_abs,
    elementwise_sub,
    mean_all,
    reshape,
    save_checkpoint,
    scale,
    take,
)
from .volume import GridSpec, warp

# ---------------------------------------------------------------------------
# teacher oracle

_PERTURB_AMPLITUDE = 0.05
_PERTURB_SEED = 1234


def _perturbation_weights():
    rng = np.random.default_rng(_PERTURB_SEED)
    w1 = rng.standard_normal((32, 18)) / math.sqrt(18)
    w2 = rng.standard_normal((12, 32)) / math.sqrt(32)
    return w1, w2


_W1, _W2 = _perturbation_weights()


def _band(axis: np.ndarray, lo: float, hi: float) -> slice:
    idx = np.flatnonzero((axis >= lo - 1e-9) & (axis <= hi + 1e-9))
    return slice(int(idx[0]), int(idx[-1]) + 1)


_FOOT_ROWS = _band(DENSE_LATERAL, -0.15, 0.15)
_SUPPORT_COLS = _band(DENSE_FORWARD, -0.2, 0.2)
_STEP_COLS = _band(DENSE_FORWARD, 0.15, 0.35)
_CORRIDOR_ROWS = _band(SPARSE_LATERAL, -0.25, 0.25)
_CORRIDOR_COLS = _band(SPARSE_FORWARD, 0.3, 1.0)
_LEFT = SPARSE_LATERAL > 0

OBSTACLE_RISE = 0.3
VOID_DROP = 0.3


def teacher_command(obs: Observation) -> tuple[float, float, float]:
    """(vx, wz, clearance) chosen from privileged state and elevation maps."""
    p = np.asarray(obs.privileged, dtype=np.float64)
    dense = np.asarray(obs.dense, dtype=np.float64)
    sparse = np.asarray(obs.sparse, dtype=np.float64)
    vx_w, vy_w = p[0], p[1]
    speed = math.hypot(vx_w, vy_w)
    heading = math.atan2(vy_w, vx_w) if speed > 0.05 else 0.0

    vx = V_TARGET + 0.5 * (V_TARGET - speed)
    wz = -1.5 * heading

    ref = dense[_FOOT_ROWS, _SUPPORT_COLS].max()
    zone = dense[_FOOT_ROWS, _STEP_COLS]
    rise = zone.max() - ref
    clearance = max(0.03, rise + 0.03)
    if zone.min() < ref - VOID_DROP:
        clearance = max(clearance, 0.08)

    blocked = sparse - ref > OBSTACLE_RISE
    if blocked[_CORRIDOR_ROWS, _CORRIDOR_COLS].any():
        ahead = blocked[:, _CORRIDOR_COLS.start :]
        left, right = ahead[_LEFT].sum(), ahead[~_LEFT].sum()
        wz = 1.0 if left <= right else -1.0
        vx = 0.2
    return vx, wz, clearance


def teacher_oracle(obs: Observation) -> np.ndarray:
    """Deterministic 12-joint action from privileged observations (float32)."""
    vx, wz, clearance = teacher_command(obs)
    feats = np.concatenate([np.asarray(obs.proprio[:12], dtype=np.float64),
                            np.asarray(obs.privileged[:6], dtype=np.float64)])
    perturb = _PERTURB_AMPLITUDE * np.tanh(_W2 @ np.tanh(_W1 @ feats))
    return (encode_command(vx, wz, clearance) + perturb).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    salt: bool = True
    cutout: bool = True
    gaussian: bool = True
    clip: bool = True
    cutout_min: int = 4
    cutout_max: int = 16
    sigma: float = 0.01

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(salt=False, cutout=False, gaussian=False, clip=False)


def augment(img: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()) -> tuple[np.ndarray, dict]:
    """Perturb one normalised depth image. Returns the image and what was applied."""
    rng = np.random.default_rng(seed)
    out = np.array(img, dtype=np.float32, copy=True)
    info: dict = {}
    if cfg.salt:
        out = apply_depth_noise(out, rng.integers(2**32))
    if cfg.cutout:
        h = int(rng.integers(cfg.cutout_min, cfg.cutout_max + 1))
        w = int(rng.integers(cfg.cutout_min, cfg.cutout_max + 1))
        r = int(rng.integers(0, out.shape[0] - h + 1))
        c = int(rng.integers(0, out.shape[1] - w + 1))
        out[r : r + h, c : c + w] = 1.0
        info["cutout"] = (r, c, h, w)
    if cfg.gaussian:
        out = out + rng.normal(0.0, cfg.sigma, size=out.shape).astype(np.float32)
    if cfg.clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32), info


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossReport:
    L_rec: float
    L_BC: float
    L_total: float
    lam_bc: float
    lam_rec: float
    step: int = 0
    wall_time: float = 0.0


def ssl_transforms(params: ParamStore, inputs: Tensor, cfg: NetConfig, pose_source: str = "learned",
                   cam_poses=None, grid: GridSpec | None = None) -> Tensor:
    """[B*n, 3, 4] transforms carrying the oldest frame's volume into every frame."""
    b, n = inputs.shape[:2]
    grid = grid or GridSpec(dims=(cfg.D, cfg.H, cfg.W))
    if pose_source == "learned":
        if n == 1:
            return exp_map_op(Tensor(np.zeros((b, 6), dtype=inputs.dtype)))
        src = take(reshape(inputs, (b * n,) + inputs.shape[2:]), [bi * n for bi in range(b) for _ in range(1, n)])
        dst = take(reshape(inputs, (b * n,) + inputs.shape[2:]), [bi * n + i for bi in range(b) for i in range(1, n)])
        pred = reshape(encpose_forward(params, src, dst, cfg), (b, n - 1, 6))
        zero = Tensor(np.zeros((b, 1, 6), dtype=pred.dtype))
        return exp_map_op(reshape(concat([zero, pred], axis=1), (b * n, 6)))
    arr = np.zeros((b, n, 3, 4))
    arr[:, :, :, :3] = np.eye(3)
    if pose_source == "ground_truth":
        if cam_poses is None:
            raise ValueError("ground_truth pose source needs cam_poses")
        for bi in range(b):
            for i in range(1, n):
                T = grid.from_camera(relative_pose(cam_poses[bi][0], cam_poses[bi][i]))
                arr[bi, i, :, :3], arr[bi, i, :, 3] = T.R, T.t
    elif pose_source != "identity":
        raise ValueError(f"unknown pose source {pose_source!r}")
    return Tensor(arr.reshape(b * n, 3, 4).astype(inputs.dtype))


def ssl_predictions(params: ParamStore, inputs: Tensor, cfg: NetConfig, pose_source: str = "learned",
                    cam_poses=None, grid: GridSpec | None = None) -> Tensor:
    """Encode the oldest frame and render every frame of the window: [B, n, 64, 64]."""
    if inputs.ndim != 4 or inputs.shape[1] != cfg.n:
        raise ShapeError(f"ssl: expected [B, {cfg.n}, {cfg.image}, {cfg.image}] history, got {inputs.shape}")
    b, n = inputs.shape[:2]
    oldest = take(reshape(inputs, (b * n,) + inputs.shape[2:]), [bi * n for bi in range(b)])
    vol = enc3d_forward(params, oldest, cfg)
    transforms = ssl_transforms(params, inputs, cfg, pose_source, cam_poses, grid)
    moved = warp(take(vol, [bi for bi in range(b) for _ in range(n)]), transforms)
    pred = decoder_forward(params, moved, cfg)
    return reshape(pred, (b, n) + pred.shape[1:])


def l1(pred: Tensor, target: Tensor) -> Tensor:
    return mean_all(elementwise_abs(elementwise_sub(pred, target)))


def ssl_loss(params: ParamStore, inputs: Tensor, targets: Tensor, cfg: NetConfig, pose_source: str = "learned",
             cam_poses=None, grid: GridSpec | None = None) -> Tensor:
    """Mean over the window of the per-frame mean absolute reconstruction error."""
    if targets.shape != inputs.shape:
        raise ShapeError(f"ssl: targets {targets.shape} do not match inputs {inputs.shape}")
    return l1(ssl_predictions(params, inputs, cfg, pose_source, cam_poses, grid), targets)


def student_actions(params: ParamStore, frames: Tensor, proprio: Tensor, cfg: NetConfig,
                    pose_source: str = "learned", cam_poses=None) -> Tensor:
    mem = build_memory(params, frames, cfg, pose_source, cam_poses)
    return policy_forward(params, mem, proprio, cfg)


def bc_loss(params: ParamStore, frames: Tensor, proprio: Tensor, teacher_action: Tensor, cfg: NetConfig,
            pose_source: str = "learned", cam_poses=None) -> Tensor:
    return l1(student_actions(params, frames, proprio, cfg, pose_source, cam_poses), teacher_action)


# ---------------------------------------------------------------------------
# data


@dataclass
class Batch:
    inputs: np.ndarray  # [B, n, 64, 64] sensor view (salt noise) plus augmentation
    targets: np.ndarray  # [B, n, 64, 64] clean depth
    proprio: np.ndarray  # [B, 63] at the present frame
    teacher: np.ndarray  # [B, 12] at the present frame
    cam_poses: list  # B lists of n SE3Transform
    index: list  # (episode, start) per row


def window_index(episodes, n: int) -> list[tuple[int, int]]:
    return [(e, s) for e, ep in enumerate(episodes) for s in range(len(ep) - n + 1)]


def make_batch(episodes, windows, n: int, aug: AugmentConfig | None, seed) -> Batch:
    rng = np.random.default_rng(seed)
    inputs, targets, proprio, teacher, poses = [], [], [], [], []
    for e, s in windows:
        ep = episodes[e]
        idx = range(s, s + n)
        clean = ep.depth[s : s + n]
        noisy = np.stack([ep.noisy_depth(t) for t in idx])
        if aug is not None:
            noisy = np.stack([augment(img, rng.integers(2**32), aug)[0] for img in noisy])
        inputs.append(noisy)
        targets.append(clean)
        proprio.append(ep.proprio[s + n - 1])
        teacher.append(ep.teacher_action[s + n - 1])
        poses.append(ep.camera_poses(idx))
    return Batch(np.stack(inputs), np.stack(targets), np.stack(proprio), np.stack(teacher), poses, list(windows))


def sample_batch(episodes, all_windows, n: int, batch: int, rng: np.random.Generator,
                 aug: AugmentConfig | None) -> Batch:
    pick = rng.choice(len(all_windows), size=batch, replace=len(all_windows) < batch)
    return make_batch(episodes, [all_windows[i] for i in pick], n, aug, rng.integers(2**32))


# ---------------------------------------------------------------------------
# optimisation


def combined_step(params: ParamStore, state: AdamState, batch: Batch, cfg: NetConfig, lam_bc: float = 1.0,
                  lam_rec: float = 0.01, lr: float = 3e-4, pose_source: str = "learned",
                  update: bool = True, betas: tuple[float, float] = (0.9, 0.999),
                  eps: float = 1e-8) -> tuple[LossReport, Gradients]:
    """One tape over both objectives and (optionally) one Adam step."""
    t0 = time.perf_counter()
    inputs = Tensor(batch.inputs)
    zero = Tensor(np.zeros((), dtype=np.float32))
    with Tape() as tape:
        rec = ssl_loss(params, inputs, Tensor(batch.targets), cfg, pose_source, batch.cam_poses) if lam_rec else zero
        bc = (bc_loss(params, inputs, Tensor(batch.proprio), Tensor(batch.teacher), cfg, pose_source,
                      batch.cam_poses) if lam_bc else zero)
        total = add(scale(bc, lam_bc), scale(rec, lam_rec))
    grads = backward(tape, total) if total.node is not None else Gradients()
    if update:
        named = grads.by_name(params)
        adam_step(params, named, state, lr, betas[0], betas[1], eps, names=list(named))
    report = LossReport(rec.item(), bc.item(), total.item(), lam_bc, lam_rec, state.t, time.perf_counter() - t0)
    return report, grads


def baseline_bc_loss(params: ParamStore, frames: Tensor, proprio: Tensor, teacher_action: Tensor,
                     cfg: NetConfig) -> Tensor:
    return l1(baseline_framestack_forward(params, frames, proprio, cfg), teacher_action)


def baseline_step(params: ParamStore, state: AdamState, batch: Batch, cfg: NetConfig, lr: float = 3e-4,
                  update: bool = True, betas: tuple[float, float] = (0.9, 0.999),
                  eps: float = 1e-8) -> tuple[LossReport, Gradients]:
    """Behaviour cloning step for the frame-stacking baseline (no reconstruction term)."""
    t0 = time.perf_counter()
    with Tape() as tape:
        bc = baseline_bc_loss(params, Tensor(batch.inputs), Tensor(batch.proprio), Tensor(batch.teacher), cfg)
    grads = backward(tape, bc)
    if update:
        named = grads.by_name(params)
        adam_step(params, named, state, lr, betas[0], betas[1], eps, names=list(named))
    return LossReport(0.0, bc.item(), bc.item(), 1.0, 0.0, state.t, time.perf_counter() - t0), grads


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam_bc: float = 1.0
    lam_rec: float = 0.01
    eval_every: int = 100
    checkpoint_every: int = 500
    heldout_episodes: int = 8
    heldout_windows: int = 32
    pose_source: str = "learned"
    seed: int = 0
    baseline_steps: int = 0


METRIC_COLUMNS = ("step", "L_rec", "L_BC", "L_total", "heldout_L_rec", "bc_err", "lr")


def evaluate(params: ParamStore, batch: Batch, cfg: NetConfig, pose_source: str = "learned",
             chunk: int = 16, model: str = "nvm") -> tuple[float, float]:
    """(held-out L_rec, held-out mean |student - teacher|) without recording a tape.

    The baseline has no reconstruction head, so its L_rec is reported as NaN.
    """
    rec, bc, rows = 0.0, 0.0, len(batch.index)
    for s in range(0, rows, chunk):
        sl = slice(s, s + chunk)
        k = len(batch.index[sl])
        inputs = Tensor(batch.inputs[sl])
        if model == "baseline":
            a = baseline_framestack_forward(params, inputs, Tensor(batch.proprio[sl]), cfg)
            rec = float("nan")
        else:
            r = ssl_loss(params, inputs, Tensor(batch.targets[sl]), cfg, pose_source, batch.cam_poses[sl])
            a = student_actions(params, inputs, Tensor(batch.proprio[sl]), cfg, pose_source, batch.cam_poses[sl])
            rec += r.item() * k
        bc += float(np.mean(np.abs(a.data - batch.teacher[sl]))) * k
    return rec / rows, bc / rows


def split_episodes(episodes, heldout: int):
    if not episodes:
        raise ValueError("empty dataset")
    if heldout >= len(episodes):
        raise ValueError(f"need more than {heldout} episodes to hold {heldout} out")
    return episodes[:-heldout] if heldout else episodes, episodes[-heldout:] if heldout else episodes


MODELS = ("nvm", "baseline")


def train(net: NetConfig, tc: TrainConfig, episodes, out_dir=None, aug: AugmentConfig | None = AugmentConfig(),
          params: ParamStore | None = None, log=None, model: str = "nvm",
          steps: int | None = None) -> tuple[ParamStore, list[dict]]:
    """Optimise on ``episodes``; returns final parameters and the metric rows.

    ``model="baseline"`` fits the frame-stacking baseline by plain behaviour
    cloning and writes ``baseline.nvmc`` / ``baseline_metrics.csv`` instead.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    steps = tc.steps if steps is None else steps
    prefix = "" if model == "nvm" else "baseline_"
    train_eps, held_eps = split_episodes(list(episodes), tc.heldout_episodes)
    windows = window_index(train_eps, net.n)
    held_windows = window_index(held_eps, net.n)
    if not windows or not held_windows:
        raise ValueError(f"no history windows of length {net.n} in the dataset")
    rng = np.random.default_rng([tc.seed, 11])
    pick = rng.choice(len(held_windows), size=min(tc.heldout_windows, len(held_windows)), replace=False)
    held = make_batch(held_eps, [held_windows[i] for i in sorted(pick)], net.n, None, [tc.seed, 12])
    if params is None:
        params = init_params(net, tc.seed, ("baseline",)) if model == "baseline" else init_params(net, tc.seed)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    last = LossReport(float("nan"), float("nan"), float("nan"), tc.lam_bc, tc.lam_rec)

    def record(step, report):
        h_rec, h_bc = evaluate(params, held, net, tc.pose_source, model=model)
        row = {"step": step, "L_rec": report.L_rec, "L_BC": report.L_BC, "L_total": report.L_total,
               "heldout_L_rec": h_rec, "bc_err": h_bc, "lr": tc.lr}
        rows.append(row)
        if log:
            log(row)
        if out is not None:
            write_metrics(rows, out / f"{prefix}metrics.csv")

    betas = (tc.beta1, tc.beta2)
    record(0, last)
    for step in range(1, steps + 1):
        batch = sample_batch(train_eps, windows, net.n, tc.batch, rng, aug)
        if model == "baseline":
            last, _ = baseline_step(params, state, batch, net, tc.lr, betas=betas, eps=tc.eps)
        else:
            last, _ = combined_step(params, state, batch, net, tc.lam_bc, tc.lam_rec, tc.lr, tc.pose_source,
                                    betas=betas, eps=tc.eps)
        if not math.isfinite(last.L_total):
            raise NumericError(f"non-finite loss at step {step}: {last}")
        if step % tc.eval_every == 0 or step == steps:
            record(step, last)
        if out is not None and (step % tc.checkpoint_every == 0 or step == steps):
            save_checkpoint(params, out / f"{prefix}ckpt_{step:06d}.nvmc")
    if out is not None:
        save_checkpoint(params, out / ("final.nvmc" if model == "nvm" else "baseline.nvmc"))
    return params, rows


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
