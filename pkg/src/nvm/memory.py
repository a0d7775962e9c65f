"""Assemble the volumetric memory from a window of depth frames.

Frames are ordered oldest first, so by default the last frame is the present
view. Every frame is encoded to a feature volume, carried into the present
camera frame by a rigid warp, refined, and averaged.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import SE3Transform, exp_map_op, relative_pose
from .networks import NetConfig, enc3d_forward, encpose_forward, refine3d
from .tensor import ParamStore, ShapeError, Tensor, concat, mean_axis, reshape, take
from .volume import GridSpec, depth_to_channels, warp

POSE_SOURCES = ("learned", "ground_truth", "identity")


def ground_truth_transforms(
    cam_poses: Sequence[SE3Transform], grid: GridSpec, present: int = -1
) -> np.ndarray:
    """[n, 3, 4] volume-frame transforms taking each frame into ``present``.

    The present frame's own transform is written as an exact identity.
    """
    n = len(cam_poses)
    present %= n
    out = np.zeros((n, 3, 4))
    for i, cam in enumerate(cam_poses):
        if i == present:
            out[i, :, :3] = np.eye(3)
            continue
        T = grid.from_camera(relative_pose(cam, cam_poses[present]))
        out[i, :, :3], out[i, :, 3] = T.R, T.t
    return out


def _rows(x: Tensor, rows: list[int], shape: tuple[int, ...]) -> Tensor:
    return reshape(take(x, rows), shape)


def learned_poses(params: ParamStore, frames: Tensor, present: int, cfg: NetConfig) -> Tensor:
    """[B, n, 6] poses ``encpose(O_i, O_present)``; the present slot is exactly zero."""
    b, n = frames.shape[:2]
    flat = reshape(frames, (b * n,) + frames.shape[2:])
    others = [i for i in range(n) if i != present]
    pieces = []
    if others:
        src = [bi * n + i for bi in range(b) for i in others]
        dst = [bi * n + present for bi in range(b) for _ in others]
        pred = encpose_forward(params, take(flat, src), take(flat, dst), cfg)
        pred = reshape(pred, (b * (n - 1), 6))
        m = n - 1
        if present > 0:
            pieces.append(_rows(pred, [bi * m + i for bi in range(b) for i in range(present)], (b, present, 6)))
        pieces.append(Tensor(np.zeros((b, 1, 6), dtype=pred.dtype)))
        if present < m:
            rows = [bi * m + i for bi in range(b) for i in range(present, m)]
            pieces.append(_rows(pred, rows, (b, m - present, 6)))
        return concat(pieces, axis=1)
    return Tensor(np.zeros((b, 1, 6), dtype=frames.dtype))


def build_memory(
    params: ParamStore,
    frames: Tensor,
    cfg: NetConfig,
    pose_source: str = "learned",
    cam_poses=None,
    grid: GridSpec | None = None,
    present: int = -1,
    refine: bool = True,
) -> Tensor:
    """Fuse a history of depth frames into one feature volume.

    ``frames`` is [(B,) n, 64, 64], oldest first. ``cam_poses`` (ground-truth
    source only) is a list of n camera world poses, or a list of such lists
    for a batch. ``refine=False`` skips the refinement convs, which leaves a
    purely linear function of the encoded volumes.
    """
    if pose_source not in POSE_SOURCES:
        raise ValueError(f"pose_source must be one of {POSE_SOURCES}, got {pose_source!r}")
    batched = frames.ndim == 4
    if frames.ndim not in (3, 4) or frames.shape[-3] != cfg.n:
        raise ShapeError(f"build_memory: expected {cfg.n} frames, got history shape {frames.shape}")
    fr = frames if batched else reshape(frames, (1,) + frames.shape)
    b, n = fr.shape[:2]
    present %= n
    grid = grid or GridSpec(dims=(cfg.D, cfg.H, cfg.W))

    vols = enc3d_forward(params, reshape(fr, (b * n,) + fr.shape[2:]), cfg)

    if pose_source == "learned":
        poses = reshape(learned_poses(params, fr, present, cfg), (b * n, 6))
        transforms = exp_map_op(poses)
    elif pose_source == "ground_truth":
        if cam_poses is None:
            raise ValueError("ground_truth pose source needs cam_poses")
        per_item = [cam_poses] if not batched else list(cam_poses)
        if len(per_item) != b or any(len(c) != n for c in per_item):
            raise ShapeError(f"build_memory: need {b} x {n} camera poses")
        arr = np.concatenate([ground_truth_transforms(c, grid, present) for c in per_item])
        transforms = Tensor(arr.astype(vols.dtype))
    else:
        eye = np.zeros((b * n, 3, 4), dtype=vols.dtype)
        eye[:, :, :3] = np.eye(3)
        transforms = Tensor(eye)

    moved = warp(vols, transforms)
    if refine:
        moved = refine3d(params, moved)
    mem = mean_axis(reshape(moved, (b, n) + moved.shape[1:]), axis=1)
    return mem if batched else reshape(mem, mem.shape[1:])


def memory_to_policy_input(mem: Tensor) -> Tensor:
    """[(B,) C, D, H, W] -> [(B,) C*D, H, W]."""
    return depth_to_channels(mem)
