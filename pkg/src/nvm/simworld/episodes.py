"""Episode rollouts and their on-disk format.

An episode directory holds ``manifest.json`` plus one little-endian binary
file per stream. Depth is stored clean; the salt-noise pixel indices are a
separate stream so the noisy view can be rebuilt exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..geometry import SE3Transform, exp_map, Pose6D
from .camera import Intrinsics, apply_noise_indices, noise_indices, render_depth
from .robot import (
    DENSE_SHAPE,
    DT,
    PRIVILEGED_DIM,
    PROPRIO_DIM,
    SPARSE_SHAPE,
    EnvParams,
    camera_world,
    initial_state,
    metrics,
    privileged_vector,
    proprio_vector,
    reward_terms,
    sample_elevation,
    step_walker,
)
from .terrain import COURSE_GOAL, Heightfield

EPISODE_VERSION = 1


@dataclass
class Observation:
    """One step's inputs, already cast to float32 as stored."""

    proprio: np.ndarray
    privileged: np.ndarray
    dense: np.ndarray
    sparse: np.ndarray
    depth: np.ndarray | None = None  # sensor view (salt noise applied), for visual drivers


Driver = Callable[[Observation], np.ndarray]

STREAMS = {
    "depth": ("<f4", (64, 64)),
    "noise_idx": ("<i4", (40,)),
    "proprio": ("<f4", (PROPRIO_DIM,)),
    "privileged": ("<f4", (PRIVILEGED_DIM,)),
    "dense": ("<f4", DENSE_SHAPE),
    "sparse": ("<f4", SPARSE_SHAPE),
    "cam_pose": ("<f4", (6,)),
    "base_pose": ("<f4", (6,)),
    "teacher_action": ("<f4", (12,)),
    "action": ("<f4", (12,)),
    "rewards": ("<f4", (4,)),
    "timestamp": ("<f4", ()),
    "course_x": ("<f4", ()),
}


def pose_to_array(T: SE3Transform) -> np.ndarray:
    return T.to_pose().as_array()


def array_to_pose(v) -> SE3Transform:
    return exp_map(Pose6D.from_array(np.asarray(v, dtype=np.float64)))


@dataclass
class EpisodeRecord:
    streams: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.streams["timestamp"])

    def __getattr__(self, name):
        streams = self.__dict__.get("streams", {})
        if name in streams:
            return streams[name]
        raise AttributeError(name)

    def noisy_depth(self, t=None) -> np.ndarray:
        if t is None:
            return np.stack([apply_noise_indices(d, i) for d, i in zip(self.depth, self.noise_idx)])
        return apply_noise_indices(self.depth[t], self.noise_idx[t])

    def camera_poses(self, idx) -> list[SE3Transform]:
        return [array_to_pose(self.cam_pose[i]) for i in idx]

    def observation(self, t: int) -> Observation:
        return Observation(self.proprio[t], self.privileged[t], self.dense[t], self.sparse[t], self.noisy_depth(t))

    def check(self) -> None:
        n = len(self)
        for name, (_, shape) in STREAMS.items():
            arr = self.streams[name]
            if arr.shape != (n,) + shape:
                raise ValueError(f"stream {name}: shape {arr.shape}, expected {(n,) + shape}")
        if n > 1 and not np.all(np.diff(self.timestamp) > 0):
            raise ValueError("timestamps are not strictly increasing")

    def metrics(self) -> tuple[float, bool]:
        xs = self.course_x
        if "final_x" in self.meta:
            xs = np.append(xs, self.meta["final_x"])  # position after the last executed step
        return metrics(xs, bool(self.meta.get("fell", False)), goal_x=self.meta.get("goal_x", COURSE_GOAL))

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.check()
        index = {}
        for name, (dtype, shape) in STREAMS.items():
            arr = np.ascontiguousarray(self.streams[name], dtype=dtype)
            (path / f"{name}.bin").write_bytes(arr.tobytes())
            index[name] = {"file": f"{name}.bin", "dtype": dtype, "shape": list(arr.shape)}
        manifest = {"version": EPISODE_VERSION, "steps": len(self), "streams": index, "meta": self.meta}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def read(cls, path: str | Path) -> "EpisodeRecord":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("version") != EPISODE_VERSION:
            raise ValueError(f"{path}: unsupported episode version {manifest.get('version')}")
        streams = {}
        for name, entry in manifest["streams"].items():
            raw = np.fromfile(path / entry["file"], dtype=entry["dtype"])
            native = np.int32 if entry["dtype"].endswith("i4") else np.float32
            streams[name] = raw.reshape(entry["shape"]).astype(native)
        rec = cls(streams, manifest["meta"])
        rec.check()
        return rec


def collect_episode(
    hf: Heightfield,
    driver: Driver,
    seed: int,
    steps: int = 200,
    jitter: float = 0.03,
    intr: Intrinsics = Intrinsics(),
    corrected_forward: bool = False,
    goal_x: float = COURSE_GOAL,
    env: EnvParams | None = None,
) -> EpisodeRecord:
    """Roll the walker under ``driver`` until ``steps``, a fall, or the goal."""
    rng = np.random.default_rng([seed, 7])
    difficulty = float(hf.meta.get("difficulty", 0.5))
    env = env or EnvParams.sample(rng, difficulty)
    state = initial_state(hf)
    rows: dict[str, list] = {k: [] for k in STREAMS}
    for t in range(steps):
        cam = camera_world(state, hf, env)
        elev = sample_elevation(hf, state)
        depth = render_depth(hf, cam, intr).values
        salt = noise_indices([seed, t])
        obs = Observation(
            proprio_vector(state).astype(np.float32),
            privileged_vector(state, env).astype(np.float32),
            elev.dense.astype(np.float32),
            elev.sparse.astype(np.float32),
            apply_noise_indices(depth, salt),
        )
        teacher = np.asarray(driver(obs), dtype=np.float32)
        executed = (teacher + jitter * rng.standard_normal(12)).astype(np.float32)
        rows["depth"].append(depth)
        rows["noise_idx"].append(salt)
        rows["proprio"].append(obs.proprio)
        rows["privileged"].append(obs.privileged)
        rows["dense"].append(obs.dense)
        rows["sparse"].append(obs.sparse)
        rows["cam_pose"].append(pose_to_array(cam))
        rows["base_pose"].append(pose_to_array(state.base_pose(hf)))
        rows["teacher_action"].append(teacher)
        rows["action"].append(executed)
        rows["timestamp"].append(t * DT)
        rows["course_x"].append(state.course_x(hf))
        nxt = step_walker(state, executed, hf, env)
        rows["rewards"].append(reward_terms(state, executed, nxt, corrected_forward).as_array())
        state = nxt
        if state.fallen or state.course_x(hf) >= goal_x:
            break
    streams = {k: np.asarray(v, dtype=STREAMS[k][0]).astype(np.int32 if k == "noise_idx" else np.float32)
               for k, v in rows.items()}
    meta = {
        "seed": int(seed),
        "kind": hf.kind,
        "difficulty": difficulty,
        "terrain_seed": hf.meta.get("seed"),
        "preset": hf.meta.get("preset"),
        "env_params": env.as_array().tolist(),
        "origin": list(hf.origin),
        "fell": bool(state.fallen),
        "fall_reason": state.fall_reason,
        "final_x": state.course_x(hf),
        "goal_x": goal_x,
        "jitter": jitter,
    }
    rec = EpisodeRecord(streams, meta)
    rec.check()
    return rec
