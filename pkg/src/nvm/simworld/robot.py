"""Kinematic walker, observation vectors, elevation maps, rewards and metrics.

The walker has no dynamics. An action is 12 joint targets; a fixed linear
decode turns it into (forward speed, yaw rate, foot clearance), the base
moves kinematically, and a handful of geometric rules decide falls. Positions
are kept in terrain-local coordinates and snapped to a 2^-16 m lattice so
that moving the whole world by a lattice-aligned offset changes nothing
downstream, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import SE3Transform
from .terrain import COURSE_GOAL, COURSE_START, VOID_HEIGHT, Heightfield

DT = 0.1
NUM_JOINTS = 12
PROPRIO_DIM = 63
PRIVILEGED_DIM = 14
ENV_PARAM_DIM = 8
DENSE_SHAPE = (21, 26)
SPARSE_SHAPE = (10, 19)

V_TARGET = 0.4
H_TARGET = 0.265
REWARD_WEIGHTS = (1.0, -0.005, -2.0)  # forward, energy, height
TORQUE_GAIN = 20.0

MOUNT_OFFSET = np.array([0.25, 0.0, 0.05])
MOUNT_PITCH = math.radians(40.0)
LATTICE = 2.0**-16

# joint layout per leg (FL, FR, RL, RR): hip, thigh, calf
THIGHS = (1, 4, 7, 10)
CALVES = (2, 5, 8, 11)
LEFT_HIPS = (0, 6)
RIGHT_HIPS = (3, 9)

# footprint sample points in the body frame (forward, lateral)
FRONT_FEET = ((0.2, 0.1), (0.2, -0.1))
MID_FEET = ((0.0, 0.1), (0.0, -0.1))
REAR_FEET = ((-0.2, 0.1), (-0.2, -0.1))
NOSE = ((0.32, 0.12), (0.32, 0.0), (0.32, -0.12))  # collision only; covers the camera

GAP_DROP = 0.4
MISSTEP_CLEARANCE = 0.05
TRIP_MARGIN = 0.04
COLLISION_RISE = 0.3


def _command_basis() -> np.ndarray:
    """[12, 3] joint pattern for (vx, wz, clearance)."""
    B = np.zeros((NUM_JOINTS, 3))
    B[list(THIGHS), 0] = 1.0
    B[list(LEFT_HIPS), 1] = 0.5
    B[list(RIGHT_HIPS), 1] = -0.5
    B[list(CALVES), 2] = -2.0
    return B


COMMAND_BASIS = _command_basis()
COMMAND_DECODE = np.linalg.pinv(COMMAND_BASIS)


def encode_command(vx: float, wz: float, clearance: float) -> np.ndarray:
    return COMMAND_BASIS @ np.array([vx, wz, clearance])


def decode_action(action) -> np.ndarray:
    """(vx m/s, wz rad/s, clearance m), clipped to the walker's envelope."""
    vx, wz, clr = COMMAND_DECODE @ np.asarray(action, dtype=np.float64)
    return np.array([np.clip(vx, -0.2, 0.8), np.clip(wz, -1.5, 1.5), np.clip(clr, 0.0, 0.2)])


def snap(x):
    return np.round(np.asarray(x, dtype=np.float64) / LATTICE) * LATTICE


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class EnvParams:
    """Per-episode constants exposed to the teacher as privileged input."""

    friction: float = 0.9
    motor_strength: float = 1.0
    mount_pitch_jitter: float = 0.0
    mount_dx: float = 0.0
    mount_dz: float = 0.0
    difficulty: float = 0.5
    payload: float = 0.0
    latency: float = 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator, difficulty: float) -> "EnvParams":
        return cls(
            friction=float(rng.uniform(0.8, 1.0)),
            motor_strength=float(rng.uniform(0.9, 1.1)),
            mount_pitch_jitter=float(rng.uniform(-math.radians(2), math.radians(2))),
            mount_dx=float(rng.uniform(-0.01, 0.01)),
            mount_dz=float(rng.uniform(-0.01, 0.01)),
            difficulty=float(difficulty),
            payload=float(rng.uniform(0.0, 2.0)),
            latency=float(rng.uniform(0.0, 0.02)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.friction, self.motor_strength, self.mount_pitch_jitter, self.mount_dx,
                         self.mount_dz, self.difficulty, self.payload, self.latency])


@dataclass
class RobotState:
    pos: np.ndarray  # terrain-local base position (m)
    yaw: float = 0.0
    pitch: float = 0.0
    q: np.ndarray = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    q_prev: np.ndarray = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    a_prev: np.ndarray = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    a_prev2: np.ndarray = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    support: float = 0.0
    fallen: bool = False
    fall_reason: str = ""
    step: int = 0

    def body_rotation(self) -> np.ndarray:
        return rot_z(self.yaw) @ rot_y(self.pitch)

    def base_pose(self, hf: Heightfield) -> SE3Transform:
        t = self.pos + np.array([hf.origin[0], hf.origin[1], 0.0])
        return SE3Transform(self.body_rotation(), t)

    def course_x(self, hf: Heightfield) -> float:
        return float(self.pos[0] + hf.origin[0])


def initial_state(hf: Heightfield, start_x: float = COURSE_START, start_y: float = 0.0) -> RobotState:
    local = np.array([start_x - hf.origin[0], start_y - hf.origin[1]])
    ground = float(hf.height_local(local))
    return RobotState(pos=snap([local[0], local[1], ground + H_TARGET]), support=ground)


def camera_mount(env: EnvParams | None = None) -> SE3Transform:
    env = env or EnvParams()
    offset = MOUNT_OFFSET + np.array([env.mount_dx, 0.0, env.mount_dz])
    return SE3Transform(rot_y(MOUNT_PITCH + env.mount_pitch_jitter), offset)


def camera_local(state: RobotState, env: EnvParams | None = None) -> SE3Transform:
    """Camera pose in terrain-local coordinates: base ∘ mount, position snapped."""
    mount = camera_mount(env)
    R = state.body_rotation()
    return SE3Transform(R @ mount.R, snap(state.pos + R @ mount.t))


def camera_world(state: RobotState, hf: Heightfield, env: EnvParams | None = None,
                 offset=(0.0, 0.0, 0.0)) -> SE3Transform:
    """World camera pose; ``offset`` translates the whole world (scene and robot)."""
    loc = camera_local(state, env)
    shift = np.array([hf.origin[0] + offset[0], hf.origin[1] + offset[1], offset[2]])
    return SE3Transform(loc.R, loc.t + shift)


def _footprint(state: RobotState, hf: Heightfield, pos: np.ndarray, yaw: float, points) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    pts = np.array([[pos[0] + f * c - l * s, pos[1] + f * s + l * c] for f, l in points])
    return hf.height_local(pts)


def step_walker(state: RobotState, action, hf: Heightfield, env: EnvParams | None = None) -> RobotState:
    """Advance one control step. Fallen states are absorbing."""
    env = env or EnvParams()
    if state.fallen:
        return replace(state, step=state.step + 1)
    a = np.asarray(action, dtype=np.float64)
    vx, wz, clearance = decode_action(a)
    q_new = state.q + 0.5 * (a - state.q)
    speed = vx * env.motor_strength
    yaw = state.yaw + wz * DT
    pos = state.pos.copy()
    pos[0] += speed * DT * math.cos(yaw)
    pos[1] += speed * DT * math.sin(yaw)

    front = _footprint(state, hf, pos, yaw, FRONT_FEET)
    mid = _footprint(state, hf, pos, yaw, MID_FEET)
    rear = _footprint(state, hf, pos, yaw, REAR_FEET)
    nose = _footprint(state, hf, pos, yaw, NOSE)
    every = np.concatenate([front, mid, rear])
    ref = state.support
    reason = ""
    if every.max() < ref - GAP_DROP:
        reason = "gap"
    elif speed > 0 and front.min() < ref - GAP_DROP and clearance < MISSTEP_CLEARANCE:
        reason = "misstep"
    elif speed > 0 and front.max() - ref > clearance + TRIP_MARGIN:
        reason = "trip"
    elif max(every.max(), nose.max()) > ref + COLLISION_RISE:
        reason = "collision"

    support = float(every.max()) if not reason else ref
    pos[2] += 0.5 * (support + H_TARGET - pos[2])
    valid_front = front[front > ref - GAP_DROP]
    valid_rear = rear[rear > ref - GAP_DROP]
    front_h = valid_front.max() if valid_front.size else support
    rear_h = valid_rear.max() if valid_rear.size else support
    pitch = 0.5 * (state.pitch - math.atan2(front_h - rear_h, 0.4))
    pos = snap(pos)

    return RobotState(
        pos=pos,
        yaw=yaw,
        pitch=pitch,
        q=q_new,
        q_prev=state.q.copy(),
        a_prev=a.copy(),
        a_prev2=state.a_prev.copy(),
        lin_vel=(pos - state.pos) / DT,
        ang_vel=np.array([0.0, (pitch - state.pitch) / DT, (yaw - state.yaw) / DT]),
        support=support,
        fallen=bool(reason),
        fall_reason=reason,
        step=state.step + 1,
    )


# ---------------------------------------------------------------------------
# observation vectors


def gravity_body(state: RobotState) -> np.ndarray:
    return state.body_rotation().T @ np.array([0.0, 0.0, -1.0])


def proprio_vector(state: RobotState) -> np.ndarray:
    """63 values: q_t, q_{t-1}, dq, a_{t-1}, a_{t-2}, body-frame gravity."""
    dq = (state.q - state.q_prev) / DT
    v = np.concatenate([state.q, state.q_prev, dq, state.a_prev, state.a_prev2, gravity_body(state)])
    assert v.shape == (PROPRIO_DIM,)
    return v


def privileged_vector(state: RobotState, env: EnvParams) -> np.ndarray:
    """14 values: course-frame linear velocity, angular velocity, 8 env params."""
    v = np.concatenate([state.lin_vel, state.ang_vel, env.as_array()])
    assert v.shape == (PRIVILEGED_DIM,)
    return v


def _bilinear(hf: Heightfield, local: np.ndarray) -> np.ndarray:
    """Bilinear interpolation between cell centres; outside the field is void."""
    gx = local[..., 0] / hf.cell - 0.5
    gy = local[..., 1] / hf.cell - 0.5
    x0, y0 = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    fx, fy = gx - x0, gy - y0
    out = np.zeros(gx.shape)
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            ix, iy = x0 + dx, y0 + dy
            inside = (ix >= 0) & (ix < hf.nx) & (iy >= 0) & (iy < hf.ny)
            h = np.full(gx.shape, VOID_HEIGHT)
            h[inside] = hf.heights[ix[inside], iy[inside]]
            out += wx * wy * h
    return out


def _map_points(state: RobotState, lateral: np.ndarray, forward: np.ndarray) -> np.ndarray:
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    L, F = np.meshgrid(lateral, forward, indexing="ij")
    return np.stack([state.pos[0] + F * c - L * s, state.pos[1] + F * s + L * c], axis=-1)


DENSE_LATERAL = np.linspace(-0.5, 0.5, DENSE_SHAPE[0])
DENSE_FORWARD = -0.3 + 0.05 * np.arange(DENSE_SHAPE[1])
SPARSE_LATERAL = np.linspace(-0.45, 0.45, SPARSE_SHAPE[0])
SPARSE_FORWARD = -0.3 + 0.1 * np.arange(SPARSE_SHAPE[1])


@dataclass
class ElevationMaps:
    dense: np.ndarray  # [21, 26]: axis 0 lateral (right to left), axis 1 forward
    sparse: np.ndarray  # [10, 19]


def sample_elevation(hf: Heightfield, state: RobotState) -> ElevationMaps:
    """Heading-aligned height grids ahead of the base, relative to base height."""
    base = state.pos[2]
    dense = _bilinear(hf, _map_points(state, DENSE_LATERAL, DENSE_FORWARD)) - base
    sparse = _bilinear(hf, _map_points(state, SPARSE_LATERAL, SPARSE_FORWARD)) - base
    return ElevationMaps(dense, sparse)


# ---------------------------------------------------------------------------
# rewards and metrics


@dataclass
class RewardTerms:
    forward: float
    energy: float
    height: float
    total: float

    def as_array(self) -> np.ndarray:
        return np.array([self.forward, self.energy, self.height, self.total])


def forward_reward(v: float, corrected: bool = False) -> float:
    dev = abs(v - V_TARGET) / V_TARGET
    return 1.0 - dev if corrected else 1.0 + dev


def energy_reward(torque, qdot) -> float:
    return float(np.sum(np.abs(np.asarray(torque) * np.asarray(qdot))))


def height_reward(h: float) -> float:
    return abs(h - H_TARGET)


def weighted_total(forward: float, energy: float, height: float, weights=REWARD_WEIGHTS) -> float:
    return weights[0] * forward + weights[1] * energy + weights[2] * height


def reward_terms(prev: RobotState, action, state: RobotState, corrected_forward: bool = False,
                 weights=REWARD_WEIGHTS) -> RewardTerms:
    """Rewards for the transition ``prev --action--> state``."""
    v = float(state.lin_vel[0] * math.cos(state.yaw) + state.lin_vel[1] * math.sin(state.yaw))
    torque = TORQUE_GAIN * (np.asarray(action, dtype=np.float64) - prev.q)
    qdot = (state.q - prev.q) / DT
    f = forward_reward(v, corrected_forward)
    e = energy_reward(torque, qdot)
    h = height_reward(float(state.pos[2] - state.support))
    return RewardTerms(f, e, h, weighted_total(f, e, h, weights))


def metrics(course_x: np.ndarray, fell: bool, start_x: float = COURSE_START,
            goal_x: float = COURSE_GOAL) -> tuple[float, bool]:
    """(traversing rate, success) from the per-step course-frame x of the base."""
    xs = np.asarray(course_x, dtype=np.float64)
    if xs.size == 0:
        return 0.0, False
    rate = float(np.clip((xs[-1] - start_x) / (goal_x - start_x), 0.0, 1.0))
    reached = bool(xs.max() >= goal_x)
    return (1.0 if reached else rate), reached and not fell
