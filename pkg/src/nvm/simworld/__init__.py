"""Synthetic terrain world: heightfields, depth camera, kinematic walker, episodes."""

from .camera import (
    MAX_DEPTH,
    NOISE_PIXELS,
    DepthFrame,
    Intrinsics,
    apply_depth_noise,
    noise_indices,
    read_pgm,
    render_depth,
    render_depth_metres,
    write_pgm,
)
from .episodes import EpisodeRecord, Observation, array_to_pose, collect_episode, pose_to_array
from .robot import (
    DENSE_SHAPE,
    PRIVILEGED_DIM,
    PROPRIO_DIM,
    SPARSE_SHAPE,
    EnvParams,
    ElevationMaps,
    RewardTerms,
    RobotState,
    camera_local,
    camera_world,
    decode_action,
    encode_command,
    initial_state,
    metrics,
    privileged_vector,
    proprio_vector,
    reward_terms,
    sample_elevation,
    step_walker,
)
from .terrain import KINDS, VOID_HEIGHT, Heightfield, gen_terrain, load_terrain, save_terrain
