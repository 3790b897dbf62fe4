"""Keypose toolkit: action token codec, decoding strategies, trajectory
metrics, and synthetic pick-and-place dataset generation."""

from .codec import (
    CodecConfig,
    DepthMode,
    Frame,
    Grammar,
    GrammarStep,
    TokenSequence,
    decode_keypose,
    decode_trajectory,
    depth_bin,
    encode_keypose,
    encode_robot_state,
    encode_trajectory,
)
from .decoder import (
    Beam,
    LogitDump,
    Scorer,
    SyntheticScorer,
    decode_beam,
    decode_beam_nms,
    decode_greedy,
    decode_sampling,
    nms_1d,
    read_dump,
    replay_scorer,
    write_dump,
)
from .geometry import (
    CameraModel,
    Gripper,
    ImageAction,
    Keypose,
    Pose6D,
    Trajectory,
    expand_waypoints,
    project,
    unproject,
)
from .metrics import (
    EpisodeRecord,
    MapResult,
    PRCurve,
    Prediction,
    UnitExchange,
    compute_ap,
    compute_map,
    is_success,
    reward,
    spearman,
    traj_l1,
)

__version__ = "0.1.0"
