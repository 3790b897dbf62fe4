"""Bidirectional mapping between keyposes and discrete loc/seg token strings.

Positions are quantized into localization tokens ``<locNNNN>`` (1024 ids,
0-padded to 4 digits) and orientations into segmentation tokens ``<segNNN>``
(128 ids, 3 digits).  A keypose is six tokens -- three position coordinates
followed by three intrinsic X-Y-Z Euler angles -- and a trajectory is two
keyposes (12 tokens).  The rendered wire format groups tokens in triples
separated by single spaces:

    <loc0243><loc0423><loc0751> <seg063><seg079><seg112> <loc0403>... ...

Quantization maps a value in ``[lo, hi]`` to ``clamp(floor(t * n), 0, n-1)``
with ``t`` the normalized coordinate; the exact top edge ``t == 1`` clamps
into the last bin, everything else outside the range raises ``OutOfRange``.
Decoding returns bin centers, so the round-trip error is at most half a bin.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

import numpy as np

from .errors import GrammarViolation, OutOfRange
from .geometry import (
    CameraModel,
    Gripper,
    ImageAction,
    Keypose,
    Pose6D,
    Trajectory,
    euler_xyz_to_quat,
    project,
    quat_to_euler_xyz,
    unproject,
)

N_LOC_TOKENS = 1024
N_SEG_TOKENS = 128
VOCAB_SIZE = N_LOC_TOKENS + N_SEG_TOKENS
SEG_BASE = N_LOC_TOKENS

ANGLE_RANGE = (-180.0, 180.0)

_TOKEN_RE = re.compile(r"<loc(\d{4})>|<seg(\d{3})>")


class Frame(str, enum.Enum):
    IMAGE = "image"
    ROBOT = "robot"


class DepthMode(str, enum.Enum):
    #: depth shares the same token band as the x/y position coordinates
    SHARED_LOC = "shared_loc"
    #: depth uses the bin band [n_loc, 2*n_loc) freed by a reduced n_loc
    SEPARATE_BAND = "separate_band"


@dataclass(frozen=True)
class CodecConfig:
    """Configuration of the action token codec.

    ``position_range`` is the robot-frame axis-aligned box as
    ``((xlo, xhi), (ylo, yhi), (zlo, zhi))`` in meters; it is only used when
    ``frame`` is ``ROBOT``.  ``depth_range`` (meters) is only used when
    ``frame`` is ``IMAGE``.
    """

    n_loc: int = 1024
    n_seg: int = 128
    frame: Frame = Frame.IMAGE
    depth_mode: DepthMode = DepthMode.SHARED_LOC
    depth_range: tuple = (0.2, 2.0)
    position_range: tuple = ((-0.6, 0.6), (-0.6, 0.6), (-0.6, 0.6))

    def __post_init__(self):
        # accept plain strings; identity checks below rely on enum members
        object.__setattr__(self, "frame", Frame(self.frame))
        object.__setattr__(self, "depth_mode", DepthMode(self.depth_mode))
        if self.n_loc not in (1024, 512, 256, 128):
            raise ValueError(f"n_loc must be one of 1024/512/256/128, got {self.n_loc}")
        if self.n_seg != N_SEG_TOKENS:
            raise ValueError("n_seg is fixed at 128")
        if self.depth_mode is DepthMode.SEPARATE_BAND and self.n_loc >= N_LOC_TOKENS:
            raise ValueError("separate_band depth requires n_loc < 1024")
        if not self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth_range must satisfy d_min < d_max")
        for lo, hi in self.position_range:
            if not lo < hi:
                raise ValueError("position_range box must have positive volume")

    @property
    def depth_band_offset(self) -> int:
        return self.n_loc if self.depth_mode is DepthMode.SEPARATE_BAND else 0

    def grammar(self) -> "Grammar":
        """Token grammar of a full trajectory (12 steps) under this config."""
        if self.frame is Frame.IMAGE:
            off = self.depth_band_offset
            coord_steps = [
                GrammarStep("loc", 0, self.n_loc),
                GrammarStep("loc", 0, self.n_loc),
                GrammarStep("loc", off, off + self.n_loc),
            ]
        else:
            coord_steps = [GrammarStep("loc", 0, self.n_loc)] * 3
        seg_steps = [GrammarStep("seg", SEG_BASE, SEG_BASE + N_SEG_TOKENS)] * 3
        return Grammar(tuple(coord_steps + seg_steps) * 2)


# ---------------------------------------------------------------------------
# token text rendering
# ---------------------------------------------------------------------------

def token_to_text(token_id: int) -> str:
    if 0 <= token_id < N_LOC_TOKENS:
        return f"<loc{token_id:04d}>"
    if SEG_BASE <= token_id < VOCAB_SIZE:
        return f"<seg{token_id - SEG_BASE:03d}>"
    raise ValueError(f"token id {token_id} outside vocabulary [0, {VOCAB_SIZE})")


@dataclass(frozen=True)
class TokenSequence:
    """An ordered sequence of loc/seg token ids with a canonical text form."""

    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        for pos, i in enumerate(ids):
            if not 0 <= i < VOCAB_SIZE:
                raise GrammarViolation(f"token id {i} outside vocabulary", pos)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids)

    def text(self) -> str:
        """Render as wire text: triples of tokens separated by single spaces."""
        groups = [
            "".join(token_to_text(i) for i in self.ids[k:k + 3])
            for k in range(0, len(self.ids), 3)
        ]
        return " ".join(groups)

    @staticmethod
    def from_text(text: str) -> "TokenSequence":
        """Parse wire text; whitespace between tokens is ignored.

        Raises GrammarViolation at the index of the first offending token if
        the text contains anything other than well-formed loc/seg tokens.
        """
        ids = []
        cursor = 0
        for m in _TOKEN_RE.finditer(text):
            if text[cursor:m.start()].strip():
                raise GrammarViolation(
                    f"unexpected text {text[cursor:m.start()].strip()!r}", len(ids)
                )
            if m.group(1) is not None:
                idx = int(m.group(1))
                if idx >= N_LOC_TOKENS:
                    raise GrammarViolation(f"loc index {idx} out of range", len(ids))
                ids.append(idx)
            else:
                idx = int(m.group(2))
                if idx >= N_SEG_TOKENS:
                    raise GrammarViolation(f"seg index {idx} out of range", len(ids))
                ids.append(SEG_BASE + idx)
            cursor = m.end()
        if text[cursor:].strip():
            raise GrammarViolation(f"unexpected text {text[cursor:].strip()!r}", len(ids))
        return TokenSequence(tuple(ids))


@dataclass(frozen=True)
class GrammarStep:
    """One decoding step: token kind plus the half-open valid id band."""

    kind: str  # "loc" or "seg"
    lo: int
    hi: int

    @property
    def width(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class Grammar:
    """Per-step valid token bands for an autoregressive decode."""

    steps: tuple

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, k) -> GrammarStep:
        return self.steps[k]

    def validate(self, ids) -> None:
        """Check a full or partial token sequence against the grammar."""
        if len(ids) > len(self.steps):
            raise GrammarViolation("sequence longer than grammar", len(self.steps))
        for pos, (i, step) in enumerate(zip(ids, self.steps)):
            if not step.lo <= i < step.hi:
                raise GrammarViolation(
                    f"token id {i} not in {step.kind} band [{step.lo}, {step.hi})",
                    pos,
                )


# ---------------------------------------------------------------------------
# scalar quantizers (vectorized; scalars pass through as 0-d arrays)
# ---------------------------------------------------------------------------

def quantize(values, lo: float, hi: float, n: int, coordinate: str):
    """Bin values in [lo, hi] into n bins; the top edge clamps into bin n-1."""
    if isinstance(values, (int, float)):
        v = float(values)
        if not lo <= v <= hi:  # also rejects NaN
            raise OutOfRange(coordinate, v, lo, hi)
        return min(int((v - lo) / (hi - lo) * n), n - 1)
    v = np.asarray(values, dtype=np.float64)
    bad = (v < lo) | (v > hi) | ~np.isfinite(v)
    if np.any(bad):
        offender = np.atleast_1d(v)[np.atleast_1d(bad)][0]
        raise OutOfRange(coordinate, float(offender), lo, hi)
    t = (v - lo) / (hi - lo)
    return np.minimum(np.floor(t * n), n - 1).astype(np.int64)


def dequantize(bins, lo: float, hi: float, n: int) -> np.ndarray:
    """Map bin indices to their bin centers: lo + (idx + 0.5)/n * (hi - lo)."""
    idx = np.asarray(bins, dtype=np.float64)
    return lo + (idx + 0.5) / n * (hi - lo)


def depth_bin(d, cfg: CodecConfig) -> np.ndarray:
    """Token id(s) encoding depth d (meters) under the configured depth mode."""
    lo, hi = cfg.depth_range
    return quantize(d, lo, hi, cfg.n_loc, "depth") + cfg.depth_band_offset


def depth_unbin(token_id, cfg: CodecConfig) -> np.ndarray:
    lo, hi = cfg.depth_range
    return dequantize(np.asarray(token_id) - cfg.depth_band_offset, lo, hi, cfg.n_loc)


def angles_to_bins(angles_deg) -> np.ndarray:
    """Seg bin indices (0..127) of Euler angles in [-180, 180)."""
    a = np.asarray(angles_deg, dtype=np.float64)
    if np.any(a >= 180.0):
        offender = np.atleast_1d(a)[np.atleast_1d(a >= 180.0)][0]
        raise OutOfRange("angle", float(offender), -180.0, 180.0)
    return quantize(a, ANGLE_RANGE[0], ANGLE_RANGE[1], N_SEG_TOKENS, "angle")


def bins_to_angles(bins) -> np.ndarray:
    return dequantize(bins, ANGLE_RANGE[0], ANGLE_RANGE[1], N_SEG_TOKENS)


# ---------------------------------------------------------------------------
# keypose encode / decode
# ---------------------------------------------------------------------------

def _require_camera(cam, cfg):
    if cfg.frame is Frame.IMAGE and cam is None:
        raise ValueError("image-frame codec requires a camera model")


def encode_pose(pose: Pose6D, cam: CameraModel | None, cfg: CodecConfig) -> TokenSequence:
    """Encode a single pose into six tokens (3 position, 3 orientation)."""
    _require_camera(cam, cfg)
    if cfg.frame is Frame.IMAGE:
        act = project(pose, cam)
        pos_ids = [
            int(quantize(act.u, 0.0, 1.0, cfg.n_loc, "u")),
            int(quantize(act.v, 0.0, 1.0, cfg.n_loc, "v")),
            int(depth_bin(act.depth, cfg)),
        ]
        angles = quat_to_euler_xyz(act.orientation)
    else:
        pos_ids = [
            int(quantize(pose.position[axis], lo, hi, cfg.n_loc, "xyz"[axis]))
            for axis, (lo, hi) in enumerate(cfg.position_range)
        ]
        angles = quat_to_euler_xyz(pose.orientation)
    seg_ids = [SEG_BASE + int(b) for b in angles_to_bins(angles)]
    return TokenSequence(tuple(pos_ids + seg_ids))


def decode_pose(tokens: TokenSequence, cam: CameraModel | None, cfg: CodecConfig) -> Pose6D:
    """Decode six tokens back to a world pose (bin centers, unprojected)."""
    _require_camera(cam, cfg)
    grammar = Grammar(cfg.grammar().steps[:6])
    grammar.validate(tokens.ids)
    if len(tokens) != 6:
        raise GrammarViolation("keypose requires exactly 6 tokens", len(tokens))
    angles = bins_to_angles([i - SEG_BASE for i in tokens.ids[3:]])
    q = euler_xyz_to_quat(angles)
    if cfg.frame is Frame.IMAGE:
        u = float(dequantize(tokens.ids[0], 0.0, 1.0, cfg.n_loc))
        v = float(dequantize(tokens.ids[1], 0.0, 1.0, cfg.n_loc))
        d = float(depth_unbin(tokens.ids[2], cfg))
        return unproject(ImageAction(u=u, v=v, depth=d, orientation=q), cam)
    pos = [
        float(dequantize(tokens.ids[axis], lo, hi, cfg.n_loc))
        for axis, (lo, hi) in enumerate(cfg.position_range)
    ]
    return Pose6D(np.array(pos), q)


def encode_keypose(kp: Keypose, cam: CameraModel | None, cfg: CodecConfig) -> TokenSequence:
    return encode_pose(kp.pose, cam, cfg)


def decode_keypose(
    tokens: TokenSequence,
    cam: CameraModel | None,
    cfg: CodecConfig,
    gripper: Gripper = Gripper.GRASP,
) -> Keypose:
    return Keypose(decode_pose(tokens, cam, cfg), gripper)


def encode_robot_state(pose: Pose6D, cam: CameraModel | None, cfg: CodecConfig) -> TokenSequence:
    """Encode the current end-effector pose; same scheme as action keyposes."""
    return encode_pose(pose, cam, cfg)


def encode_trajectory(traj: Trajectory, cam: CameraModel | None, cfg: CodecConfig) -> TokenSequence:
    return encode_keypose(traj.grasp, cam, cfg) + encode_keypose(traj.release, cam, cfg)


# ---------------------------------------------------------------------------
# quantization error bounds
# ---------------------------------------------------------------------------

#: worst-case rotation angle between a pose and its decoded tokens: three
#: Euler channels, each off by at most half a seg bin (bi-invariant metric
#: is subadditive under composition).
ROTATION_BOUND_DEG = 3 * (360.0 / N_SEG_TOKENS) / 2.0


def image_position_bound(u: float, v: float, d: float, cam: CameraModel, cfg: CodecConfig) -> float:
    """Exact worst-case position error (meters) of an image-frame decode.

    ``(u, v, d)`` are the decoded bin-center values.  The camera-frame point
    is bilinear in (u, d) and (v, d), so the bound is exact, not first-order.
    """
    du = 1.0 / (2.0 * cfg.n_loc)
    dd = (cfg.depth_range[1] - cfg.depth_range[0]) / (2.0 * cfg.n_loc)
    ex = (cam.width * d / cam.fx) * du \
        + (abs(u * cam.width - cam.cx) / cam.fx) * dd \
        + (cam.width / cam.fx) * du * dd
    ey = (cam.height * d / cam.fy) * du \
        + (abs(v * cam.height - cam.cy) / cam.fy) * dd \
        + (cam.height / cam.fy) * du * dd
    return float(np.sqrt(ex * ex + ey * ey + dd * dd))


def robot_position_bound(cfg: CodecConfig) -> float:
    """Worst-case position error (meters) of a robot-frame decode."""
    half_bins = [(hi - lo) / (2.0 * cfg.n_loc) for lo, hi in cfg.position_range]
    return float(np.linalg.norm(half_bins))


def decode_trajectory(tokens: TokenSequence, cam: CameraModel | None, cfg: CodecConfig) -> Trajectory:
    """Decode 12 tokens into a grasp -> release trajectory."""
    cfg.grammar().validate(tokens.ids)
    if len(tokens) != 12:
        raise GrammarViolation("trajectory requires exactly 12 tokens", len(tokens))
    grasp = decode_keypose(TokenSequence(tokens.ids[:6]), cam, cfg, Gripper.GRASP)
    release = decode_keypose(TokenSequence(tokens.ids[6:]), cam, cfg, Gripper.RELEASE)
    return Trajectory((grasp, release))
