"""Synthetic pick-and-place dataset generation with CLEVR-style assets.

Scenes place 2-4 simple geometric objects (cube, block, sphere; two sizes;
eight colors) on a table plane at z=0, sample a camera from an easy or hard
randomization band, derive an analytic top-down grasp/release trajectory,
and serialize everything as one JSONL record per scene.  Rendering is a
flat-shaded analytic ray caster with a z-buffer -- enough to validate codecs,
crops, and metrics, deliberately not photorealistic.

Generation is reproducible: each scene's RNG stream is derived from
``(dataset seed, scene index)``, so records are byte-identical across runs
and scenes can be generated in parallel.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import codec as codec_mod
from .codec import CodecConfig, Frame, TokenSequence, encode_pose, encode_trajectory
from .errors import (
    BehindCamera,
    DegenerateCrop,
    EmptyPool,
    OutOfRange,
    PlacementFailure,
)
from .geometry import (
    CameraModel,
    Gripper,
    Keypose,
    Pose6D,
    Trajectory,
    euler_xyz_to_quat,
    project,
    quat_multiply,
)

SCHEMA_VERSION = 1

#: standard CLEVR palette (8 colors)
CLEVR_COLORS = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}

RELEASE_CLEARANCE = 0.005  # meters above the target top face


class Shape(str, enum.Enum):
    CUBE = "cube"
    BLOCK = "block"
    SPHERE = "sphere"


class SizeClass(str, enum.Enum):
    LARGE = "large"
    SMALL = "small"

    @property
    def meters(self) -> float:
        return 0.07 if self is SizeClass.LARGE else 0.035


@dataclass(frozen=True)
class AssetSpec:
    """A CLEVR-style asset: shape + nominal diameter + color."""

    shape: Shape
    size: SizeClass
    color: str

    def __post_init__(self):
        if self.color not in CLEVR_COLORS:
            raise ValueError(f"unknown color {self.color!r}")

    @property
    def half_extents(self) -> np.ndarray:
        """Axis-aligned half extents (meters) in the object's own frame.

        A block is a 2:1:1 cuboid whose longest side equals the nominal
        diameter; spheres report their radius on all axes.
        """
        s = self.size.meters
        if self.shape is Shape.BLOCK:
            return np.array([s / 2.0, s / 4.0, s / 4.0])
        return np.array([s / 2.0, s / 2.0, s / 2.0])

    @property
    def name(self) -> str:
        return f"{self.size.value} {self.color} {self.shape.value}"

    @property
    def rgb(self) -> tuple:
        return CLEVR_COLORS[self.color]


def all_asset_specs() -> list:
    return [
        AssetSpec(shape, size, color)
        for shape in Shape
        for size in SizeClass
        for color in CLEVR_COLORS
    ]


def parse_object_name(name: str) -> AssetSpec:
    """Inverse of ``AssetSpec.name`` ("large yellow sphere" -> spec)."""
    parts = name.strip().split()
    if len(parts) != 3:
        raise ValueError(f"cannot parse object name {name!r}")
    size, color, shape = parts
    return AssetSpec(Shape(shape), SizeClass(size), color)


@dataclass(frozen=True, eq=False)
class ObjectState:
    """An asset placed on the table: center position + yaw about world z."""

    spec: AssetSpec
    position: np.ndarray  # center, meters; z == half height for resting objects
    yaw_deg: float

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)

    @property
    def top_z(self) -> float:
        return float(self.position[2] + self.spec.half_extents[2])

    def to_json(self) -> dict:
        return {
            "shape": self.spec.shape.value,
            "size": self.spec.size.value,
            "color": self.spec.color,
            "position": [float(v) for v in self.position],
            "yaw_deg": float(self.yaw_deg),
        }

    @staticmethod
    def from_json(obj: dict) -> "ObjectState":
        return ObjectState(
            AssetSpec(Shape(obj["shape"]), SizeClass(obj["size"]), obj["color"]),
            np.array(obj["position"]),
            obj["yaw_deg"],
        )


# ---------------------------------------------------------------------------
# text templating
# ---------------------------------------------------------------------------

DEFAULT_TEMPLATES = (
    "move {src} onto {dst}",
    "put the {src} on the {dst}",
    "place the {src} onto the {dst}",
    "pick up the {src} and put it on the {dst}",
    "stack the {src} on top of the {dst}",
)


def fill_template(template: str, src: AssetSpec, dst: AssetSpec) -> str:
    return template.format(src=src.name, dst=dst.name)


def instruction_text(scene: "SceneSpec", templates=DEFAULT_TEMPLATES, seed=0) -> str:
    """Templated instruction for the scene's task, deterministic per seed.

    Object names render as ``<size> <color> <shape>``.
    """
    if not templates:
        raise ValueError("templates must be nonempty")
    rng = np.random.default_rng(seed)
    template = templates[int(rng.integers(len(templates)))]
    return fill_template(
        template, scene.objects[scene.task[0]].spec, scene.objects[scene.task[1]].spec
    )


def parse_instruction(text: str, templates=DEFAULT_TEMPLATES) -> tuple:
    """Recover (source, target) asset specs from templated instruction text."""
    for template in templates:
        pattern = re.escape(template)
        pattern = pattern.replace(re.escape("{src}"), r"(?P<src>.+?)")
        pattern = pattern.replace(re.escape("{dst}"), r"(?P<dst>.+)")
        m = re.fullmatch(pattern, text.strip())
        if m:
            return parse_object_name(m.group("src")), parse_object_name(m.group("dst"))
    raise ValueError(f"instruction {text!r} matches no template")


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraBand:
    """Randomization band for camera pose and field of view."""

    cone_deg: float
    fov_deg: tuple
    distance_m: tuple
    elevation_deg: float = 55.0
    azimuth_deg: float = -90.0
    target_jitter_m: float = 0.01


EASY_BAND = CameraBand(cone_deg=10.0, fov_deg=(58.0, 62.0), distance_m=(0.85, 0.95),
                       target_jitter_m=0.005)
HARD_BAND = CameraBand(cone_deg=35.0, fov_deg=(40.0, 70.0), distance_m=(0.65, 1.2),
                       target_jitter_m=0.03)


@dataclass(frozen=True)
class GenConfig:
    image_width: int = 640
    image_height: int = 480
    easy_band: CameraBand = EASY_BAND
    hard_band: CameraBand = HARD_BAND
    workspace_easy_m: float = 0.12
    workspace_hard_m: float = 0.22
    n_objects_easy: tuple = (2, 3)
    n_objects_hard: tuple = (2, 4)
    templates: tuple = DEFAULT_TEMPLATES
    max_attempts: int = 100

    def band(self, mode: str) -> CameraBand:
        return self.easy_band if mode == "easy" else self.hard_band


@dataclass(frozen=True, eq=False)
class SceneSpec:
    mode: str
    objects: tuple
    camera: CameraModel
    instruction: str
    task: tuple  # (source index, target index)
    robot_state: Pose6D


def look_at(eye: np.ndarray, target: np.ndarray) -> Pose6D:
    """World-to-camera extrinsic for a camera at ``eye`` looking at ``target``.

    OpenCV axes: +Z forward along the view ray, +Y toward the image bottom.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(np.cross(forward, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r_cam_to_world = np.stack([right, down, forward], axis=1)
    r_world_to_cam = r_cam_to_world.T
    return Pose6D.from_matrix(r_world_to_cam, -r_world_to_cam @ eye)


def _sample_camera(rng, band: CameraBand, cfg: GenConfig) -> CameraModel:
    fov = rng.uniform(*band.fov_deg)
    fx = (cfg.image_width / 2.0) / np.tan(np.radians(fov) / 2.0)
    elevation = np.radians(band.elevation_deg + rng.uniform(-band.cone_deg, band.cone_deg))
    azimuth = np.radians(band.azimuth_deg + rng.uniform(-band.cone_deg, band.cone_deg))
    dist = rng.uniform(*band.distance_m)
    eye = dist * np.array(
        [np.cos(elevation) * np.cos(azimuth),
         np.cos(elevation) * np.sin(azimuth),
         np.sin(elevation)]
    )
    target = rng.uniform(-band.target_jitter_m, band.target_jitter_m, size=3)
    return CameraModel(
        fx=float(fx), fy=float(fx),
        cx=cfg.image_width / 2.0, cy=cfg.image_height / 2.0,
        width=cfg.image_width, height=cfg.image_height,
        extrinsic=look_at(eye, target),
    )


def _place_objects(rng, mode: str, cfg: GenConfig) -> list:
    ws = cfg.workspace_easy_m if mode == "easy" else cfg.workspace_hard_m
    lo, hi = cfg.n_objects_easy if mode == "easy" else cfg.n_objects_hard
    count = int(rng.integers(lo, hi + 1))
    specs = all_asset_specs()
    chosen = [specs[i] for i in rng.choice(len(specs), size=count, replace=False)]
    placed = []
    for spec in chosen:
        he = spec.half_extents
        # conservative bounding-circle separation, valid for any yaw
        radius = float(np.hypot(he[0], he[1]))
        for attempt in range(cfg.max_attempts + 1):
            if attempt == cfg.max_attempts:
                raise PlacementFailure(
                    f"could not place {spec.name} after {cfg.max_attempts} attempts"
                )
            xy = rng.uniform(-ws, ws, size=2)
            ok = all(
                np.hypot(*(xy - other.position[:2])) > radius
                + float(np.hypot(*other.spec.half_extents[:2])) + 0.005
                for other in placed
            )
            if ok:
                yaw = 0.0 if spec.shape is Shape.SPHERE else float(rng.uniform(-180.0, 180.0))
                placed.append(
                    ObjectState(spec, np.array([xy[0], xy[1], he[2]]), yaw)
                )
                break
    return placed


def _sample_state(rng) -> Pose6D:
    pos = np.array(
        [rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.25, 0.42)]
    )
    yaw = rng.uniform(-180.0, 180.0)
    return Pose6D(pos, _top_down_quat(yaw))


def _top_down_quat(yaw_deg: float) -> np.ndarray:
    """Gripper orientation: z-axis along world -z, closing axis at ``yaw_deg``."""
    qz = euler_xyz_to_quat(np.array([0.0, 0.0, yaw_deg]))
    qx180 = euler_xyz_to_quat(np.array([180.0, 0.0, 0.0]))
    return quat_multiply(qz, qx180)


def _encodable(scene: SceneSpec, cfg: CodecConfig) -> bool:
    """True when the trajectory and robot state encode in both frames."""
    traj = compute_trajectory(scene)
    poses = [traj.grasp.pose, traj.release.pose, scene.robot_state]
    for frame in (Frame.IMAGE, Frame.ROBOT):
        frame_cfg = dataclasses.replace(cfg, frame=frame)
        cam = scene.camera if frame is Frame.IMAGE else None
        for pose in poses:
            try:
                encode_pose(pose, cam, frame_cfg)
            except (OutOfRange, BehindCamera):
                return False
    return True


def _objects_visible(scene: SceneSpec) -> bool:
    """Both task objects' centers must project inside the frame."""
    for idx in scene.task:
        obj = scene.objects[idx]
        try:
            act = project(Pose6D(obj.position, np.array([1.0, 0, 0, 0])), scene.camera)
        except BehindCamera:
            return False
        if not act.in_frame:
            return False
    return True


def sample_scene(
    mode: str,
    seed,
    gen_cfg: GenConfig | None = None,
    codec_cfg: CodecConfig | None = None,
) -> SceneSpec:
    """Sample a scene, deterministic per seed.

    Hard mode draws the camera from a wide pose/FOV band, easy from a narrow
    one.  Scenes are rejection-sampled until the task objects pass the
    visibility test and the trajectory and robot state are encodable in both
    frames, so every emitted scene yields a self-consistent record.

    Raises:
        PlacementFailure: after ``max_attempts`` rejected layouts.
    """
    if mode not in ("easy", "hard"):
        raise ValueError("mode must be 'easy' or 'hard'")
    gen_cfg = gen_cfg or GenConfig()
    codec_cfg = codec_cfg or CodecConfig()
    rng = np.random.default_rng(seed)
    for _ in range(gen_cfg.max_attempts):
        objects = _place_objects(rng, mode, gen_cfg)
        camera = _sample_camera(rng, gen_cfg.band(mode), gen_cfg)
        task = tuple(int(i) for i in rng.choice(len(objects), size=2, replace=False))
        template = gen_cfg.templates[int(rng.integers(len(gen_cfg.templates)))]
        instruction = fill_template(
            template, objects[task[0]].spec, objects[task[1]].spec
        )
        scene = SceneSpec(
            mode=mode,
            objects=tuple(objects),
            camera=camera,
            instruction=instruction,
            task=task,
            robot_state=_sample_state(rng),
        )
        if _objects_visible(scene) and _encodable(scene, codec_cfg):
            return scene
    raise PlacementFailure(
        f"no visible, encodable scene found in {gen_cfg.max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# analytic trajectory
# ---------------------------------------------------------------------------

def grasp_yaw_deg(obj: ObjectState) -> float:
    """Gripper yaw: closing axis along the object's shortest horizontal extent.

    Spheres use yaw 0 by convention (rotationally symmetric).  For cubes the
    extents tie and the local y axis is used, keeping fingers parallel to
    faces.  Yaws are canonicalized to [-90, 90) since the closing axis is a
    line, not a direction.
    """
    if obj.spec.shape is Shape.SPHERE:
        return 0.0
    he = obj.spec.half_extents
    # shortest horizontal axis: local y on ties (hy <= hx)
    axis_angle = obj.yaw_deg + (90.0 if he[1] <= he[0] else 0.0)
    return float((axis_angle + 90.0) % 180.0 - 90.0)


def compute_trajectory(scene: SceneSpec) -> Trajectory:
    """Analytic grasp/release keyposes for the scene's task.

    The grasp is top-down at the source center; the release translates the
    source onto the target's top face plus a small clearance, keeping the
    grasp orientation.
    """
    src = scene.objects[scene.task[0]]
    tgt = scene.objects[scene.task[1]]
    q = _top_down_quat(grasp_yaw_deg(src))
    grasp = Pose6D(src.position, q)
    release_z = tgt.top_z + float(src.spec.half_extents[2]) + RELEASE_CLEARANCE
    release = Pose6D(np.array([tgt.position[0], tgt.position[1], release_z]), q)
    return Trajectory((Keypose(grasp, Gripper.GRASP), Keypose(release, Gripper.RELEASE)))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

FAR_PLANE = 5.0
BACKGROUND_RGB = (200, 200, 200)
_LIGHT_DIR_WORLD = np.array([0.35, -0.25, -0.9])


def _rot_z(yaw_deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(yaw_deg)), np.sin(np.radians(yaw_deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def render_stub(scene: SceneSpec, far_plane: float = FAR_PLANE) -> tuple:
    """Flat-shaded analytic rasterization with a z-buffer.

    Returns ``(rgb uint8 HxWx3, depth float64 HxW in meters)``.  Pixels that
    hit no object carry the background color and ``far_plane`` depth; the
    object mask is therefore ``depth < far_plane``.  Deterministic.
    """
    cam = scene.camera
    w, h = cam.width, cam.height
    xs = (np.arange(w) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(h) + 0.5 - cam.cy) / cam.fy
    dir_x, dir_y = np.meshgrid(xs, ys)
    dirs = np.stack([dir_x, dir_y, np.ones_like(dir_x)], axis=-1)  # z = 1: t is depth

    ext = cam.extrinsic
    r_ext = ext.rotation_matrix()
    light_cam = r_ext @ (_LIGHT_DIR_WORLD / np.linalg.norm(_LIGHT_DIR_WORLD))

    depth = np.full((h, w), far_plane)
    rgb = np.empty((h, w, 3))
    rgb[:] = np.array(BACKGROUND_RGB, dtype=np.float64)

    for obj in scene.objects:
        center_cam = ext.transform_point(obj.position)
        color = np.array(obj.spec.rgb, dtype=np.float64)
        if obj.spec.shape is Shape.SPHERE:
            t, normal = _intersect_sphere(dirs, center_cam, obj.spec.half_extents[0])
        else:
            r_obj = r_ext @ _rot_z(obj.yaw_deg)
            t, normal = _intersect_box(dirs, center_cam, r_obj, obj.spec.half_extents)
        hit = np.isfinite(t) & (t < depth)
        if not np.any(hit):
            continue
        lambert = np.clip(-(normal @ light_cam), 0.0, 1.0)
        shade = 0.45 + 0.55 * lambert
        depth[hit] = t[hit]
        rgb[hit] = color * shade[hit][..., None]

    return np.clip(np.round(rgb), 0, 255).astype(np.uint8), depth


def _intersect_sphere(dirs, center, radius):
    a = np.sum(dirs * dirs, axis=-1)
    b = dirs @ center
    c = float(center @ center - radius * radius)
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
        t_near = (b - sqrt_disc) / a
    t = np.where((disc >= 0) & (t_near > 1e-6), t_near, np.inf)
    point = dirs * t[..., None]
    normal = (point - center) / radius
    return t, np.where(np.isfinite(t[..., None]), normal, 0.0)


def _intersect_box(dirs, center, rotation, half_extents):
    # Rays in the box frame; slab test per axis.
    d_box = dirs @ rotation  # == rotation.T applied to each dir
    o_box = -(rotation.T @ center)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_box
        t1 = (-half_extents - o_box) * inv
        t2 = (half_extents - o_box) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    # Parallel rays: valid only if the origin lies inside the slab.
    parallel = d_box == 0.0
    inside = np.abs(o_box) <= half_extents
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    tmin = np.max(t_lo, axis=-1)
    tmax = np.min(t_hi, axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    t = np.where(hit, tmin, np.inf)
    # Normal: axis of the slab that produced tmin, oriented against the ray.
    axis = np.argmax(t_lo, axis=-1)
    sign = -np.sign(np.take_along_axis(d_box, axis[..., None], axis=-1))[..., 0]
    normal_box = np.eye(3)[axis] * sign[..., None]
    normal = normal_box @ rotation.T
    return t, np.where(np.isfinite(t[..., None]), normal, 0.0)


# ---------------------------------------------------------------------------
# depth colorization and augmentation
# ---------------------------------------------------------------------------

_VIRIDIS_HEX = (
    "44015444025645045745055946075a46085c460a5d460b5e470d60470e61471063471164"
    "47136548146748166848176948186a481a6c481b6d481c6e481d6f481f70482071482173"
    "482374482475482576482677482878482979472a7a472c7a472d7b472e7c472f7d46307e"
    "46327e46337f463480453581453781453882443983443a83443b84433d84433e85423f85"
    "4240864241864142874144874045884046883f47883f48893e49893e4a893e4c8a3d4d8a"
    "3d4e8a3c4f8a3c508b3b518b3b528b3a538b3a548c39558c39568c38588c38598c375a8c"
    "375b8d365c8d365d8d355e8d355f8d34608d34618d33628d33638d32648e32658e31668e"
    "31678e31688e30698e306a8e2f6b8e2f6c8e2e6d8e2e6e8e2e6f8e2d708e2d718e2c718e"
    "2c728e2c738e2b748e2b758e2a768e2a778e2a788e29798e297a8e297b8e287c8e287d8e"
    "277e8e277f8e27808e26818e26828e26828e25838e25848e25858e24868e24878e23888e"
    "23898e238a8d228b8d228c8d228d8d218e8d218f8d21908d21918c20928c20928c20938c"
    "1f948c1f958b1f968b1f978b1f988b1f998a1f9a8a1e9b8a1e9c891e9d891f9e891f9f88"
    "1fa0881fa1881fa1871fa28720a38620a48621a58521a68522a78522a88423a98324aa83"
    "25ab8225ac8226ad8127ad8128ae8029af7f2ab07f2cb17e2db27d2eb37c2fb47c31b57b"
    "32b67a34b67935b77937b87838b9773aba763bbb753dbc743fbc7340bd7242be7144bf70"
    "46c06f48c16e4ac16d4cc26c4ec36b50c46a52c56954c56856c66758c7655ac8645cc863"
    "5ec96260ca6063cb5f65cb5e67cc5c69cd5b6ccd5a6ece5870cf5773d05675d05477d153"
    "7ad1517cd2507fd34e81d34d84d44b86d54989d5488bd6468ed64590d74393d74195d840"
    "98d83e9bd93c9dd93ba0da39a2da37a5db36a8db34aadc32addc30b0dd2fb2dd2db5de2b"
    "b8de29bade28bddf26c0df25c2df23c5e021c8e020cae11fcde11dd0e11cd2e21bd5e21a"
    "d8e219dae319dde318dfe318e2e418e5e419e7e419eae51aece51befe51cf1e51df4e61e"
    "f6e620f8e621fbe723fde725"
)
#: embedded 256-entry viridis lookup table (RGB uint8)
VIRIDIS_LUT = np.frombuffer(bytes.fromhex(_VIRIDIS_HEX), dtype=np.uint8).reshape(256, 3)


def depth_to_rgb(depth: np.ndarray, depth_range: tuple = (0.2, 2.0)) -> np.ndarray:
    """Colorize a depth raster through the embedded viridis LUT.

    Depth is normalized over ``depth_range`` and clamped; values between LUT
    entries are linearly interpolated.
    """
    lo, hi = depth_range
    if not lo < hi:
        raise ValueError("depth_range must satisfy lo < hi")
    t = np.clip((np.asarray(depth, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    x = t * 255.0
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, 255)
    frac = (x - i0)[..., None]
    lut = VIRIDIS_LUT.astype(np.float64)
    out = lut[i0] * (1.0 - frac) + lut[i1] * frac
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def photometric_jitter(rgb: np.ndarray, rng, strength: float = 0.2) -> np.ndarray:
    """Brightness/contrast jitter of +-``strength``, applied jointly."""
    brightness = rng.uniform(1.0 - strength, 1.0 + strength)
    contrast = rng.uniform(1.0 - strength, 1.0 + strength)
    x = rgb.astype(np.float64) * brightness
    mean = x.mean()
    x = (x - mean) * contrast + mean
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def randomize_background(rgb: np.ndarray, mask: np.ndarray, pool, p: float = 0.2, seed=0) -> np.ndarray:
    """With probability p, replace pixels outside ``mask`` by a pool image.

    ``mask`` is True where pixels must be preserved (robot + objects); those
    pixels are bit-identical in the output.  The chosen pool image is resized
    to the frame.

    Raises:
        EmptyPool: if p > 0 and the pool has no images.
    """
    if mask.shape != rgb.shape[:2]:
        raise ValueError("mask shape must match the image")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    pool = list(pool)
    if p > 0.0 and not pool:
        raise EmptyPool("background pool is empty")
    rng = np.random.default_rng(seed)
    if rng.random() >= p:
        return rgb.copy()
    choice = pool[int(rng.integers(len(pool)))]
    background = np.asarray(
        Image.fromarray(np.asarray(choice, dtype=np.uint8)).resize(
            (rgb.shape[1], rgb.shape[0]), Image.BILINEAR
        )
    )
    if background.ndim == 2:
        background = np.stack([background] * 3, axis=-1)
    return np.where(mask[..., None], rgb, background[..., :3])


def load_background_pool(directory) -> list:
    """Load every raster image in a directory (sorted order) as RGB arrays."""
    paths = sorted(
        p for p in Path(directory).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    return [np.asarray(Image.open(p).convert("RGB")) for p in paths]


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

CROP_OUT_SIZE = 224

CROP_CENTER_MODES = ("image_center", "start_object", "midpoint")


@dataclass(frozen=True)
class CropMap:
    """Exact affine map between original pixels and crop coordinates.

    The crop window is ``[x0, x0 + width) x [y0, y0 + height)`` in original
    pixels, resampled to ``out_size`` squared.  Crop-normalized coordinates
    are crop pixels divided by ``out_size``.
    """

    x0: int
    y0: int
    width: int
    height: int
    out_size: int = CROP_OUT_SIZE

    def to_crop(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.stack(
            [
                (pts[..., 0] - self.x0) * self.out_size / self.width,
                (pts[..., 1] - self.y0) * self.out_size / self.height,
            ],
            axis=-1,
        )

    def to_original(self, points_crop) -> np.ndarray:
        pts = np.asarray(points_crop, dtype=np.float64)
        return np.stack(
            [
                pts[..., 0] * self.width / self.out_size + self.x0,
                pts[..., 1] * self.height / self.out_size + self.y0,
            ],
            axis=-1,
        )

    def to_normalized(self, points) -> np.ndarray:
        return self.to_crop(points) / self.out_size

    def from_normalized(self, points_norm) -> np.ndarray:
        return self.to_original(np.asarray(points_norm, dtype=np.float64) * self.out_size)

    def to_json(self) -> dict:
        return {
            "x0": self.x0, "y0": self.y0, "width": self.width,
            "height": self.height, "out_size": self.out_size,
        }


def crop_transform(
    image: np.ndarray,
    center_mode: str,
    crop_size: int | None,
    padded: bool,
    start_point=None,
    end_point=None,
    out_size: int = CROP_OUT_SIZE,
) -> tuple:
    """Crop a square window and resize to ``out_size`` x ``out_size``.

    ``crop_size=None`` means the full image rectangle.  Padded mode keeps the
    w x w window and zero-pads outside the image; valid mode clips the window
    to the image bounds before resizing, which does not preserve aspect
    ratio.  ``start_point``/``end_point`` (original pixels) are required by
    the ``start_object``/``midpoint`` center modes.

    Returns ``(crop uint8, CropMap)``.

    Raises:
        DegenerateCrop: if the valid-mode window misses the image entirely.
    """
    if center_mode not in CROP_CENTER_MODES:
        raise ValueError(f"center_mode must be one of {CROP_CENTER_MODES}")
    h, w = image.shape[:2]
    if crop_size is not None and crop_size <= 0:
        raise ValueError("crop_size must be positive")

    if center_mode == "image_center":
        center = np.array([w / 2.0, h / 2.0])
    elif center_mode == "start_object":
        if start_point is None:
            raise ValueError("start_object mode requires start_point")
        center = np.asarray(start_point, dtype=np.float64)
    else:
        if start_point is None or end_point is None:
            raise ValueError("midpoint mode requires start_point and end_point")
        center = (np.asarray(start_point, dtype=np.float64)
                  + np.asarray(end_point, dtype=np.float64)) / 2.0

    if crop_size is None:
        x0, y0, win_w, win_h = 0, 0, w, h
    else:
        win_w = win_h = int(crop_size)
        x0 = int(round(center[0] - win_w / 2.0))
        y0 = int(round(center[1] - win_h / 2.0))

    if not padded and crop_size is not None:
        x1 = min(x0 + win_w, w)
        y1 = min(y0 + win_h, h)
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        if x0 >= x1 or y0 >= y1:
            raise DegenerateCrop("valid-mode crop window does not intersect the image")
        win_w, win_h = x1 - x0, y1 - y0

    region = np.zeros((win_h, win_w) + image.shape[2:], dtype=image.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + win_w, w), min(y0 + win_h, h)
    if sx0 < sx1 and sy0 < sy1:
        region[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[sy0:sy1, sx0:sx1]

    crop = np.asarray(
        Image.fromarray(region).resize((out_size, out_size), Image.BILINEAR)
    )
    return crop, CropMap(x0=x0, y0=y0, width=win_w, height=win_h, out_size=out_size)


def crop_center_points(record: "DatasetRecord") -> tuple:
    """Pixel positions of the grasp and release keyposes in the record's image."""
    cam = record.camera
    pts = []
    for kp in record.trajectory.keyposes:
        act = project(kp.pose, cam)
        pts.append(np.array([act.u * cam.width, act.v * cam.height]))
    return pts[0], pts[1]


# ---------------------------------------------------------------------------
# dataset records
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetRecord:
    """One serialized scene: camera, state, instruction, trajectory, tokens."""

    scene_id: str
    rgb: str | None
    depth: str | None
    camera: CameraModel
    robot_state: Pose6D
    instruction: str
    trajectory: Trajectory
    tokens_image: str
    tokens_robot: str
    mode: str
    objects: tuple
    task: tuple

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "rgb": self.rgb,
            "depth": self.depth,
            "camera": self.camera.to_json(),
            "robot_state": self.robot_state.to_json(),
            "instruction": self.instruction,
            "trajectory": self.trajectory.to_json(),
            "tokens": {"image": self.tokens_image, "robot": self.tokens_robot},
            "mode": self.mode,
            "objects": [o.to_json() for o in self.objects],
            "task": list(self.task),
        }

    @staticmethod
    def from_dict(obj: dict) -> "DatasetRecord":
        if obj.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {obj.get('schema')!r}")
        return DatasetRecord(
            scene_id=obj["scene_id"],
            rgb=obj["rgb"],
            depth=obj["depth"],
            camera=CameraModel.from_json(obj["camera"]),
            robot_state=Pose6D.from_json(obj["robot_state"]),
            instruction=obj["instruction"],
            trajectory=Trajectory.from_json(obj["trajectory"]),
            tokens_image=obj["tokens"]["image"],
            tokens_robot=obj["tokens"]["robot"],
            mode=obj["mode"],
            objects=tuple(ObjectState.from_json(o) for o in obj["objects"]),
            task=tuple(obj["task"]),
        )


def build_record(scene: SceneSpec, scene_id: str, codec_cfg: CodecConfig,
                 rgb_path: str | None, depth_path: str | None) -> DatasetRecord:
    traj = compute_trajectory(scene)
    image_cfg = dataclasses.replace(codec_cfg, frame=Frame.IMAGE)
    robot_cfg = dataclasses.replace(codec_cfg, frame=Frame.ROBOT)
    return DatasetRecord(
        scene_id=scene_id,
        rgb=rgb_path,
        depth=depth_path,
        camera=scene.camera,
        robot_state=scene.robot_state,
        instruction=scene.instruction,
        trajectory=traj,
        tokens_image=encode_trajectory(traj, scene.camera, image_cfg).text(),
        tokens_robot=encode_trajectory(traj, None, robot_cfg).text(),
        mode=scene.mode,
        objects=scene.objects,
        task=scene.task,
    )


def validate_record(record: DatasetRecord, codec_cfg: CodecConfig) -> None:
    """Self-consistency check; raises ValueError on the first violation.

    Re-encoding the stored trajectory must reproduce the stored token strings
    exactly, and decoding the tokens back must recover the world poses within
    the codec quantization bounds.
    """
    image_cfg = dataclasses.replace(codec_cfg, frame=Frame.IMAGE)
    robot_cfg = dataclasses.replace(codec_cfg, frame=Frame.ROBOT)
    re_image = encode_trajectory(record.trajectory, record.camera, image_cfg).text()
    re_robot = encode_trajectory(record.trajectory, None, robot_cfg).text()
    if re_image != record.tokens_image:
        raise ValueError(f"scene {record.scene_id}: image tokens mismatch")
    if re_robot != record.tokens_robot:
        raise ValueError(f"scene {record.scene_id}: robot tokens mismatch")

    decoded_img = codec_mod.decode_trajectory(
        TokenSequence.from_text(record.tokens_image), record.camera, image_cfg
    )
    img_ids = TokenSequence.from_text(record.tokens_image).ids
    decoded_rob = codec_mod.decode_trajectory(
        TokenSequence.from_text(record.tokens_robot), None, robot_cfg
    )
    rob_bound = codec_mod.robot_position_bound(robot_cfg) + 1e-12
    for k, (kp_dec, kp_true) in enumerate(
        zip(decoded_img.keyposes, record.trajectory.keyposes)
    ):
        ids = img_ids[6 * k:6 * k + 3]
        u = float(codec_mod.dequantize(ids[0], 0.0, 1.0, image_cfg.n_loc))
        v = float(codec_mod.dequantize(ids[1], 0.0, 1.0, image_cfg.n_loc))
        d = float(codec_mod.depth_unbin(ids[2], image_cfg))
        bound = codec_mod.image_position_bound(u, v, d, record.camera, image_cfg) + 1e-12
        err = float(np.linalg.norm(kp_dec.pose.position - kp_true.pose.position))
        if err > bound:
            raise ValueError(
                f"scene {record.scene_id}: image-frame keypose {k} error {err} > {bound}"
            )
    for k, (kp_dec, kp_true) in enumerate(
        zip(decoded_rob.keyposes, record.trajectory.keyposes)
    ):
        err = float(np.linalg.norm(kp_dec.pose.position - kp_true.pose.position))
        if err > rob_bound:
            raise ValueError(
                f"scene {record.scene_id}: robot-frame keypose {k} error {err} > {rob_bound}"
            )


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def scene_seed(dataset_seed: int, index: int) -> np.random.SeedSequence:
    """Independent per-scene RNG stream; enables order-free parallel generation."""
    return np.random.SeedSequence([int(dataset_seed), int(index)])


def save_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb).save(path)


def save_depth(path, depth: np.ndarray) -> None:
    """16-bit millimeter PNG."""
    mm = np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype("<u2")
    Image.fromarray(mm).save(path)


def load_depth(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def generate_dataset(
    out_dir,
    n: int,
    mode: str,
    seed: int,
    codec_cfg: CodecConfig | None = None,
    gen_cfg: GenConfig | None = None,
    render: bool = False,
    augment: bool = False,
    background_pool=None,
    background_p: float = 0.2,
    validate: bool = True,
    extra_manifest: dict | None = None,
) -> dict:
    """Generate ``n`` scenes into ``out_dir`` and return the manifest.

    Writes ``records.jsonl`` (one record per line) and ``manifest.json``
    (settings, seed, and the sha256 of the records file).  With ``render``
    the RGB and 16-bit millimeter depth PNGs are written under ``images/``;
    record image references are filled in either way so datasets can be
    rendered later.
    """
    codec_cfg = codec_cfg or CodecConfig()
    gen_cfg = gen_cfg or GenConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if render:
        (out / "images").mkdir(exist_ok=True)

    records_path = out / "records.jsonl"
    sha = hashlib.sha256()
    with open(records_path, "wb") as f:
        for i in range(n):
            scene = sample_scene(mode, scene_seed(seed, i), gen_cfg, codec_cfg)
            scene_id = f"{i:06d}"
            rgb_rel = f"images/{scene_id}_rgb.png"
            depth_rel = f"images/{scene_id}_depth.png"
            record = build_record(scene, scene_id, codec_cfg, rgb_rel, depth_rel)
            if validate:
                validate_record(record, codec_cfg)
            if render:
                rgb, depth = render_stub(scene)
                if augment:
                    aug_rng = np.random.default_rng(
                        np.random.SeedSequence([int(seed), int(i), 1])
                    )
                    rgb = photometric_jitter(rgb, aug_rng)
                    if background_pool:
                        rgb = randomize_background(
                            rgb, depth < FAR_PLANE, background_pool,
                            p=background_p,
                            seed=np.random.SeedSequence([int(seed), int(i), 2]),
                        )
                save_rgb(out / rgb_rel, rgb)
                save_depth(out / depth_rel, depth)
            line = (json.dumps(record.to_dict()) + "\n").encode()
            sha.update(line)
            f.write(line)

    manifest = {
        "schema": SCHEMA_VERSION,
        "n": n,
        "mode": mode,
        "seed": seed,
        "rendered": render,
        "records_sha256": sha.hexdigest(),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def read_records(path) -> list:
    """Load a records.jsonl file into DatasetRecord objects."""
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(DatasetRecord.from_dict(json.loads(line)))
    return records
