"""Ground-truth oracle: parametric object shapes, synthetic hand-object
scenes, splat-rendered amodal/visible masks, keypoint heatmaps, and
deterministic stand-in visual features.

Everything here is bit-deterministic under a fixed seed; the generators
replace datasets and pretrained encoders at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio, hand
from .fusion import FeatureGrid, GlobalFeature
from .geom import CameraIntrinsics, PointCloud, project_points
from .losses import Mask

SHAPE_FAMILIES = ("box", "can", "sphere", "bottle")


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    dimensions: tuple[float, ...]
    count: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise ValueError(
                f"unknown shape family {self.family!r}; one of {SHAPE_FAMILIES}")
        if self.count < 1:
            raise ValueError("count must be positive")
        if not all(d > 0 for d in self.dimensions):
            raise ValueError("dimensions must be positive")
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))


def make_object(spec: ShapeSpec) -> PointCloud:
    """Deterministic surface sampling of a parametric shape, centered at the
    origin before posing.

    Dimension conventions: box (sx, sy, sz); can (radius, height);
    sphere (radius,); bottle (body radius, body height, neck radius,
    neck height)."""
    rng = np.random.default_rng(spec.seed)
    fam = spec.family
    if fam == "box":
        if len(spec.dimensions) != 3:
            raise ValueError("box needs (sx, sy, sz)")
        pts = _sample_box(rng, spec.count, np.array(spec.dimensions))
    elif fam == "can":
        if len(spec.dimensions) != 2:
            raise ValueError("can needs (radius, height)")
        radius, height = spec.dimensions
        pts = _sample_cylinder(rng, spec.count, radius, height, caps=True)
    elif fam == "sphere":
        if len(spec.dimensions) != 1:
            raise ValueError("sphere needs (radius,)")
        direction = rng.normal(size=(spec.count, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        pts = spec.dimensions[0] * direction
    else:  # bottle: body cylinder with a narrower neck cylinder on top
        if len(spec.dimensions) != 4:
            raise ValueError("bottle needs (body radius, body height, neck radius, neck height)")
        r_body, h_body, r_neck, h_neck = spec.dimensions
        n_neck = max(1, int(spec.count * (r_neck * h_neck)
                            / (r_body * h_body + r_neck * h_neck)))
        body = _sample_cylinder(rng, spec.count - n_neck, r_body, h_body, caps=True)
        neck = _sample_cylinder(rng, n_neck, r_neck, h_neck, caps=False)
        neck[:, 2] += (h_body + h_neck) / 2.0
        pts = np.concatenate([body, neck], axis=0)
        pts[:, 2] -= (h_body + h_neck) / 2.0 - h_body / 2.0  # recenter extent
    return PointCloud(pts)


def _sample_box(rng, count, size):
    half = size / 2.0
    areas = np.array([size[1] * size[2], size[1] * size[2],
                      size[0] * size[2], size[0] * size[2],
                      size[0] * size[1], size[0] * size[1]])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(count, 2))
    pts = np.empty((count, 3))
    for face in range(6):
        sel = faces == face
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
    return pts


def _sample_cylinder(rng, count, radius, height, caps):
    side_area = 2.0 * np.pi * radius * height
    cap_area = 2.0 * np.pi * radius ** 2 if caps else 0.0
    n_side = count if not caps else int(round(count * side_area / (side_area + cap_area)))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
    pts = np.empty((count, 3))
    pts[:n_side, 0] = radius * np.cos(phi[:n_side])
    pts[:n_side, 1] = radius * np.sin(phi[:n_side])
    pts[:n_side, 2] = rng.uniform(-height / 2.0, height / 2.0, size=n_side)
    n_cap = count - n_side
    if n_cap:
        rad = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n_cap))
        pts[n_side:, 0] = rad * np.cos(phi[n_side:])
        pts[n_side:, 1] = rad * np.sin(phi[n_side:])
        pts[n_side:, 2] = np.where(rng.uniform(size=n_cap) < 0.5,
                                   -height / 2.0, height / 2.0)
    return pts


# ----------------------------------------------------------------- rendering

def _splat_zbuffer(points: np.ndarray, camera: CameraIntrinsics,
                   radius: int) -> np.ndarray:
    """Min-depth z-buffer of disk splats; +inf where nothing lands."""
    uv = project_points(camera, points)
    z = points[:, 2]
    offsets = [(dr, dc) for dr in range(-radius, radius + 1)
               for dc in range(-radius, radius + 1)
               if dr * dr + dc * dc <= radius * radius]
    zbuf = np.full((camera.height, camera.width), np.inf)
    rows = np.round(uv[:, 1]).astype(np.int64)
    cols = np.round(uv[:, 0]).astype(np.int64)
    for dr, dc in offsets:
        rr = rows + dr
        cc = cols + dc
        ok = (rr >= 0) & (rr < camera.height) & (cc >= 0) & (cc < camera.width)
        np.minimum.at(zbuf, (rr[ok], cc[ok]), z[ok])
    return zbuf


def render_masks(obj: PointCloud, occluder: PointCloud | None,
                 camera: CameraIntrinsics, splat_radius: int = 2,
                 occluder_radius: int | None = None) -> tuple[Mask, Mask]:
    """Amodal silhouette of the object and the visible subset after the
    occluder's splats win the per-pixel depth test. The occluder may use a
    larger splat radius; hand clouds are sparser than object clouds."""
    obj_z = _splat_zbuffer(obj.points, camera, splat_radius)
    amodal = np.isfinite(obj_z).astype(np.float64)
    if occluder is None or len(occluder) == 0:
        visible = amodal.copy()
    else:
        occ_z = _splat_zbuffer(occluder.points, camera,
                               occluder_radius or splat_radius)
        visible = (amodal * (occ_z >= obj_z)).astype(np.float64)
    return Mask(amodal, "amodal"), Mask(visible, "visible")


def make_heatmaps(joints: np.ndarray, camera: CameraIntrinsics,
                  sigma: float = 3.0, far_depth: float = 100.0
                  ) -> hand.KeypointHeatmaps:
    """Gaussian activation bump at each projected joint with the joint's
    depth in the companion grid inside the bump support (3 sigma)."""
    joints = np.asarray(joints, dtype=np.float64)
    uv = project_points(camera, joints)
    vv, uu = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    activations = np.empty((hand.NUM_JOINTS, camera.height, camera.width))
    depths = np.full((hand.NUM_JOINTS, camera.height, camera.width), far_depth)
    for j in range(hand.NUM_JOINTS):
        d2 = (uu - uv[j, 0]) ** 2 + (vv - uv[j, 1]) ** 2
        # Peak-normalized so the sigma -> 0 limit is a single-pixel spike.
        activations[j] = np.exp((d2.min() - d2) / (2.0 * sigma ** 2))
        support = d2 <= (3.0 * sigma) ** 2
        if not support.any():
            support = d2 == d2.min()
        depths[j][support] = joints[j, 2]
    return hand.KeypointHeatmaps(activations, depths)


# -------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SceneConfig:
    raster: int = 256
    focal: float = 300.0
    families: tuple[str, ...] = ("box", "can")
    object_points: int = 1024
    depth_range: tuple[float, float] = (0.45, 0.70)
    splat_radius: int = 2
    heatmap_sigma: float = 3.0
    max_retries: int = 20

    def camera(self) -> CameraIntrinsics:
        half = self.raster / 2.0
        return CameraIntrinsics(self.focal, self.focal, half, half,
                                self.raster, self.raster)


@dataclass(frozen=True)
class SceneSample:
    object_cloud: PointCloud
    object_center: np.ndarray
    hand_pose: hand.HandPose
    hand_joints: np.ndarray
    hand_cloud: PointCloud
    camera: CameraIntrinsics
    amodal: Mask
    visible: Mask
    heatmaps: hand.KeypointHeatmaps
    category: str
    seed: int


def _sample_dimensions(rng, family: str) -> tuple[float, ...]:
    if family == "box":
        return tuple(rng.uniform(0.05, 0.12, size=3))
    if family == "can":
        return (rng.uniform(0.025, 0.045), rng.uniform(0.08, 0.14))
    if family == "sphere":
        return (rng.uniform(0.03, 0.06),)
    return (rng.uniform(0.03, 0.05), rng.uniform(0.08, 0.12),
            rng.uniform(0.012, 0.02), rng.uniform(0.03, 0.05))


def _rotation_from_rng(rng) -> np.ndarray:
    mat = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(mat)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def make_scene(config: SceneConfig, seed: int) -> SceneSample:
    """One synthetic interaction: a posed object inside the camera frustum
    with a hand occluder whose placement grades the occlusion rate."""
    rng = np.random.default_rng(seed)
    camera = config.camera()
    family = str(rng.choice(config.families))
    dims = _sample_dimensions(rng, family)
    shape = make_object(ShapeSpec(family, dims, config.object_points, seed=seed))

    posed = None
    for _ in range(config.max_retries):
        rotation = _rotation_from_rng(rng)
        depth = rng.uniform(*config.depth_range)
        lateral = rng.uniform(-0.04, 0.04, size=2)
        translation = np.array([lateral[0], lateral[1], depth])
        candidate = shape.points @ rotation.T + translation
        uv = project_points(camera, candidate)
        margin = 4.0
        if (uv[:, 0].min() >= margin and uv[:, 0].max() < camera.width - margin
                and uv[:, 1].min() >= margin and uv[:, 1].max() < camera.height - margin):
            posed = candidate
            break
    if posed is None:
        raise RuntimeError(
            f"seed {seed}: object left the frustum in {config.max_retries} retries")
    obj_cloud = PointCloud(posed)
    center = obj_cloud.centroid()

    skeleton = hand.default_skeleton()
    diameter = float(np.linalg.norm(posed.max(axis=0) - posed.min(axis=0)))
    # Wrist between camera and object; the lateral miss distance grades
    # the occlusion rate from full cover to none.
    toward_camera = -center / np.linalg.norm(center)
    cover = rng.uniform(0.0, 0.75)
    side = rng.normal(size=3)
    side -= side @ toward_camera * toward_camera
    side /= np.linalg.norm(side)
    wrist = (center + toward_camera * rng.uniform(0.6, 1.7) * diameter
             + side * cover * diameter - np.array([0.0, 0.06, 0.0]))
    curls = rng.uniform(0.05, 0.6, size=15)
    rotations = np.zeros((hand.NUM_ROTATIONS, 3))
    rotations[0] = rng.normal(scale=0.3, size=3)
    rotations[1:, 0] = curls
    pose = hand.HandPose(rotations, wrist)
    joints = hand.forward_kinematics(skeleton, pose)
    if np.any(joints[:, 2] <= 0.05):
        # Keep the hand safely in front of the camera.
        shift = 0.06 - joints[:, 2].min()
        pose = hand.HandPose(rotations, wrist + np.array([0.0, 0.0, shift]))
        joints = hand.forward_kinematics(skeleton, pose)
    surface = default_hand_surface(skeleton)
    hand_cloud = hand.skin(skeleton, pose, surface)

    amodal, visible = render_masks(obj_cloud, hand_cloud, camera,
                                   config.splat_radius,
                                   occluder_radius=config.splat_radius + 2)
    heatmaps = make_heatmaps(joints, camera, config.heatmap_sigma)
    return SceneSample(obj_cloud, center, pose, joints, hand_cloud, camera,
                       amodal, visible, heatmaps, family, seed)


_SURFACE_CACHE: dict[int, hand.HandSurface] = {}


def default_hand_surface(skeleton: hand.HandSkeleton) -> hand.HandSurface:
    if 0 not in _SURFACE_CACHE:
        _SURFACE_CACHE[0] = hand.default_surface(skeleton)
    return _SURFACE_CACHE[0]


# ------------------------------------------------------------------ features

@dataclass(frozen=True)
class FeatureConfig:
    grid1: tuple[int, int] = (32, 32)
    grid2: tuple[int, int] = (16, 16)
    channels1: int = 16
    channels2: int = 16


def synth_features(sample: SceneSample, config: FeatureConfig = FeatureConfig(),
                   seed: int = 0) -> tuple[FeatureGrid, FeatureGrid, GlobalFeature]:
    """Deterministic visual-feature stand-in: visible-mask and object-depth
    rasters, block-averaged to each grid size and expanded to the channel
    count by a seeded random linear map. The global feature is the average
    pool of the finer grid."""
    camera = sample.camera
    zbuf = _splat_zbuffer(sample.object_cloud.points, camera, 2)
    depth_map = np.where(np.isfinite(zbuf), zbuf, 0.0)
    base = np.stack([sample.visible.data, depth_map], axis=2)
    rng = np.random.default_rng(seed)
    grids = []
    for (gh, gw), channels in ((config.grid1, config.channels1),
                               (config.grid2, config.channels2)):
        coarse = _block_mean(base, gh, gw)
        mix = rng.normal(scale=1.0, size=(base.shape[2], channels))
        grids.append(FeatureGrid(coarse @ mix, stride=camera.width / gw))
    global_feature = GlobalFeature(grids[0].flat.mean(axis=0))
    return grids[0], grids[1], global_feature


def _block_mean(raster: np.ndarray, gh: int, gw: int) -> np.ndarray:
    h, w, c = raster.shape
    if h % gh or w % gw:
        raise ValueError(f"raster {h}x{w} not divisible into {gh}x{gw} blocks")
    return raster.reshape(gh, h // gh, gw, w // gw, c).mean(axis=(1, 3))


# ---------------------------------------------------------------- dataset io

def save_sample(directory, sample: SceneSample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fileio.write_cloud(sample.object_cloud, directory / "object.ply")
    fileio.write_cloud(sample.hand_cloud, directory / "hand.ply")
    fileio.write_mask(sample.amodal.data.astype(np.uint8), directory / "amodal.pgm")
    fileio.write_mask(sample.visible.data.astype(np.uint8), directory / "visible.pgm")
    fileio.write_tensor(sample.heatmaps.activations, directory / "heatmaps.tens")
    fileio.write_tensor(sample.heatmaps.depths, directory / "heatmap_depths.tens")
    fileio.write_tensor(sample.hand_joints, directory / "hand_joints.tens")
    fileio.write_tensor(sample.hand_pose.as_vector(), directory / "hand_pose.tens")
    camera = sample.camera
    fileio.write_manifest({
        "category": sample.category,
        "seed": str(sample.seed),
        "center": " ".join(repr(float(v)) for v in sample.object_center),
        "camera": " ".join(repr(float(v)) for v in
                           (camera.fx, camera.fy, camera.cx, camera.cy,
                            camera.width, camera.height)),
    }, directory / "sample.tsv")


def load_sample(directory) -> SceneSample:
    directory = Path(directory)
    manifest = fileio.read_manifest(directory / "sample.tsv")
    cam_vals = [float(v) for v in manifest["camera"].split()]
    camera = CameraIntrinsics(cam_vals[0], cam_vals[1], cam_vals[2], cam_vals[3],
                              int(cam_vals[4]), int(cam_vals[5]))
    obj = fileio.read_cloud(directory / "object.ply")
    hand_cloud = fileio.read_cloud(directory / "hand.ply")
    heatmaps = hand.KeypointHeatmaps(
        fileio.read_tensor(directory / "heatmaps.tens"),
        fileio.read_tensor(directory / "heatmap_depths.tens"))
    joints = fileio.read_tensor(directory / "hand_joints.tens")
    pose = hand.HandPose.from_vector(fileio.read_tensor(directory / "hand_pose.tens"))
    # Recomputed from the 32-bit cloud so the centroid invariant holds exactly.
    center = obj.centroid()
    return SceneSample(
        object_cloud=obj,
        object_center=center,
        hand_pose=pose,
        hand_joints=joints,
        hand_cloud=hand_cloud,
        camera=camera,
        amodal=Mask(fileio.read_mask(directory / "amodal.pgm").astype(np.float64), "amodal"),
        visible=Mask(fileio.read_mask(directory / "visible.pgm").astype(np.float64), "visible"),
        heatmaps=heatmaps,
        category=manifest["category"],
        seed=int(manifest["seed"]),
    )
