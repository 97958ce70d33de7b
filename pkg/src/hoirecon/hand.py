"""Simplified kinematic hand: 21-joint skeleton (wrist + 5 fingers x 4),
forward kinematics, linear-blend skinning to a procedural vertex cloud,
heatmap keypoint extraction, and a damped-least-squares IK solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import CameraIntrinsics, PointCloud, unproject

NUM_JOINTS = 21
NUM_ROTATIONS = 16  # wrist + 3 articulated joints per finger
POSE_DOF = NUM_ROTATIONS * 3 + 3

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")


@dataclass(frozen=True)
class HandSkeleton:
    parents: np.ndarray          # (21,) parent joint index, wrist = -1
    offsets: np.ndarray          # (21, 3) rest offset in the parent frame, meters
    finger_scales: np.ndarray    # (5,) bone-length scale per finger
    rot_index: np.ndarray        # (21,) index into the pose rotation array, -1 for tips

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        scales = np.asarray(self.finger_scales, dtype=np.float64)
        rot_index = np.asarray(self.rot_index, dtype=np.int64)
        if parents.shape != (NUM_JOINTS,) or parents[0] != -1:
            raise ValueError("parents must be 21 indices rooted at the wrist")
        if np.any(parents[1:] >= np.arange(1, NUM_JOINTS)):
            raise ValueError("parents must precede children (tree order)")
        if offsets.shape != (NUM_JOINTS, 3) or not np.isfinite(offsets).all():
            raise ValueError("offsets must be finite (21, 3)")
        if scales.shape != (5,) or not (scales > 0).all():
            raise ValueError("finger_scales must be 5 positive values")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "finger_scales", scales)
        object.__setattr__(self, "rot_index", rot_index)

    def joint_scale(self, joint: int) -> float:
        """Bone-length scale applied to the joint's rest offset."""
        if joint == 0:
            return 1.0
        return float(self.finger_scales[(joint - 1) // 4])


@dataclass(frozen=True)
class HandPose:
    """Axis-angle rotation per articulated joint plus a global translation."""

    rotations: np.ndarray     # (16, 3) axis-angle, radians
    translation: np.ndarray   # (3,) meters

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (NUM_ROTATIONS, 3) or not np.isfinite(rot).all():
            raise ValueError("rotations must be finite (16, 3) axis-angle")
        if tra.shape != (3,) or not np.isfinite(tra).all():
            raise ValueError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def rest() -> "HandPose":
        return HandPose(np.zeros((NUM_ROTATIONS, 3)), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotations.ravel(), self.translation])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "HandPose":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (POSE_DOF,):
            raise ValueError(f"pose vector must have {POSE_DOF} entries")
        return HandPose(vec[:NUM_ROTATIONS * 3].reshape(NUM_ROTATIONS, 3), vec[-3:])


def default_skeleton(finger_scales=None) -> HandSkeleton:
    """A plausible right hand at rest: palm in the x/y plane, fingers +y."""
    parents = np.full(NUM_JOINTS, -1, dtype=np.int64)
    offsets = np.zeros((NUM_JOINTS, 3))
    rot_index = np.full(NUM_JOINTS, -1, dtype=np.int64)
    rot_index[0] = 0
    # Per finger: (MCP offset from wrist, proximal, middle, distal bone lengths)
    roots = {
        "thumb": (np.array([0.035, 0.02, 0.0]), 0.035, 0.028, 0.022),
        "index": (np.array([0.025, 0.09, 0.0]), 0.040, 0.025, 0.020),
        "middle": (np.array([0.005, 0.095, 0.0]), 0.045, 0.028, 0.021),
        "ring": (np.array([-0.015, 0.09, 0.0]), 0.040, 0.026, 0.020),
        "pinky": (np.array([-0.033, 0.08, 0.0]), 0.030, 0.020, 0.018),
    }
    for f, name in enumerate(FINGER_NAMES):
        base = 1 + 4 * f
        mcp_offset, l1, l2, l3 = roots[name]
        direction = mcp_offset / np.linalg.norm(mcp_offset) if name == "thumb" \
            else np.array([0.0, 1.0, 0.0])
        parents[base] = 0
        offsets[base] = mcp_offset
        for c, length in enumerate((l1, l2, l3)):
            parents[base + 1 + c] = base + c
            offsets[base + 1 + c] = direction * length
        for c in range(3):
            rot_index[base + c] = 1 + 3 * f + c
    if finger_scales is None:
        finger_scales = np.ones(5)
    return HandSkeleton(parents, offsets, finger_scales, rot_index)


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) to rotation matrix."""
    theta = np.linalg.norm(aa)
    if theta < 1e-12:
        k = _skew(aa)
        return np.eye(3) + k + 0.5 * k @ k
    axis = aa / theta
    k = _skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rodrigues_jacobian(aa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its derivative w.r.t. the three axis-angle
    components (Gallego-Yezzi closed form); returns (R, dR[3, 3, 3])."""
    rot = rodrigues(aa)
    theta2 = float(aa @ aa)
    deriv = np.empty((3, 3, 3))
    if theta2 < 1e-16:
        for i in range(3):
            basis = np.zeros(3)
            basis[i] = 1.0
            deriv[i] = _skew(basis) @ rot
        return rot, deriv
    for i in range(3):
        basis = np.zeros(3)
        basis[i] = 1.0
        vec = aa[i] * aa + np.cross(aa, (np.eye(3) - rot) @ basis)
        deriv[i] = (_skew(vec) / theta2) @ rot
    return rot, deriv


def forward_kinematics(skeleton: HandSkeleton, pose: HandPose) -> np.ndarray:
    """Joint positions (21, 3) in the world frame."""
    positions, _ = fk_transforms(skeleton, pose)
    return positions


def fk_transforms(skeleton: HandSkeleton, pose: HandPose) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions (21, 3) and global rotations (21, 3, 3)."""
    positions = np.empty((NUM_JOINTS, 3))
    rotations = np.empty((NUM_JOINTS, 3, 3))
    for j in range(NUM_JOINTS):
        ridx = skeleton.rot_index[j]
        local = rodrigues(pose.rotations[ridx]) if ridx >= 0 else np.eye(3)
        if j == 0:
            rotations[0] = local
            positions[0] = pose.translation
            continue
        parent = skeleton.parents[j]
        offset = skeleton.joint_scale(j) * skeleton.offsets[j]
        positions[j] = positions[parent] + rotations[parent] @ offset
        rotations[j] = rotations[parent] @ local
    return positions, rotations


def fk_with_jacobian(skeleton: HandSkeleton, pose: HandPose
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions (21, 3) and the analytic Jacobian (63, 51) of the
    flattened positions w.r.t. the pose vector (48 rotation components,
    then the 3 translation components)."""
    positions = np.empty((NUM_JOINTS, 3))
    rotations = np.empty((NUM_JOINTS, 3, 3))
    # d(rotation)/d(param) and d(position)/d(param) per joint
    d_rot = np.zeros((NUM_JOINTS, POSE_DOF, 3, 3))
    d_pos = np.zeros((NUM_JOINTS, POSE_DOF, 3))
    for j in range(NUM_JOINTS):
        ridx = skeleton.rot_index[j]
        if ridx >= 0:
            local, d_local = rodrigues_jacobian(pose.rotations[ridx])
        else:
            local, d_local = np.eye(3), None
        if j == 0:
            rotations[0] = local
            positions[0] = pose.translation
            if d_local is not None:
                for c in range(3):
                    d_rot[0, 3 * ridx + c] = d_local[c]
            d_pos[0, 48:51] = np.eye(3)
            continue
        parent = skeleton.parents[j]
        offset = skeleton.joint_scale(j) * skeleton.offsets[j]
        positions[j] = positions[parent] + rotations[parent] @ offset
        rotations[j] = rotations[parent] @ local
        d_pos[j] = d_pos[parent] + d_rot[parent] @ offset
        d_rot[j] = d_rot[parent] @ local
        if d_local is not None:
            for c in range(3):
                d_rot[j, 3 * ridx + c] += rotations[parent] @ d_local[c]
    jac = d_pos.transpose(0, 2, 1).reshape(NUM_JOINTS * 3, POSE_DOF)
    return positions, jac


@dataclass(frozen=True)
class HandSurface:
    """Template vertex cloud with per-vertex skinning weights over joints."""

    vertices: np.ndarray   # (V, 3) rest pose, meters
    weights: np.ndarray    # (V, 21), rows sum to 1, non-negative

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if weights.shape != (verts.shape[0], NUM_JOINTS):
            raise ValueError("weights must be (V, 21)")
        if np.any(weights < 0):
            raise ValueError("skinning weights must be non-negative")
        if not np.allclose(weights.sum(axis=1), 1.0, atol=1e-9, rtol=0.0):
            raise ValueError("skinning weight rows must sum to 1")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "weights", weights)


def default_surface(skeleton: HandSkeleton, n_vertices: int = 256,
                    seed: int = 0) -> HandSurface:
    """Procedural capsule-like vertex cloud along the bones. Geometry
    fidelity is irrelevant; determinism and valid weights are the contract."""
    rest_pos = forward_kinematics(skeleton, HandPose.rest())
    rng = np.random.default_rng(seed)
    bones = [(skeleton.parents[j], j) for j in range(1, NUM_JOINTS)]
    per_bone = n_vertices // (len(bones) + 1)
    verts = []
    weights = []
    for parent, child in bones:
        for _ in range(per_bone):
            t = rng.uniform(0.0, 1.0)
            radial = rng.normal(size=3)
            radial *= 0.006 / np.linalg.norm(radial)
            verts.append(rest_pos[parent] * (1 - t) + rest_pos[child] * t + radial)
            w = np.zeros(NUM_JOINTS)
            w[parent] = 1 - t
            w[child] = t
            weights.append(w)
    while len(verts) < n_vertices:
        # Remaining budget: palm vertices rigidly attached to the wrist.
        palm = rng.uniform([-0.03, 0.0, -0.008], [0.03, 0.08, 0.008])
        verts.append(palm)
        w = np.zeros(NUM_JOINTS)
        w[0] = 1.0
        weights.append(w)
    return HandSurface(np.array(verts), np.array(weights))


def skin(skeleton: HandSkeleton, pose: HandPose, surface: HandSurface) -> PointCloud:
    """Linear-blend skinning of the template vertices to the posed hand."""
    rest_pos = forward_kinematics(skeleton, HandPose.rest())
    positions, rotations = fk_transforms(skeleton, pose)
    # Per-joint rigid motion of the rest frame: v -> R_j (v - rest_j) + pos_j
    local = surface.vertices[:, np.newaxis, :] - rest_pos[np.newaxis, :, :]
    moved = np.einsum("jab,vjb->vja", rotations, local) + positions[np.newaxis, :, :]
    blended = np.einsum("vj,vja->va", surface.weights, moved)
    return PointCloud(blended)


@dataclass(frozen=True)
class KeypointHeatmaps:
    """Per-joint activation grids plus companion metric depth grids."""

    activations: np.ndarray  # (21, H, W), non-negative
    depths: np.ndarray       # (21, H, W), meters

    def __post_init__(self):
        act = np.asarray(self.activations, dtype=np.float64)
        dep = np.asarray(self.depths, dtype=np.float64)
        if act.ndim != 3 or act.shape[0] != NUM_JOINTS or act.shape[1] == 0 or act.shape[2] == 0:
            raise ValueError("activations must be a non-empty (21, H, W) stack")
        if dep.shape != act.shape:
            raise ValueError("depth grids must match activation grids in shape")
        if not np.isfinite(act).all() or np.any(act < 0):
            raise ValueError("activations must be finite and non-negative")
        object.__setattr__(self, "activations", act)
        object.__setattr__(self, "depths", dep)


def keypoints_from_heatmaps(heatmaps: KeypointHeatmaps,
                            camera: CameraIntrinsics) -> np.ndarray:
    """uvd extraction: per joint, (u, v) at the activation argmax (row-major
    first-max tie-break), depth from the companion grid, unprojected to 3D."""
    out = np.empty((NUM_JOINTS, 3))
    height, width = heatmaps.activations.shape[1:]
    for j in range(NUM_JOINTS):
        flat = int(np.argmax(heatmaps.activations[j]))
        row, col = divmod(flat, width)
        depth = float(heatmaps.depths[j, row, col])
        if depth <= 0:
            raise ValueError(f"non-positive depth {depth} at argmax of joint {j}")
        out[j] = unproject(camera, float(col), float(row), depth)
    return out


def inverse_kinematics(target: np.ndarray, skeleton: HandSkeleton,
                       init: HandPose | None = None,
                       damping: float = 1e-3, max_iterations: int = 200,
                       tol: float = 1e-9) -> tuple[HandPose, float]:
    """Damped-least-squares fit of the pose to 21 target joint positions.

    Best effort: always returns a pose plus the final RMS joint residual
    in meters, converged or not.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (NUM_JOINTS, 3):
        raise ValueError("target must be (21, 3)")
    if not np.isfinite(target).all():
        raise ValueError("target positions must be finite")
    theta = (init or HandPose.rest()).as_vector()
    prev_rms = np.inf
    rms = np.inf
    lam2 = damping * damping
    for _ in range(max_iterations):
        positions, jac = fk_with_jacobian(skeleton, HandPose.from_vector(theta))
        residual = (target - positions).ravel()
        rms = float(np.sqrt((residual ** 2).reshape(NUM_JOINTS, 3).sum(axis=1).mean()))
        if abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
        gram = jac @ jac.T
        gram[np.diag_indices_from(gram)] += lam2
        theta = theta + jac.T @ np.linalg.solve(gram, residual)
    return HandPose.from_vector(theta), rms
