"""Skeleton, pose and clip primitives: quaternion algebra, forward kinematics,
foot-contact extraction and root-velocity derivation.

Conventions used throughout the package:

* Quaternions are stored scalar-first ``[w, x, y, z]`` and multiplied with the
  Hamilton product in right-handed frames. On ingestion the double cover is
  canonicalized to ``w >= 0``.
* Angles are radians everywhere except at file-format boundaries.
* All functions are pure: clip-level operations return new values instead of
  mutating their inputs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

NO_PARENT = -1

# Default stance thresholds for centimeter-scale capture data. Both are
# configurable wherever contacts are extracted.
DEFAULT_SPEED_THRESHOLD = 0.2
DEFAULT_HEIGHT_THRESHOLD = 8.0

# Vertical axis (y-up) and ground-plane axes used unless a dataset config
# says otherwise.
UP_AXIS = 1
GROUND_AXES = (0, 2)

CONTACT_FLAG_COUNT = 4


class StructuralError(ValueError):
    """Inputs do not match the skeleton or expected array shapes."""


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Return q scaled to unit length; near-zero input falls back to identity."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.where(norm > eps, q / np.maximum(norm, eps), 0.0)
    fallback = np.zeros_like(q)
    fallback[..., 0] = 1.0
    return np.where(norm > eps, out, fallback)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar component is non-negative (double-cover pick)."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``, renormalized to unit length.

    Accepts ``(..., 4)`` arrays with numpy broadcasting over leading
    dimensions. Renormalization absorbs the drift of chained products.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) ``v`` by quaternion(s) ``q`` (``v' = q v q*``)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qvec = q[..., 1:]
    uv = np.cross(qvec, v)
    uuv = np.cross(qvec, uv)
    return v + 2.0 * (q[..., :1] * uv + uuv)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Convert unit quaternion(s) to 3x3 rotation matrix(es)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Convert a 3x3 rotation matrix to a canonical (w >= 0) unit quaternion."""
    m = np.asarray(m, dtype=float)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle in radians between two unit quaternions (double-cover aware)."""
    dot = float(np.clip(abs(np.dot(np.asarray(a, float), np.asarray(b, float))), -1.0, 1.0))
    return 2.0 * np.arccos(dot)


# ---------------------------------------------------------------------------
# skeleton / pose / clip
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint hierarchy with parent indices and rest offsets.

    ``parent_index`` must describe a single-rooted tree in topological order:
    the root sits at index 0 with parent ``NO_PARENT`` and every other joint's
    parent precedes it. The root's ``local_offset`` is the zero vector; any
    constant root offset from a source file is folded into per-frame root
    positions at ingestion.
    """

    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    local_offset: np.ndarray  # [J, 3]

    def __post_init__(self):
        names = tuple(self.joint_names)
        parents = tuple(int(p) for p in self.parent_index)
        offsets = np.asarray(self.local_offset, dtype=float).reshape(len(names), 3)
        object.__setattr__(self, "joint_names", names)
        object.__setattr__(self, "parent_index", parents)
        object.__setattr__(self, "local_offset", offsets)
        if len(names) == 0:
            raise StructuralError("skeleton needs at least one joint")
        if len(parents) != len(names):
            raise StructuralError("parent_index length must equal joint count")
        if parents[0] != NO_PARENT:
            raise StructuralError("joint 0 must be the root (parent sentinel)")
        for j, p in enumerate(parents[1:], start=1):
            if not 0 <= p < j:
                raise StructuralError(
                    f"joint {j} ({names[j]!r}) has parent {p}; parents must precede children"
                )
        if parents.count(NO_PARENT) != 1:
            raise StructuralError("exactly one root joint is allowed")
        if np.any(offsets[0] != 0.0):
            raise StructuralError("root local_offset must be the zero vector")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def index_of(self, name: str) -> int:
        return self.joint_names.index(name)

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parent_index) if p == j]

    def matches(self, other: "Skeleton") -> bool:
        return (
            self.joint_names == other.joint_names
            and self.parent_index == other.parent_index
            and np.allclose(self.local_offset, other.local_offset)
        )


@dataclass
class Pose:
    """One frame of character state.

    ``root_velocity`` is in length units per frame. ``contacts`` holds the
    four stance flags (left ankle, left toe, right ankle, right toe).
    """

    root_position: np.ndarray  # [3]
    root_velocity: np.ndarray  # [3]
    local_rotations: np.ndarray  # [J, 4] unit, scalar-first
    contacts: np.ndarray = field(default_factory=lambda: np.zeros(CONTACT_FLAG_COUNT, dtype=bool))

    def __post_init__(self):
        self.root_position = np.asarray(self.root_position, dtype=float).reshape(3)
        self.root_velocity = np.asarray(self.root_velocity, dtype=float).reshape(3)
        self.local_rotations = np.asarray(self.local_rotations, dtype=float).reshape(-1, 4)
        self.contacts = np.asarray(self.contacts, dtype=bool).reshape(-1)

    def validate(self, skeleton: Skeleton, tol: float = 1e-6) -> None:
        if self.local_rotations.shape[0] != skeleton.joint_count:
            raise StructuralError(
                f"pose has {self.local_rotations.shape[0]} rotations for "
                f"{skeleton.joint_count} joints"
            )
        norms = np.linalg.norm(self.local_rotations, axis=-1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise StructuralError("pose quaternions must be unit length")
        if self.contacts.shape[0] != CONTACT_FLAG_COUNT:
            raise StructuralError(f"contacts must have exactly {CONTACT_FLAG_COUNT} flags")

    def copy(self) -> "Pose":
        return Pose(
            self.root_position.copy(),
            self.root_velocity.copy(),
            self.local_rotations.copy(),
            self.contacts.copy(),
        )


@dataclass
class MotionClip:
    """Ordered pose sequence at a fixed frame rate."""

    skeleton: Skeleton
    frames: list[Pose]
    frame_rate: float = 30.0

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if not self.frames:
            raise StructuralError("clip must contain at least one frame")
        for pose in self.frames:
            pose.validate(self.skeleton)

    def copy(self) -> "MotionClip":
        return MotionClip(self.skeleton, [f.copy() for f in self.frames], self.frame_rate)

    # stacked-array views -------------------------------------------------

    def root_positions(self) -> np.ndarray:  # [T, 3]
        return np.stack([f.root_position for f in self.frames])

    def root_velocities(self) -> np.ndarray:  # [T, 3]
        return np.stack([f.root_velocity for f in self.frames])

    def rotations(self) -> np.ndarray:  # [T, J, 4]
        return np.stack([f.local_rotations for f in self.frames])

    def contact_flags(self) -> np.ndarray:  # [T, 4] bool
        return np.stack([f.contacts for f in self.frames])

    def global_positions(self) -> np.ndarray:  # [T, J, 3]
        return np.stack(
            [forward_kinematics(self.skeleton, f.root_position, f.local_rotations) for f in self.frames]
        )


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def forward_kinematics(
    skeleton: Skeleton, root_position: np.ndarray, local_rotations: np.ndarray
) -> np.ndarray:
    """Global joint positions from the root position and local rotations.

    Position of joint j is its parent's position plus the parent's global
    rotation applied to the rest offset; global rotations accumulate as
    Hamilton products down the tree. Returns a ``[J, 3]`` array.
    """
    local_rotations = np.asarray(local_rotations, dtype=float)
    if local_rotations.shape != (skeleton.joint_count, 4):
        raise StructuralError(
            f"expected rotations of shape ({skeleton.joint_count}, 4), "
            f"got {local_rotations.shape}"
        )
    root_position = np.asarray(root_position, dtype=float).reshape(3)
    J = skeleton.joint_count
    positions = np.empty((J, 3))
    rotations = np.empty((J, 4))
    positions[0] = root_position
    rotations[0] = quat_normalize(local_rotations[0])
    for j in range(1, J):
        p = skeleton.parent_index[j]
        positions[j] = positions[p] + quat_rotate(rotations[p], skeleton.local_offset[j])
        rotations[j] = quat_multiply(rotations[p], local_rotations[j])
    return positions


def global_rotations(skeleton: Skeleton, local_rotations: np.ndarray) -> np.ndarray:
    """Accumulated global rotation per joint, ``[J, 4]``."""
    local_rotations = np.asarray(local_rotations, dtype=float)
    out = np.empty_like(local_rotations)
    out[0] = quat_normalize(local_rotations[0])
    for j in range(1, skeleton.joint_count):
        out[j] = quat_multiply(out[skeleton.parent_index[j]], local_rotations[j])
    return out


# ---------------------------------------------------------------------------
# contacts and velocities
# ---------------------------------------------------------------------------

_ANKLE_WORDS = ("foot", "ankle")
_TOE_WORD = "toe"


def find_contact_joints(skeleton: Skeleton) -> tuple[int, int, int, int]:
    """Resolve the (left ankle, left toe, right ankle, right toe) indices by name.

    Matching is case-insensitive substring search; raises StructuralError when
    any of the four cannot be resolved. Pass explicit indices to
    :func:`extract_contacts` for skeletons with unusual naming.
    """
    lowered = [n.lower() for n in skeleton.joint_names]

    def pick(side: str, toe: bool) -> int:
        for i, name in enumerate(lowered):
            if side not in name:
                continue
            if toe and _TOE_WORD in name:
                return i
            if not toe and _TOE_WORD not in name and any(w in name for w in _ANKLE_WORDS):
                return i
        raise StructuralError(
            f"cannot resolve {side} {'toe' if toe else 'ankle'} joint from names "
            f"{skeleton.joint_names}"
        )

    return (pick("left", False), pick("left", True), pick("right", False), pick("right", True))


def extract_contacts(
    clip: MotionClip,
    speed_threshold: float = DEFAULT_SPEED_THRESHOLD,
    height_threshold: float = DEFAULT_HEIGHT_THRESHOLD,
    contact_joints: tuple[int, int, int, int] | None = None,
    up_axis: int = UP_AXIS,
) -> MotionClip:
    """Return a copy of the clip with stance flags filled in.

    A contact joint is flagged at frame t when its global-position speed
    (central difference; one-sided at the clip ends) is below
    ``speed_threshold`` and its height along ``up_axis`` is below
    ``height_threshold``.
    """
    if len(clip) < 2:
        raise StructuralError("contact extraction needs at least two frames")
    joints = contact_joints if contact_joints is not None else find_contact_joints(clip.skeleton)
    positions = clip.global_positions()[:, list(joints), :]  # [T, 4, 3]
    T = positions.shape[0]
    velocity = np.empty_like(positions)
    velocity[0] = positions[1] - positions[0]
    velocity[-1] = positions[-1] - positions[-2]
    if T > 2:
        velocity[1:-1] = 0.5 * (positions[2:] - positions[:-2])
    speed = np.linalg.norm(velocity, axis=-1)  # [T, 4]
    height = positions[..., up_axis]
    flags = (speed < speed_threshold) & (height < height_threshold)
    out = clip.copy()
    for t, pose in enumerate(out.frames):
        pose.contacts = flags[t].copy()
    return out


def derive_velocities(clip: MotionClip) -> MotionClip:
    """Return a copy with root velocities as frame-to-frame position differences.

    Frame 0 copies frame 1's velocity so the first frame carries no artificial
    zero spike.
    """
    if len(clip) < 2:
        raise StructuralError("velocity derivation needs at least two frames")
    out = clip.copy()
    positions = out.root_positions()
    diffs = positions[1:] - positions[:-1]
    out.frames[0].root_velocity = diffs[0].copy()
    for t in range(1, len(out)):
        out.frames[t].root_velocity = diffs[t - 1].copy()
    return out


def reverse_pose_time(pose: Pose) -> Pose:
    """The same posture expressed in the opposite time direction.

    Positions, rotations and contacts are direction-agnostic; the root
    velocity flips sign.
    """
    out = pose.copy()
    out.root_velocity = -out.root_velocity
    return out


def poses_bitequal(a: Pose, b: Pose) -> bool:
    return (
        np.array_equal(a.root_position, b.root_position)
        and np.array_equal(a.root_velocity, b.root_velocity)
        and np.array_equal(a.local_rotations, b.local_rotations)
        and np.array_equal(a.contacts, b.contacts)
    )
