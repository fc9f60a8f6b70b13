"""Deterministic interpolation baseline: linear root, spherical quaternions."""

from __future__ import annotations

import numpy as np

from .core import MotionClip, Pose, Skeleton, StructuralError, derive_velocities


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Constant-angular-velocity interpolation between unit quaternions.

    Takes the shorter arc (negates ``b`` when the dot product is negative)
    and falls back to normalized linear interpolation for nearly parallel
    inputs.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-6:
        out = (1.0 - t) * a + t * b
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    w0 = np.sin((1.0 - t) * theta) / sin_theta
    w1 = np.sin(t * theta) / sin_theta
    out = w0 * a + w1 * b
    return out / np.linalg.norm(out)


def interpolate_transition(start: Pose, end: Pose, length: int, skeleton: Skeleton,
                           frame_rate: float = 30.0) -> MotionClip:
    """L+2-frame transition: copied keyframes around slerped interior frames.

    Interior frame t uses parameter t/(L+1); the root position interpolates
    linearly and every joint quaternion spherically. Interior contacts copy
    the nearer keyframe. Output is deterministic, so repeated calls are
    byte-identical.
    """
    if length < 1:
        raise StructuralError("transition length must be >= 1")
    start.validate(skeleton)
    end.validate(skeleton)
    if start.local_rotations.shape != end.local_rotations.shape:
        raise StructuralError("start and end poses must share a skeleton")

    frames = [start.copy()]
    J = skeleton.joint_count
    for t in range(1, length + 1):
        u = t / (length + 1)
        pos = (1.0 - u) * start.root_position + u * end.root_position
        quats = np.stack(
            [slerp(start.local_rotations[j], end.local_rotations[j], u) for j in range(J)]
        )
        contacts = (start.contacts if u <= 0.5 else end.contacts).copy()
        frames.append(Pose(pos, np.zeros(3), quats, contacts))
    frames.append(end.copy())

    clip = derive_velocities(MotionClip(skeleton, frames, frame_rate))
    # keep the keyframes bit-exact, including their stored velocities
    clip.frames[0] = start.copy()
    clip.frames[-1] = end.copy()
    return clip
