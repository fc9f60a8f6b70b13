"""Corpus construction: windowed training fragments, time reversal for the
backward generator, and a procedural gait generator for desk-scale tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    MotionClip,
    Pose,
    Skeleton,
    StructuralError,
    derive_velocities,
    quat_from_axis_angle,
    quat_identity,
)


@dataclass
class WindowSpec:
    """Sliding-window parameters for fragment sampling."""

    window: int = 50
    offset: int = 20

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("window must be >= 3")
        if self.offset < 1:
            raise ValueError("offset must be >= 1")


def make_fragments(
    clips: list[MotionClip], spec: WindowSpec, counts: dict | None = None
) -> list[MotionClip]:
    """Slide windows over each clip with the given stride.

    Fragment ordering is deterministic: clip order, then window start, with
    fragment f of a clip starting at ``f * offset``. Clips shorter than the
    window yield nothing; when ``counts`` is given it receives
    ``{"fragments": n, "skipped": m}``.
    """
    fragments: list[MotionClip] = []
    skipped = 0
    for clip in clips:
        if len(clip) < spec.window:
            skipped += 1
            continue
        for start in range(0, len(clip) - spec.window + 1, spec.offset):
            frames = [clip.frames[t].copy() for t in range(start, start + spec.window)]
            fragments.append(MotionClip(clip.skeleton, frames, clip.frame_rate))
    if counts is not None:
        counts["fragments"] = len(fragments)
        counts["skipped"] = skipped
    return fragments


def reverse_clip(clip: MotionClip) -> MotionClip:
    """Time-reverse a clip; velocities are re-derived on the reversed order.

    Positions, rotations and per-frame contacts are preserved, so reversing
    twice restores them exactly.
    """
    if len(clip) < 2:
        raise StructuralError("reversal needs at least two frames")
    reversed_frames = [f.copy() for f in reversed(clip.frames)]
    return derive_velocities(MotionClip(clip.skeleton, reversed_frames, clip.frame_rate))


# ---------------------------------------------------------------------------
# procedural gait
# ---------------------------------------------------------------------------

HIP_HEIGHT = 9.0

_GAIT_JOINTS = (
    ("hips", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 3.0, 0.0)),
    ("left_hip", 0, (0.0, 0.0, 1.2)),
    ("left_knee", 2, (0.0, -5.0, 0.0)),
    ("left_foot", 3, (0.0, -4.0, 0.0)),
    ("left_toe", 4, (1.0, 0.0, 0.0)),
    ("right_hip", 0, (0.0, 0.0, -1.2)),
    ("right_knee", 6, (0.0, -5.0, 0.0)),
    ("right_foot", 7, (0.0, -4.0, 0.0)),
    ("right_toe", 8, (1.0, 0.0, 0.0)),
)


def synth_skeleton() -> Skeleton:
    """Ten-joint biped (y-up, walks along +x) used by the synthetic corpus."""
    names = tuple(j[0] for j in _GAIT_JOINTS)
    parents = tuple(j[1] for j in _GAIT_JOINTS)
    offsets = np.array([j[2] for j in _GAIT_JOINTS])
    return Skeleton(names, parents, offsets)


def synth_gait(
    duration: int,
    speed: float = 0.15,
    skeleton: Skeleton | None = None,
    period: int = 30,
    phase_offset: float = 0.0,
    frame_rate: float = 30.0,
    hip_amplitude: float = 0.7,
    knee_amplitude: float = 0.5,
    ankle_amplitude: float = 0.25,
) -> MotionClip:
    """Procedural sinusoidal walk with an analytically known contact schedule.

    Each foot alternates a frozen half-cycle (stance: the foot rides along at
    the root speed, at ground height) with a sinusoidal swing half-cycle (hip
    follows a half-sine, knee and ankle full sines over the swing). The
    per-frame contact flags are derived from the construction: a foot is in
    contact when it and both temporal neighbours sit inside the frozen
    window, which is exactly what threshold-based extraction recovers when
    ``speed`` stays below the stance speed threshold.
    """
    if duration < 2:
        raise ValueError("duration must be >= 2")
    if skeleton is None:
        skeleton = synth_skeleton()
    J = skeleton.joint_count
    z_axis = np.array([0.0, 0.0, 1.0])

    def cycle_pos(t: int, shift: float) -> float:
        return (t / period + phase_offset + shift) % 1.0

    def leg_angles(c: float) -> tuple[float, float, float]:
        if c < 0.5:  # stance: frozen
            return 0.0, 0.0, 0.0
        u = (c - 0.5) * 2.0
        hip = hip_amplitude * math.sin(math.pi * u)
        knee = knee_amplitude * math.sin(2.0 * math.pi * u)
        ankle = ankle_amplitude * math.sin(2.0 * math.pi * u)
        return hip, knee, ankle

    stance = {
        "left": np.array([cycle_pos(t, 0.0) < 0.5 for t in range(duration)]),
        "right": np.array([cycle_pos(t, 0.5) < 0.5 for t in range(duration)]),
    }

    def contact_at(flags: np.ndarray, t: int) -> bool:
        lo = max(t - 1, 0)
        hi = min(t + 1, duration - 1)
        return bool(flags[lo:hi + 1].all())

    frames = []
    for t in range(duration):
        quats = np.tile(quat_identity(), (J, 1))
        for side, hip_j in (("left", 2), ("right", 6)):
            hip, knee, ankle = leg_angles(cycle_pos(t, 0.0 if side == "left" else 0.5))
            quats[hip_j] = quat_from_axis_angle(z_axis, hip)
            quats[hip_j + 1] = quat_from_axis_angle(z_axis, knee)
            quats[hip_j + 2] = quat_from_axis_angle(z_axis, ankle)
        contacts = np.array(
            [
                contact_at(stance["left"], t),
                contact_at(stance["left"], t),
                contact_at(stance["right"], t),
                contact_at(stance["right"], t),
            ]
        )
        root = np.array([speed * t, HIP_HEIGHT, 0.0])
        frames.append(Pose(root, np.zeros(3), quats, contacts))

    return derive_velocities(MotionClip(skeleton, frames, frame_rate))
