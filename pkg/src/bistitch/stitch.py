"""Bi-directional transition generation with mid-sequence stitching.

Both generators roll out ``ceil(L/2) + K`` frames, cross-conditioning on the
opposite side's newest frame each iteration (forward steps first). The
backward rollout runs in reversed time and is flipped back for assembly. The
keyframes are copied, never generated, so the output matches them bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .core import (
    MotionClip,
    Pose,
    StructuralError,
    forward_kinematics,
    poses_bitequal,
    reverse_pose_time,
)
from .losses import stitching_loss
from .model import SCVAE, gamma_schedule
from .slerp import slerp


@dataclass
class TransitionTask:
    """One in-betweening request: two keyframes plus generation settings."""

    start: Pose
    end: Pose
    length: int            # transition frame count L (interior frames)
    buffer: int = 2        # synthesis buffer K
    samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("transition length must be >= 2")
        if not 1 <= self.buffer or 2 * self.buffer > self.length:
            raise ValueError("buffer must satisfy 1 <= K <= L/2")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass
class StitchResult:
    clip: MotionClip           # L+2 frames including both keyframes
    forward_raw: MotionClip    # generated forward frames (transition 1..T)
    backward_raw: MotionClip   # generated backward frames, reversed to forward time
    stitch_cost: float


def rollout_steps(length: int, buffer: int) -> int:
    """Frames generated by each side: ceil(L/2) + K."""
    return math.ceil(length / 2) + buffer


def blend_weights(buffer: int) -> np.ndarray:
    """Forward-source weights across the 2K overlap frames.

    w_m = (2K + 1 - m) / (2K + 1) for m = 1..2K: strictly inside (0, 1), so
    both sources contribute at every overlap frame, and the pairwise weights
    w and 1-w sum to 1 exactly.
    """
    m = np.arange(1, 2 * buffer + 1)
    return (2 * buffer + 1 - m) / (2 * buffer + 1)


def _resolve_rng(rng, seed: int) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed if rng is None else rng))
    return gen


def generate_bidirectional(
    fwd: SCVAE,
    bwd: SCVAE,
    task: TransitionTask,
    rng: int | torch.Generator | None = None,
    frame_rate: float = 30.0,
) -> StitchResult:
    """Alternate forward/backward steps, then blend and assemble the transition."""
    if not fwd.skeleton.matches(bwd.skeleton):
        raise StructuralError("forward and backward generators use different skeletons")
    skeleton = fwd.skeleton
    task.start.validate(skeleton)
    task.end.validate(skeleton)

    L, K = task.length, task.buffer
    T = rollout_steps(L, K)
    gen = _resolve_rng(rng, task.seed)

    state_f = fwd.begin(task.start, task.end, T)
    state_b = bwd.begin(reverse_pose_time(task.end), reverse_pose_time(task.start), T)

    fwd_frames: list[Pose] = []
    bwd_frames: list[Pose] = []  # generation order: transition frames L, L-1, ...
    for i in range(1, T + 1):
        gamma = gamma_schedule(i, T)
        pose_f, state_f, _ = fwd.step(state_f, gamma, gen)
        fwd_frames.append(pose_f)
        state_b = state_b.with_target(reverse_pose_time(pose_f))
        pose_b, state_b, _ = bwd.step(state_b, gamma, gen)
        bwd_frames.append(pose_b)
        state_f = state_f.with_target(reverse_pose_time(pose_b))

    forward_raw = MotionClip(skeleton, [p.copy() for p in fwd_frames], frame_rate)
    backward_raw = MotionClip(
        skeleton, [reverse_pose_time(p) for p in reversed(bwd_frames)], frame_rate
    )

    fwd_positions = np.stack(
        [forward_kinematics(skeleton, p.root_position, p.local_rotations) for p in fwd_frames]
    )
    bwd_positions = np.stack(
        [forward_kinematics(skeleton, p.root_position, p.local_rotations) for p in bwd_frames]
    )
    cost = float(stitching_loss(fwd_positions, bwd_positions, L, K))

    clip = blend_overlap(forward_raw, backward_raw, L, K, task.start, task.end)
    result = StitchResult(clip, forward_raw, backward_raw, cost)
    if not poses_bitequal(result.clip.frames[0], task.start):
        raise AssertionError("start keyframe was not copied bit-exactly")
    if not poses_bitequal(result.clip.frames[-1], task.end):
        raise AssertionError("end keyframe was not copied bit-exactly")
    return result


def blend_overlap(
    forward_raw: MotionClip,
    backward_raw: MotionClip,
    length: int,
    buffer: int,
    start: Pose,
    end: Pose,
) -> MotionClip:
    """Assemble the final L+2-frame clip from the two raw rollouts.

    ``backward_raw`` must already be in forward time, covering transition
    frames ``L-T+1 .. L``. On the 2K-frame window centered at the seam the
    output blends forward and backward frames (linear for root channels,
    slerp for quaternions, majority for contacts); outside the window frames
    copy their source rollout, and the keyframes bracket the result.
    """
    L, K = length, buffer
    T = rollout_steps(L, K)
    if len(forward_raw) != T or len(backward_raw) != T:
        raise StructuralError(
            f"raw rollouts must have {T} frames each, got "
            f"{len(forward_raw)} and {len(backward_raw)}"
        )
    skeleton = forward_raw.skeleton
    window_start = math.ceil(L / 2) - K + 1
    window_end = math.ceil(L / 2) + K
    weights = blend_weights(K)
    bwd_first_frame = L - T + 1  # transition index of backward_raw.frames[0]

    frames = [start.copy()]
    for t in range(1, L + 1):
        if t < window_start:
            frames.append(forward_raw.frames[t - 1].copy())
        elif t > window_end:
            frames.append(backward_raw.frames[t - bwd_first_frame].copy())
        else:
            w = float(weights[t - window_start])
            f = forward_raw.frames[t - 1]
            b = backward_raw.frames[t - bwd_first_frame]
            pos = w * f.root_position + (1.0 - w) * b.root_position
            vel = w * f.root_velocity + (1.0 - w) * b.root_velocity
            quats = np.stack(
                [
                    slerp(f.local_rotations[j], b.local_rotations[j], 1.0 - w)
                    for j in range(skeleton.joint_count)
                ]
            )
            contacts = (f.contacts if w > 0.5 else b.contacts).copy()
            frames.append(Pose(pos, vel, quats, contacts))
    frames.append(end.copy())
    return MotionClip(skeleton, frames, forward_raw.frame_rate)


def latent_pair_search(
    fwd: SCVAE,
    bwd: SCVAE,
    task: TransitionTask,
    candidates: int,
    rng: int | None = None,
    frame_rate: float = 30.0,
) -> StitchResult:
    """Pick the bidirectional rollout with minimal stitch cost.

    Runs ``candidates`` independent rollouts on consecutive seeds derived
    from the task seed (or the given override) and returns the argmin.
    """
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    base_seed = task.seed if rng is None else int(rng)
    best: StitchResult | None = None
    for i in range(candidates):
        result = generate_bidirectional(
            fwd, bwd, replace(task, seed=base_seed + i), frame_rate=frame_rate
        )
        if best is None or result.stitch_cost < best.stitch_cost:
            best = result
    return best
