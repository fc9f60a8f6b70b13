"""Evaluation suite: diversity (APD), accuracy (ADE, SLDE), naturalness
(NPSS, foot slide) and per-frame displacement envelopes.

ADE and SLDE are computed on interior frames only, so exact keyframe copies
do not dilute the error. All metrics are non-negative, zero on identical
inputs, and invariant to a rigid translation applied jointly to all inputs.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .core import GROUND_AXES, MotionClip, StructuralError, find_contact_joints


def apd(samples: list[MotionClip]) -> float:
    """Average pairwise L2 distance of global joint positions.

    Mean over unordered sample pairs of the mean-over-frames-and-joints
    distance; at least two equal-length samples are required.
    """
    if len(samples) < 2:
        raise StructuralError("APD needs at least two samples")
    lengths = {len(s) for s in samples}
    if len(lengths) != 1:
        raise StructuralError(f"samples must share a length, got {sorted(lengths)}")
    positions = [clip.global_positions() for clip in samples]
    dists = [
        float(np.mean(np.linalg.norm(a - b, axis=-1)))
        for a, b in combinations(positions, 2)
    ]
    return float(np.mean(dists))


def _interior_positions(clip: MotionClip) -> np.ndarray:
    return clip.global_positions()[1:-1]


def ade(pred: MotionClip, truth: MotionClip) -> float:
    """Mean per-joint L2 position error over interior (generated) frames."""
    if len(pred) != len(truth):
        raise StructuralError(f"clip lengths differ: {len(pred)} vs {len(truth)}")
    if len(pred) < 3:
        raise StructuralError("ADE needs at least one interior frame")
    err = np.linalg.norm(_interior_positions(pred) - _interior_positions(truth), axis=-1)
    return float(err.mean())


def slde(pred: MotionClip, truth: MotionClip) -> float:
    """Mean per-joint L2 error at the second-to-last frame."""
    if len(pred) != len(truth):
        raise StructuralError(f"clip lengths differ: {len(pred)} vs {len(truth)}")
    if len(pred) < 2:
        raise StructuralError("SLDE needs at least two frames")
    t = len(pred) - 2
    pf = pred.global_positions()[t]
    tf = truth.global_positions()[t]
    return float(np.linalg.norm(pf - tf, axis=-1).mean())


def npss_features(pred: np.ndarray, truth: np.ndarray) -> float:
    """Power-weighted EMD between normalized power spectra, per feature dim.

    Inputs are ``[T, D]`` signals. Spectra use squared rFFT magnitudes with
    the DC bin dropped (constant offsets do not register); each dimension's
    spectrum is normalized to unit sum and the earth-mover's distance is the
    L1 gap of the cumulative spectra. Dimensions are aggregated weighted by
    the truth's total (non-DC) power; zero-power dimensions get weight 0.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise StructuralError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 4:
        raise StructuralError("NPSS needs at least 4 frames")
    pred_power = np.abs(np.fft.rfft(pred, axis=0)[1:]) ** 2   # [F, D]
    truth_power = np.abs(np.fft.rfft(truth, axis=0)[1:]) ** 2
    truth_total = truth_power.sum(axis=0)                     # [D]
    pred_total = pred_power.sum(axis=0)
    weight_sum = truth_total.sum()
    if weight_sum == 0.0:
        return 0.0
    value = 0.0
    for d in range(pred.shape[1]):
        if truth_total[d] == 0.0:
            continue
        t_norm = truth_power[:, d] / truth_total[d]
        p_norm = (
            pred_power[:, d] / pred_total[d]
            if pred_total[d] > 0.0
            else np.zeros_like(t_norm)
        )
        emd = np.abs(np.cumsum(p_norm) - np.cumsum(t_norm)).sum()
        value += emd * truth_total[d] / weight_sum
    return float(value)


def npss(pred: MotionClip, truth: MotionClip) -> float:
    """Spectral similarity over flattened local-quaternion channels."""
    if len(pred) != len(truth):
        raise StructuralError(f"clip lengths differ: {len(pred)} vs {len(truth)}")
    T = len(pred)
    return npss_features(
        pred.rotations().reshape(T, -1), truth.rotations().reshape(T, -1)
    )


def foot_slide(
    clip: MotionClip,
    contact_joints: tuple[int, int, int, int] | None = None,
    ground_axes: tuple[int, int] = GROUND_AXES,
) -> float:
    """Average horizontal sliding distance of stance-flagged contact joints.

    For every frame whose flag marks a joint as stance, its ground-plane
    displacement from the previous frame accumulates; the sum is averaged
    over the displacement frames.
    """
    if len(clip) < 2:
        raise StructuralError("foot slide needs at least two frames")
    joints = contact_joints if contact_joints is not None else find_contact_joints(clip.skeleton)
    positions = clip.global_positions()[:, list(joints), :][..., list(ground_axes)]  # [T, 4, 2]
    flags = clip.contact_flags()  # [T, 4]
    step = np.linalg.norm(positions[1:] - positions[:-1], axis=-1)  # [T-1, 4]
    slide = (step * flags[1:]).sum()
    return float(slide / (len(clip) - 1))


def displacement_curve(
    samples: list[MotionClip], truth: MotionClip
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame (min, max, mean) mean-over-joints displacement error envelope."""
    if not samples:
        raise StructuralError("displacement curve needs at least one sample")
    truth_pos = truth.global_positions()
    errors = []
    for clip in samples:
        if len(clip) != len(truth):
            raise StructuralError("sample/truth lengths differ")
        err = np.linalg.norm(clip.global_positions() - truth_pos, axis=-1).mean(axis=-1)
        errors.append(err)
    stack = np.stack(errors)  # [S, T]
    return stack.min(axis=0), stack.max(axis=0), stack.mean(axis=0)


REPORT_COLUMNS = ("APD", "ADE", "SLDE", "NPSS", "Foot Slide")


def render_table(rows: list[dict]) -> str:
    """Aligned text table with the standard column order."""
    header = ["Frames", "Method", *REPORT_COLUMNS]
    body = []
    for row in rows:
        body.append(
            [
                str(row.get("length", "")),
                str(row.get("method", "")),
                f"{row['apd']:.3f}",
                f"{row['ade']:.3f}",
                f"{row['slde']:.3f}",
                f"{row['npss']:.3f}",
                f"{row['foot_slide']:.3f}",
            ]
        )
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
