"""Differentiable quaternion and forward-kinematics ops (torch mirror of core)."""

from __future__ import annotations

import numpy as np
import torch

from .core import Skeleton


def normalize(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Unit-normalize quaternions along the last dimension."""
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product over `(..., 4)` tensors, renormalized."""
    w1, x1, y1, z1 = a.unbind(-1)
    w2, x2, y2, z2 = b.unbind(-1)
    out = torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )
    return normalize(out)


def rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate vectors by quaternions (`v' = q v q*`), broadcasting."""
    qvec = q[..., 1:]
    uv = torch.cross(qvec, v, dim=-1)
    uuv = torch.cross(qvec, uv, dim=-1)
    return v + 2.0 * (q[..., :1] * uv + uuv)


def fk(
    quats: torch.Tensor, root_position: torch.Tensor, skeleton: Skeleton
) -> torch.Tensor:
    """Batched forward kinematics.

    quats: (..., J, 4); root_position: (..., 3). Returns (..., J, 3).
    """
    offsets = torch.as_tensor(
        np.asarray(skeleton.local_offset), dtype=quats.dtype, device=quats.device
    )
    positions = [root_position]
    rotations = [normalize(quats[..., 0, :])]
    for j in range(1, skeleton.joint_count):
        p = skeleton.parent_index[j]
        positions.append(positions[p] + rotate(rotations[p], offsets[j].expand_as(root_position)))
        rotations.append(multiply(rotations[p], quats[..., j, :]))
    return torch.stack(positions, dim=-2)


def slerp(a: torch.Tensor, b: torch.Tensor, t: float) -> torch.Tensor:
    """Shorter-arc spherical interpolation over `(..., 4)` tensors."""
    dot = (a * b).sum(dim=-1, keepdim=True)
    b = torch.where(dot < 0.0, -b, b)
    dot = dot.abs().clamp(-1.0, 1.0)
    theta = torch.acos(dot.clamp(max=1.0 - 1e-7))
    sin_theta = torch.sin(theta).clamp_min(1e-12)
    w0 = torch.sin((1.0 - t) * theta) / sin_theta
    w1 = torch.sin(t * theta) / sin_theta
    out = w0 * a + w1 * b
    lerp = (1.0 - t) * a + t * b
    out = torch.where(dot > 1.0 - 1e-6, lerp, out)
    return normalize(out)
