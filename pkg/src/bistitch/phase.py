"""Gait-phase labelling from contact cycles and the phase identification net.

Each foot gets a cyclic phase that advances linearly from 0 at a contact
onset to 1 at that foot's next onset; a foot's contact is the OR of its ankle
and toe flags. Phases are emitted as (sin 2*pi*phi, cos 2*pi*phi) pairs,
giving a 4-dimensional vector for the two feet.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import MotionClip, Pose


@dataclass
class PhaseVector:
    """(sin, cos) pairs of per-foot local phases."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.shape[0] % 2 != 0:
            raise ValueError("phase vector must hold (sin, cos) pairs")

    def pair_norms(self) -> np.ndarray:
        pairs = self.values.reshape(-1, 2)
        return np.linalg.norm(pairs, axis=-1)


def _onsets(flags: np.ndarray) -> np.ndarray:
    """Frame indices where a contact flag rises."""
    rising = np.flatnonzero(flags[1:] & ~flags[:-1]) + 1
    if flags[0]:
        rising = np.concatenate([[0], rising])
    return rising


def _foot_phase(flags: np.ndarray, label: str) -> np.ndarray:
    """Per-frame cyclic phase for one foot from its contact flags."""
    T = flags.shape[0]
    onsets = _onsets(flags)
    if len(onsets) < 2:
        warnings.warn(
            f"{label}: fewer than two contact onsets; emitting constant phase",
            RuntimeWarning,
            stacklevel=3,
        )
        return np.zeros(T)
    phi = np.empty(T)
    for a, b in zip(onsets[:-1], onsets[1:]):
        span = b - a
        phi[a:b] = (np.arange(a, b) - a) / span
    # extrapolate the flanks with the neighbouring cycle's rate
    first_span = onsets[1] - onsets[0]
    last_span = onsets[-1] - onsets[-2]
    before = np.arange(0, onsets[0])
    phi[before] = (before - onsets[0]) / first_span
    after = np.arange(onsets[-1], T)
    phi[after] = (after - onsets[-1]) / last_span
    return phi


def label_phases(clip: MotionClip) -> np.ndarray:
    """[T, 4] phase labels (sinL, cosL, sinR, cosR) from extracted contacts."""
    flags = clip.contact_flags()  # [T, 4]: l_ankle, l_toe, r_ankle, r_toe
    left = flags[:, 0] | flags[:, 1]
    right = flags[:, 2] | flags[:, 3]
    out = np.empty((len(clip), 4))
    for col, (foot, label) in enumerate([(left, "left foot"), (right, "right foot")]):
        phi = _foot_phase(foot, label)
        out[:, 2 * col] = np.sin(2.0 * np.pi * phi)
        out[:, 2 * col + 1] = np.cos(2.0 * np.pi * phi)
    return out


class PhaseNet(nn.Module):
    """Small MLP mapping a pose feature vector to soft-normalized phase pairs.

    Pretrained against contact-cycle labels and frozen during generator
    training.
    """

    def __init__(self, input_dim: int, phase_dim: int = 4, hidden: int = 64):
        super().__init__()
        if phase_dim % 2 != 0:
            raise ValueError("phase_dim must be even ((sin, cos) pairs)")
        self.input_dim = input_dim
        self.phase_dim = phase_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden),
            nn.ELU(),
            nn.Linear(hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, phase_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.net(x)
        pairs = raw.view(*raw.shape[:-1], self.phase_dim // 2, 2)
        norm = pairs.norm(dim=-1, keepdim=True)
        pairs = pairs / torch.sqrt(norm * norm + 1e-8)
        return pairs.reshape(*raw.shape)

    def freeze(self) -> "PhaseNet":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def phase_angle_error(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Absolute angular gap (radians) between (sin, cos) pairs, per pair."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    label = np.asarray(label, dtype=float).reshape(-1, 2)
    ang_p = np.arctan2(pred[:, 0], pred[:, 1])
    ang_l = np.arctan2(label[:, 0], label[:, 1])
    diff = np.angle(np.exp(1j * (ang_p - ang_l)))
    return np.abs(diff)
