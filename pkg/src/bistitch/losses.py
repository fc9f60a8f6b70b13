"""Training objectives: stitching, state reconstruction, KL, forward-kinematic
position loss, least-squares adversarial pair, and the weighted overall mix.

All losses accept numpy arrays or torch tensors; torch inputs keep their
autograd graph and dtype (use float64 inputs for finite-difference checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tquat
from .core import MotionClip, Skeleton, StructuralError
from .model import LatentDistribution


@dataclass
class LossWeights:
    """State-loss term weights (beta) and overall mix weights (alpha)."""

    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.1
    alpha1: float = 1.0   # KL
    alpha2: float = 0.5   # stitching
    alpha3: float = 0.5   # FK
    alpha4: float = 0.1   # discriminator
    alpha5: float = 0.1   # generator adversarial

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3", "alpha1", "alpha2", "alpha3", "alpha4", "alpha5"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# stitching loss
# ---------------------------------------------------------------------------

def stitching_loss(forward_positions, backward_positions, L: int, k: int) -> torch.Tensor:
    """Mean L1 gap over the 2k-frame overlap of the two rollouts.

    Index convention: ``forward_positions[i]`` holds the global joint
    positions of the (i+1)-th forward-generated frame, i.e. transition frame
    ``i+1``; ``backward_positions[i]`` holds the i-th backward-generated
    frame, i.e. transition frame ``L-i``. Arrays are ``[T, J, 3]`` or
    ``[B, T, J, 3]``; batches are averaged.
    """
    fwd = _as_tensor(forward_positions)
    bwd = _as_tensor(backward_positions)
    if k < 1:
        raise ValueError("k must be >= 1")
    lo = L // 2 - k + 1
    hi = L // 2 + k
    fwd_len = fwd.shape[-3]
    bwd_len = bwd.shape[-3]
    if lo < 1 or hi - 1 >= fwd_len:
        raise StructuralError(
            f"overlap frames {lo}..{hi} outside forward range 1..{fwd_len}"
        )
    if L - hi < 0 or L - lo >= bwd_len:
        raise StructuralError(
            f"overlap frames {lo}..{hi} need backward indices {L - hi}..{L - lo}, "
            f"have 0..{bwd_len - 1}"
        )
    total = fwd.new_zeros(())
    for t in range(lo, hi + 1):
        diff = fwd[..., t - 1, :, :] - bwd[..., L - t, :, :]
        per_frame = diff.abs().sum(dim=(-1, -2))
        total = total + per_frame.mean()
    return total / (2 * k)


# ---------------------------------------------------------------------------
# state reconstruction loss
# ---------------------------------------------------------------------------

def state_loss_terms(
    pred_quats, truth_quats, pred_velocities, truth_velocities,
    pred_contacts, truth_contacts, weights: LossWeights,
) -> torch.Tensor:
    """Per-frame weighted L1 over quaternions, root velocities and contacts.

    Frame axis is ``-2`` for velocities/contacts and ``-3`` for quaternions;
    the per-frame sums are averaged over frames (and any batch dims).
    """
    q_hat, q = _as_tensor(pred_quats), _as_tensor(truth_quats)
    v_hat, v = _as_tensor(pred_velocities), _as_tensor(truth_velocities)
    c_hat, c = _as_tensor(pred_contacts), _as_tensor(truth_contacts)
    if q_hat.shape != q.shape or v_hat.shape != v.shape or c_hat.shape != c.shape:
        raise StructuralError("prediction and truth shapes must match")
    per_frame = (
        weights.beta1 * (q_hat - q).abs().sum(dim=(-1, -2))
        + weights.beta2 * (v_hat - v).abs().sum(dim=-1)
        + weights.beta3 * (c_hat - c.to(c_hat.dtype)).abs().sum(dim=-1)
    )
    return per_frame.mean()


def state_loss(pred: MotionClip, truth: MotionClip, weights: LossWeights) -> float:
    """Clip-level reconstruction loss; boolean contacts compare as {0, 1}."""
    if len(pred) != len(truth):
        raise StructuralError(f"clip lengths differ: {len(pred)} vs {len(truth)}")
    value = state_loss_terms(
        pred.rotations(), truth.rotations(),
        pred.root_velocities(), truth.root_velocities(),
        pred.contact_flags().astype(float), truth.contact_flags().astype(float),
        weights,
    )
    return float(value)


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def kl_loss(dist: LatentDistribution) -> torch.Tensor:
    """Closed-form KL(N(mean, diag var) || N(0, I)), summed over latent dims.

    Leading (batch) dimensions are averaged.
    """
    var = dist.variance
    per_sample = 0.5 * (var + dist.mean ** 2 - 1.0 - dist.log_variance).sum(dim=-1)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# forward-kinematic position loss
# ---------------------------------------------------------------------------

def fk_loss(pred_quats, root_positions, truth_positions, skeleton: Skeleton) -> torch.Tensor:
    """Mean per-frame L1 between FK(root, predicted quats) and truth positions.

    Shapes: quats ``[*, T, J, 4]``, roots ``[*, T, 3]``, truth ``[*, T, J, 3]``.
    """
    quats = _as_tensor(pred_quats)
    roots = _as_tensor(root_positions)
    truth = _as_tensor(truth_positions)
    if quats.shape[-2] != skeleton.joint_count:
        raise StructuralError(
            f"expected {skeleton.joint_count} joints, got {quats.shape[-2]}"
        )
    positions = tquat.fk(quats, roots, skeleton)
    if positions.shape != truth.shape:
        raise StructuralError("truth positions shape does not match FK output")
    per_frame = (positions - truth).abs().sum(dim=(-1, -2))
    return per_frame.mean()


# ---------------------------------------------------------------------------
# least-squares adversarial pair
# ---------------------------------------------------------------------------

class WindowCritic(nn.Module):
    """MLP scoring one flattened motion window."""

    def __init__(self, input_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden),
            nn.ELU(),
            nn.Linear(hidden, hidden),
            nn.ELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


class DiscriminatorPair(nn.Module):
    """Short- and long-window critics over per-frame motion features.

    Features are global joint positions concatenated with the root velocity,
    flattened per window.
    """

    def __init__(self, feature_dim: int, short_window: int = 2, long_window: int = 10,
                 hidden: int = 64):
        super().__init__()
        if not 1 <= short_window < long_window:
            raise ValueError("need 1 <= short_window < long_window")
        self.feature_dim = feature_dim
        self.short_window = short_window
        self.long_window = long_window
        self.short_net = WindowCritic(short_window * feature_dim, hidden)
        self.long_net = WindowCritic(long_window * feature_dim, hidden)

    def critics(self):
        return ((self.short_window, self.short_net), (self.long_window, self.long_net))


def _window_scores(net: nn.Module, seq: torch.Tensor, window: int) -> torch.Tensor:
    # seq: [B, T, F] -> stride-1 windows [B, N, W*F], frame-major flattening
    slices = seq.unfold(-2, window, 1)            # [B, N, F, W]
    slices = slices.transpose(-1, -2).flatten(-2)  # [B, N, W*F]
    return net(slices)


def lsgan_losses(
    disc: DiscriminatorPair, real_seq, fake_seq, skip_oversized: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares adversarial losses over stride-1 windows.

    Returns ``(generator_loss, discriminator_loss)``: the generator term is
    ``0.5 E[(D(fake) - 1)^2]`` and the discriminator term
    ``0.5 E[(D(real) - 1)^2] + 0.5 E[D(fake)^2]``, each averaged over the two
    critics. A window longer than the sequence raises unless
    ``skip_oversized`` drops that critic.
    """
    real = _as_tensor(real_seq)
    fake = _as_tensor(fake_seq)
    if real.dim() == 2:
        real = real.unsqueeze(0)
    if fake.dim() == 2:
        fake = fake.unsqueeze(0)
    g_terms, d_terms = [], []
    for window, net in disc.critics():
        if window > fake.shape[-2] or window > real.shape[-2]:
            if skip_oversized:
                continue
            raise StructuralError(
                f"discriminator window {window} exceeds sequence length "
                f"{min(real.shape[-2], fake.shape[-2])}"
            )
        d_real = _window_scores(net, real, window)
        d_fake = _window_scores(net, fake, window)
        g_terms.append(0.5 * ((d_fake - 1.0) ** 2).mean())
        d_terms.append(0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake ** 2).mean())
    if not g_terms:
        zero = fake.new_zeros(())
        return zero, zero.clone()
    return sum(g_terms) / len(g_terms), sum(d_terms) / len(d_terms)


# ---------------------------------------------------------------------------
# overall mix
# ---------------------------------------------------------------------------

def _component(value):
    if isinstance(value, (tuple, list)):
        parts = [_as_tensor(v) if not isinstance(v, torch.Tensor) else v for v in value]
        return sum(parts) / len(parts)
    return value if isinstance(value, torch.Tensor) else _as_tensor(value)


def overall_loss(state, kl, stitch, fk, adv_d, adv_g, weights: LossWeights):
    """Weighted total objective.

    ``state``, ``kl`` and ``fk`` may be (forward, backward) pairs, which are
    averaged; the remaining components are scalars. Note the adversarial
    terms are listed jointly here but applied to disjoint parameter sets by
    the trainer (alternating updates).
    """
    return (
        _component(state)
        + weights.alpha1 * _component(kl)
        + weights.alpha2 * _component(stitch)
        + weights.alpha3 * _component(fk)
        + weights.alpha4 * _component(adv_d)
        + weights.alpha5 * _component(adv_g)
    )
