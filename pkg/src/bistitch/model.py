"""Stitching CVAE generator: per-frame encoders, recurrent trunk, dual
distribution heads with latent interpolation, and a phase-gated
mixture-of-experts decoder that predicts state updates.

Forward and backward generators are two independent instances of
:class:`SCVAE` with no parameter sharing; the backward one is trained on
time-reversed clips and rolls out in reversed time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import tquat
from .core import Pose, Skeleton, StructuralError
from .phase import PhaseNet, PhaseVector

LOG_VAR_RANGE = 10.0


# ---------------------------------------------------------------------------
# configuration and latent containers
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    joint_count: int
    latent_dim: int = 128
    encoder_hidden: int = 256
    recurrent_hidden: int = 512
    expert_count: int = 4
    expert_hidden: int = 256
    gate_hidden: int = 64
    phase_dim: int = 4
    gamma_mode: str = "linear"
    sample_mode: str = "encoder"  # or "prior"
    deterministic: bool = False   # z = mean instead of a reparameterized draw

    def __post_init__(self):
        for name in ("joint_count", "latent_dim", "encoder_hidden", "recurrent_hidden",
                     "expert_count", "expert_hidden", "gate_hidden", "phase_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gamma_mode != "linear":
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.sample_mode not in ("encoder", "prior"):
            raise ValueError(f"unknown sample_mode {self.sample_mode!r}")

    @property
    def state_dim(self) -> int:
        return 4 * self.joint_count + 7  # quats + contacts + root velocity

    @property
    def offset_dim(self) -> int:
        return 4 * self.joint_count + 3  # quat offsets + root position offset

    @property
    def update_dim(self) -> int:
        return 3 + 4 * self.joint_count + 4  # velocity, quat updates, contact logits


@dataclass
class LatentDistribution:
    """Diagonal Gaussian in the latent space (log-variance parameterization)."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise StructuralError("mean and log_variance must share a shape")

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    def detach(self) -> "LatentDistribution":
        return LatentDistribution(self.mean.detach(), self.log_variance.detach())


def latent_interpolate(
    current: LatentDistribution, target: LatentDistribution, gamma: float
) -> LatentDistribution:
    """Parameter-space blend of two diagonal Gaussians.

    Means blend linearly; variances blend linearly and are re-logged, so the
    result stays a reparameterizable diagonal Gaussian. gamma=0 returns the
    current distribution, gamma=1 the target one.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if current.mean.shape != target.mean.shape:
        raise StructuralError("latent distributions must share dimensions")
    if gamma == 0.0:
        return current
    if gamma == 1.0:
        return target
    mean = (1.0 - gamma) * current.mean + gamma * target.mean
    variance = (1.0 - gamma) * current.variance + gamma * target.variance
    return LatentDistribution(mean, torch.log(variance))


def sample_latent(
    dist: LatentDistribution,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
) -> torch.Tensor:
    """Reparameterized draw ``z = mean + exp(log_var / 2) * eps``.

    Differentiable with respect to both parameters; ``deterministic`` returns
    the mean.
    """
    if deterministic:
        return dist.mean
    eps = torch.randn(
        dist.mean.shape, generator=rng, dtype=dist.mean.dtype, device=dist.mean.device
    )
    return dist.mean + torch.exp(0.5 * dist.log_variance) * eps


# ---------------------------------------------------------------------------
# tensor-level pose carrier and features
# ---------------------------------------------------------------------------

class TensorPose(NamedTuple):
    """Batched pose tensors; contacts are probabilities in [0, 1]."""

    root_position: torch.Tensor  # [B, 3]
    root_velocity: torch.Tensor  # [B, 3]
    rotations: torch.Tensor      # [B, J, 4]
    contacts: torch.Tensor       # [B, 4]

    def reversed_time(self) -> "TensorPose":
        return self._replace(root_velocity=-self.root_velocity)


def tensor_pose(pose: Pose, dtype=torch.float32) -> TensorPose:
    return TensorPose(
        torch.as_tensor(pose.root_position, dtype=dtype).unsqueeze(0),
        torch.as_tensor(pose.root_velocity, dtype=dtype).unsqueeze(0),
        torch.as_tensor(pose.local_rotations, dtype=dtype).unsqueeze(0),
        torch.as_tensor(pose.contacts, dtype=dtype).unsqueeze(0),
    )


def pose_from_tensor(tp: TensorPose, index: int = 0) -> Pose:
    return Pose(
        tp.root_position[index].detach().cpu().numpy().astype(float),
        tp.root_velocity[index].detach().cpu().numpy().astype(float),
        tp.rotations[index].detach().cpu().numpy().astype(float),
        tp.contacts[index].detach().cpu().numpy() > 0.5,
    )


def state_features(tp: TensorPose) -> torch.Tensor:
    """[B, 4J+7]: flattened quaternions, contact flags, root velocity."""
    return torch.cat(
        [tp.rotations.flatten(start_dim=-2), tp.contacts, tp.root_velocity], dim=-1
    )


def offset_features(current: TensorPose, target: TensorPose) -> torch.Tensor:
    """[B, 4J+3]: component-wise quaternion offsets plus root position offset."""
    dq = (target.rotations - current.rotations).flatten(start_dim=-2)
    dp = target.root_position - current.root_position
    return torch.cat([dq, dp], dim=-1)


def pose_feature_dim(joint_count: int) -> int:
    return 4 * joint_count + 7


def pose_features_np(pose: Pose) -> np.ndarray:
    return np.concatenate(
        [pose.local_rotations.reshape(-1), pose.contacts.astype(float), pose.root_velocity]
    )


# ---------------------------------------------------------------------------
# mixture-of-experts decoder
# ---------------------------------------------------------------------------

class BlendedLinear(nn.Module):
    """Linear layer whose weights are a per-sample convex blend of experts."""

    def __init__(self, in_features: int, out_features: int, experts: int):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = nn.Parameter(
            torch.empty(experts, out_features, in_features).uniform_(-bound, bound)
        )
        self.bias = nn.Parameter(torch.empty(experts, out_features).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        weight = torch.einsum("be,eoi->boi", gate, self.weight)
        bias = gate @ self.bias
        return torch.einsum("boi,bi->bo", weight, x) + bias


class MoEDecoder(nn.Module):
    """Expert-blended MLP gated by the phase vector."""

    def __init__(self, input_dim: int, hidden: int, output_dim: int,
                 experts: int, phase_dim: int, gate_hidden: int):
        super().__init__()
        self.experts = experts
        self.gate_net = nn.Sequential(
            nn.Linear(phase_dim, gate_hidden),
            nn.ELU(),
            nn.Linear(gate_hidden, experts),
        )
        self.l1 = BlendedLinear(input_dim, hidden, experts)
        self.l2 = BlendedLinear(hidden, hidden, experts)
        self.l3 = BlendedLinear(hidden, output_dim, experts)
        self.act = nn.ELU()

    def gate(self, phase: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.gate_net(phase), dim=-1)

    def forward(self, x: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        h = self.act(self.l1(x, gate))
        h = self.act(self.l2(h, gate))
        return self.l3(h, gate)


# ---------------------------------------------------------------------------
# generator state and the S-CVAE module
# ---------------------------------------------------------------------------

@dataclass
class GeneratorState:
    """Mutable rollout carrier: recurrent memory plus current/target poses."""

    recurrent_state: tuple[torch.Tensor, torch.Tensor]
    current: Pose
    target: Pose
    step_index: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.step_index <= self.total_steps:
            raise StructuralError("step_index must lie in [0, total_steps]")

    def with_target(self, target: Pose) -> "GeneratorState":
        return replace(self, target=target)


class SCVAE(nn.Module):
    """One directional transition generator.

    The three per-frame encoders feed an LSTM cell; two linear heads produce
    the current- and target-frame latent distributions, which are gamma-
    blended before sampling. The decoder consumes the latent code plus the
    raw current/target state features and emits per-frame updates: a new root
    velocity, additive quaternion deltas and contact logits.
    """

    def __init__(self, config: GeneratorConfig, skeleton: Skeleton, phase_net: PhaseNet):
        super().__init__()
        if skeleton.joint_count != config.joint_count:
            raise StructuralError(
                f"config is for {config.joint_count} joints, skeleton has {skeleton.joint_count}"
            )
        if phase_net.input_dim != config.state_dim or phase_net.phase_dim != config.phase_dim:
            raise StructuralError("phase network dimensions do not match the generator config")
        self.config = config
        self.skeleton = skeleton
        self.phase_net = phase_net

        h = config.encoder_hidden
        self.state_encoder = _mlp3(config.state_dim, h)
        self.offset_encoder = _mlp3(config.offset_dim, h)
        self.target_encoder = _mlp3(config.state_dim, h)
        self.recurrent = nn.LSTMCell(3 * h, config.recurrent_hidden)
        self.current_head = nn.Linear(config.recurrent_hidden, 2 * config.latent_dim)
        self.target_head = nn.Linear(config.recurrent_hidden, 2 * config.latent_dim)
        self.decoder = MoEDecoder(
            config.latent_dim + 2 * config.state_dim,
            config.expert_hidden,
            config.update_dim,
            config.expert_count,
            config.phase_dim,
            config.gate_hidden,
        )

    # -- tensor-level pieces ------------------------------------------------

    def initial_hidden(self, batch: int, dtype=torch.float32, device=None):
        h = torch.zeros(batch, self.config.recurrent_hidden, dtype=dtype, device=device)
        return (h, h.clone())

    def encode_features(
        self,
        state_feat: torch.Tensor,
        offset_feat: torch.Tensor,
        target_feat: torch.Tensor,
        hidden: tuple[torch.Tensor, torch.Tensor],
    ) -> tuple[LatentDistribution, LatentDistribution, tuple[torch.Tensor, torch.Tensor]]:
        embedding = torch.cat(
            [
                self.state_encoder(state_feat),
                self.offset_encoder(offset_feat),
                self.target_encoder(target_feat),
            ],
            dim=-1,
        )
        hidden = self.recurrent(embedding, hidden)
        current = _head_distribution(self.current_head, hidden[0])
        target = _head_distribution(self.target_head, hidden[0])
        return current, target, hidden

    def decode_features(
        self,
        z: torch.Tensor,
        state_feat: torch.Tensor,
        target_feat: torch.Tensor,
        phase: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        gate = self.decoder.gate(phase)
        out = self.decoder(torch.cat([z, state_feat, target_feat], dim=-1), gate)
        J = self.config.joint_count
        velocity = out[..., :3]
        quat_updates = out[..., 3:3 + 4 * J].reshape(*out.shape[:-1], J, 4)
        contact_logits = out[..., 3 + 4 * J:]
        return velocity, quat_updates, contact_logits

    def step_tensors(
        self,
        current: TensorPose,
        target: TensorPose,
        hidden: tuple[torch.Tensor, torch.Tensor],
        gamma: float,
        rng: torch.Generator | None = None,
        sample_mode: str | None = None,
        deterministic: bool | None = None,
    ) -> tuple[TensorPose, tuple[torch.Tensor, torch.Tensor], LatentDistribution]:
        """One autoregressive step over batched tensors (differentiable)."""
        state_feat = state_features(current)
        target_feat = state_features(target)
        offset_feat = offset_features(current, target)
        dist_c, dist_t, hidden = self.encode_features(state_feat, offset_feat, target_feat, hidden)
        used = latent_interpolate(dist_c, dist_t, gamma)
        mode = sample_mode if sample_mode is not None else self.config.sample_mode
        det = self.config.deterministic if deterministic is None else deterministic
        if mode == "prior":
            z = sample_latent(
                LatentDistribution(torch.zeros_like(used.mean), torch.zeros_like(used.mean)),
                rng,
                det,
            )
        else:
            z = sample_latent(used, rng, det)
        phase = self.phase_net(state_feat)
        velocity, quat_updates, contact_logits = self.decode_features(
            z, state_feat, target_feat, phase
        )
        nxt = TensorPose(
            current.root_position + velocity,
            velocity,
            tquat.normalize(current.rotations + quat_updates),
            torch.sigmoid(contact_logits),
        )
        return nxt, hidden, used

    # -- pose-level API -----------------------------------------------------

    def begin(self, start: Pose, target: Pose, total_steps: int) -> GeneratorState:
        """Fresh rollout state: zeroed recurrent memory at step 0."""
        start.validate(self.skeleton)
        target.validate(self.skeleton)
        return GeneratorState(
            self.initial_hidden(1), start.copy(), target.copy(), 0, total_steps
        )

    def encode(
        self, state: GeneratorState
    ) -> tuple[LatentDistribution, LatentDistribution, tuple[torch.Tensor, torch.Tensor]]:
        """Current/target latent distributions plus the advanced recurrent state."""
        state.current.validate(self.skeleton)
        state.target.validate(self.skeleton)
        current = tensor_pose(state.current)
        target = tensor_pose(state.target)
        with torch.no_grad():
            dist_c, dist_t, hidden = self.encode_features(
                state_features(current),
                offset_features(current, target),
                state_features(target),
                state.recurrent_state,
            )
        squeeze = lambda d: LatentDistribution(d.mean.squeeze(0), d.log_variance.squeeze(0))
        return squeeze(dist_c), squeeze(dist_t), hidden

    def step(
        self, state: GeneratorState, gamma: float, rng: torch.Generator | None = None
    ) -> tuple[Pose, GeneratorState, LatentDistribution]:
        """Generate the next pose and advance the rollout state."""
        if state.step_index >= state.total_steps:
            raise StructuralError(
                f"rollout exhausted: step {state.step_index} of {state.total_steps}"
            )
        current = tensor_pose(state.current)
        target = tensor_pose(state.target)
        with torch.no_grad():
            nxt, hidden, used = self.step_tensors(
                current, target, state.recurrent_state, gamma, rng
            )
        pose = pose_from_tensor(nxt)
        new_state = GeneratorState(
            hidden, pose.copy(), state.target, state.step_index + 1, state.total_steps
        )
        return pose, new_state, LatentDistribution(used.mean.squeeze(0), used.log_variance.squeeze(0))

    def identify_phase(self, pose: Pose) -> PhaseVector:
        feats = torch.as_tensor(pose_features_np(pose), dtype=torch.float32).unsqueeze(0)
        with torch.no_grad():
            values = self.phase_net(feats)
        return PhaseVector(values.squeeze(0).numpy())


def gamma_schedule(step: int, total_steps: int) -> float:
    """Blend weight for 1-indexed step s of T: s / T, reaching 1 at the far end."""
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside 1..{total_steps}")
    return step / total_steps


def _mlp3(input_dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(input_dim, hidden),
        nn.ELU(),
        nn.Linear(hidden, hidden),
        nn.ELU(),
        nn.Linear(hidden, hidden),
    )


def _head_distribution(head: nn.Linear, h: torch.Tensor) -> LatentDistribution:
    out = head(h)
    mean, log_var = out.chunk(2, dim=-1)
    return LatentDistribution(mean, log_var.clamp(-LOG_VAR_RANGE, LOG_VAR_RANGE))
