"""Optimization loop: progressive transition-length curriculum, alternating
generator/discriminator updates, phase-network pretraining and checkpoints.

Generators always consume their own predictions during training rollouts
(no teacher forcing); ground truth enters only through the losses.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import tquat
from .core import MotionClip, Skeleton, StructuralError
from .data import reverse_clip
from .losses import (
    DiscriminatorPair,
    LossWeights,
    fk_loss,
    kl_loss,
    lsgan_losses,
    state_loss_terms,
    stitching_loss,
)
from .model import (
    SCVAE,
    GeneratorConfig,
    LatentDistribution,
    TensorPose,
    gamma_schedule,
    pose_feature_dim,
    pose_features_np,
)
from .phase import PhaseNet, label_phases
from .stitch import blend_weights, rollout_steps


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    curriculum_start: int = 5
    curriculum_end: int = 50
    curriculum_epochs_per_step: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    stitch_buffer: int = 2
    epochs_tail: int = 10
    phase_epochs: int = 100
    phase_lr: float = 1e-2
    disc_short: int = 2
    disc_long: int = 10
    disc_hidden: int = 64
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.curriculum_start > self.curriculum_end:
            raise ValueError("curriculum_start must not exceed curriculum_end")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.curriculum_epochs_per_step < 1:
            raise ValueError("curriculum_epochs_per_step must be >= 1")

    def total_epochs(self) -> int:
        ramp = (self.curriculum_end - self.curriculum_start) * self.curriculum_epochs_per_step
        return ramp + self.epochs_tail


def curriculum_length(epoch: int, cfg: TrainConfig) -> int:
    """Transition length for an epoch: start + epoch // epochs_per_step, clamped."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(
        cfg.curriculum_start + epoch // cfg.curriculum_epochs_per_step,
        cfg.curriculum_end,
    )


# ---------------------------------------------------------------------------
# batched ground-truth tensors
# ---------------------------------------------------------------------------

def _clip_tensors(clips: list[MotionClip], length: int, dtype=torch.float32) -> dict:
    """Stack the first ``length + 2`` frames of each clip into batch tensors."""
    rot = np.stack([c.rotations()[: length + 2] for c in clips])
    pos = np.stack([c.root_positions()[: length + 2] for c in clips])
    vel = np.stack([c.root_velocities()[: length + 2] for c in clips])
    con = np.stack([c.contact_flags()[: length + 2] for c in clips]).astype(float)
    return {
        "rotations": torch.as_tensor(rot, dtype=dtype),
        "positions": torch.as_tensor(pos, dtype=dtype),
        "velocities": torch.as_tensor(vel, dtype=dtype),
        "contacts": torch.as_tensor(con, dtype=dtype),
    }


def _frame(gt: dict, t: int) -> TensorPose:
    return TensorPose(
        gt["positions"][:, t], gt["velocities"][:, t], gt["rotations"][:, t], gt["contacts"][:, t]
    )


def _rollout(
    fwd: SCVAE,
    bwd: SCVAE,
    gt_fwd: dict,
    gt_bwd: dict,
    length: int,
    buffer: int,
    rng: torch.Generator,
) -> dict:
    """Differentiable cross-conditioned rollout of both generators.

    Returns stacked per-step tensors (frame axis 1) plus the per-step blended
    latent distributions; backward outputs are in generation order.
    """
    T = rollout_steps(length, buffer)
    cur_f = _frame(gt_fwd, 0)
    cur_b = _frame(gt_bwd, 0)
    tgt_f = _frame(gt_fwd, length + 1)
    tgt_b = _frame(gt_bwd, length + 1)
    batch = cur_f.root_position.shape[0]
    hid_f = fwd.initial_hidden(batch)
    hid_b = bwd.initial_hidden(batch)

    steps_f, steps_b, dists_f, dists_b = [], [], [], []
    for i in range(1, T + 1):
        gamma = gamma_schedule(i, T)
        cur_f, hid_f, used_f = fwd.step_tensors(
            cur_f, tgt_f, hid_f, gamma, rng, sample_mode="encoder"
        )
        steps_f.append(cur_f)
        dists_f.append(used_f)
        tgt_b = cur_f.reversed_time()
        cur_b, hid_b, used_b = bwd.step_tensors(
            cur_b, tgt_b, hid_b, gamma, rng, sample_mode="encoder"
        )
        steps_b.append(cur_b)
        dists_b.append(used_b)
        tgt_f = cur_b.reversed_time()

    def stack(steps: list[TensorPose]) -> TensorPose:
        return TensorPose(*(torch.stack([getattr(s, f) for s in steps], dim=1)
                            for f in TensorPose._fields))

    def stack_dists(dists: list[LatentDistribution]) -> LatentDistribution:
        return LatentDistribution(
            torch.stack([d.mean for d in dists], dim=1),
            torch.stack([d.log_variance for d in dists], dim=1),
        )

    return {
        "steps": T,
        "forward": stack(steps_f),
        "backward": stack(steps_b),
        "dist_forward": stack_dists(dists_f),
        "dist_backward": stack_dists(dists_b),
    }


def _adversarial_features(
    positions_f: torch.Tensor,
    velocities_f: torch.Tensor,
    positions_b: torch.Tensor,
    velocities_b: torch.Tensor,
    gt_fwd: dict,
    gt_positions: torch.Tensor,
    length: int,
    buffer: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(real, fake) per-frame feature sequences ``[B, L+2, J*3+3]``.

    The fake transition blends the two rollouts' positions/velocities across
    the seam with the stitching weight grid; keyframe slots take the ground
    truth keys, matching the assembly's exact endpoint copies.
    """
    B, T = positions_f.shape[0], positions_f.shape[1]
    L, K = length, buffer
    window_start = math.ceil(L / 2) - K + 1
    window_end = math.ceil(L / 2) + K
    weights = blend_weights(K)
    bwd_first = L - T + 1

    # backward rollout is in generation order and reversed time
    pos_b = positions_b.flip(1)
    vel_b = -velocities_b.flip(1)

    frames_pos, frames_vel = [], []
    frames_pos.append(gt_positions[:, 0])
    frames_vel.append(gt_fwd["velocities"][:, 0])
    for t in range(1, L + 1):
        if t < window_start:
            frames_pos.append(positions_f[:, t - 1])
            frames_vel.append(velocities_f[:, t - 1])
        elif t > window_end:
            frames_pos.append(pos_b[:, t - bwd_first])
            frames_vel.append(vel_b[:, t - bwd_first])
        else:
            w = float(weights[t - window_start])
            frames_pos.append(w * positions_f[:, t - 1] + (1 - w) * pos_b[:, t - bwd_first])
            frames_vel.append(w * velocities_f[:, t - 1] + (1 - w) * vel_b[:, t - bwd_first])
    frames_pos.append(gt_positions[:, L + 1])
    frames_vel.append(gt_fwd["velocities"][:, L + 1])

    fake_pos = torch.stack(frames_pos, dim=1)  # [B, L+2, J, 3]
    fake_vel = torch.stack(frames_vel, dim=1)
    fake = torch.cat([fake_pos.flatten(-2), fake_vel], dim=-1)
    real = torch.cat([gt_positions.flatten(-2), gt_fwd["velocities"]], dim=-1)
    return real, fake


def train_step(
    fragments: list[MotionClip],
    fwd: SCVAE,
    bwd: SCVAE,
    disc: DiscriminatorPair,
    cfg: TrainConfig,
    length: int,
    rng: torch.Generator,
    opt_g: torch.optim.Optimizer | None = None,
    opt_d: torch.optim.Optimizer | None = None,
    update: bool = True,
) -> dict:
    """One optimization step over a fragment batch at the given length.

    Fragments shorter than ``length + 2`` are skipped (reported in the
    record). Generator parameters update on the reconstruction/KL/stitch/FK/
    adversarial-generator mix; discriminator parameters update separately on
    the weighted critic loss with the generators frozen.
    """
    w = cfg.weights
    usable = [f for f in fragments if len(f) >= length + 2]
    record = {"length": length, "skipped": len(fragments) - len(usable)}
    if not usable:
        return record

    skeleton = fwd.skeleton
    K = max(1, min(cfg.stitch_buffer, length // 2))
    gt_fwd = _clip_tensors(usable, length)
    gt_bwd = _clip_tensors(
        [reverse_clip(MotionClip(skeleton, f.frames[: length + 2], f.frame_rate)) for f in usable],
        length,
    )
    with torch.no_grad():
        gt_pos_f = tquat.fk(gt_fwd["rotations"], gt_fwd["positions"], skeleton)
        gt_pos_b = tquat.fk(gt_bwd["rotations"], gt_bwd["positions"], skeleton)

    roll = _rollout(fwd, bwd, gt_fwd, gt_bwd, length, K, rng)
    T = roll["steps"]
    out_f, out_b = roll["forward"], roll["backward"]

    sl = slice(1, T + 1)
    state_f = state_loss_terms(
        out_f.rotations, gt_fwd["rotations"][:, sl],
        out_f.root_velocity, gt_fwd["velocities"][:, sl],
        out_f.contacts, gt_fwd["contacts"][:, sl], w,
    )
    state_b = state_loss_terms(
        out_b.rotations, gt_bwd["rotations"][:, sl],
        out_b.root_velocity, gt_bwd["velocities"][:, sl],
        out_b.contacts, gt_bwd["contacts"][:, sl], w,
    )
    kl_f = kl_loss(roll["dist_forward"])
    kl_b = kl_loss(roll["dist_backward"])
    fk_f = fk_loss(out_f.rotations, out_f.root_position, gt_pos_f[:, sl], skeleton)
    fk_b = fk_loss(out_b.rotations, out_b.root_position, gt_pos_b[:, sl], skeleton)

    pos_f = tquat.fk(out_f.rotations, out_f.root_position, skeleton)
    pos_b = tquat.fk(out_b.rotations, out_b.root_position, skeleton)
    stitch = stitching_loss(pos_f, pos_b, length, K)

    adv_g = torch.zeros(())
    adv_d = torch.zeros(())
    real = fake = None
    if w.alpha5 > 0 or w.alpha4 > 0:
        real, fake = _adversarial_features(
            pos_f, out_f.root_velocity, pos_b, out_b.root_velocity,
            gt_fwd, gt_pos_f, length, K,
        )
    if w.alpha5 > 0:
        disc.requires_grad_(False)
        adv_g, _ = lsgan_losses(disc, real, fake, skip_oversized=True)
        disc.requires_grad_(True)

    total_g = (
        0.5 * (state_f + state_b)
        + w.alpha1 * 0.5 * (kl_f + kl_b)
        + w.alpha2 * stitch
        + w.alpha3 * 0.5 * (fk_f + fk_b)
        + w.alpha5 * adv_g
    )
    if update:
        if opt_g is None:
            raise ValueError("update=True requires a generator optimizer")
        opt_g.zero_grad(set_to_none=True)
        total_g.backward()
        params = [p for group in opt_g.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt_g.step()

    if w.alpha4 > 0 and real is not None:
        _, adv_d = lsgan_losses(disc, real.detach(), fake.detach(), skip_oversized=True)
        if update:
            if opt_d is None:
                raise ValueError("update=True requires a discriminator optimizer")
            opt_d.zero_grad(set_to_none=True)
            (w.alpha4 * adv_d).backward()
            opt_d.step()

    record.update(
        state_forward=float(state_f), state_backward=float(state_b),
        kl_forward=float(kl_f), kl_backward=float(kl_b),
        fk_forward=float(fk_f), fk_backward=float(fk_b),
        stitch=float(stitch), adversarial_g=float(adv_g), adversarial_d=float(adv_d),
        total=float(total_g),
    )
    return record


# ---------------------------------------------------------------------------
# phase-network pretraining
# ---------------------------------------------------------------------------

def pretrain_phase_net(
    corpus: list[MotionClip],
    epochs: int,
    hidden: int = 64,
    lr: float = 1e-2,
    seed: int = 0,
    history: list | None = None,
) -> PhaseNet:
    """Fit the phase net to contact-cycle labels with full-batch MSE steps.

    The returned network is frozen (parameters no longer require gradients).
    """
    if not corpus:
        raise ValueError("phase pretraining needs a non-empty corpus")
    features, labels = [], []
    for clip in corpus:
        phases = label_phases(clip)
        for t, pose in enumerate(clip.frames):
            features.append(pose_features_np(pose))
            labels.append(phases[t])
    x = torch.as_tensor(np.stack(features), dtype=torch.float32)
    y = torch.as_tensor(np.stack(labels), dtype=torch.float32)

    torch.manual_seed(seed)
    net = PhaseNet(pose_feature_dim(corpus[0].skeleton.joint_count), y.shape[1], hidden)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad(set_to_none=True)
        loss = torch.mean((net(x) - y) ** 2)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(float(loss))
    return net.freeze()


# ---------------------------------------------------------------------------
# full training loop and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainedBundle:
    forward: SCVAE
    backward: SCVAE
    discriminator: DiscriminatorPair
    phase_net: PhaseNet
    skeleton: Skeleton
    gen_config: GeneratorConfig
    train_config: TrainConfig


class LossLogger:
    """Append-only JSON-lines loss log: {"step", "loss_name", "value"}."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def log(self, step: int, record: dict) -> None:
        for name, value in record.items():
            if isinstance(value, (int, float)):
                self._fh.write(
                    json.dumps({"step": step, "loss_name": name, "value": value}) + "\n"
                )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def generator_parameters(fwd: SCVAE, bwd: SCVAE):
    """Trainable generator parameters, deduplicated (the phase net is shared)."""
    seen = {}
    for p in list(fwd.parameters()) + list(bwd.parameters()):
        if p.requires_grad and id(p) not in seen:
            seen[id(p)] = p
    return list(seen.values())


def make_optimizers(
    fwd: SCVAE, bwd: SCVAE, disc: DiscriminatorPair, cfg: TrainConfig
) -> tuple[torch.optim.Optimizer, torch.optim.Optimizer]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.AdamW(
        generator_parameters(fwd, bwd), lr=cfg.learning_rate, betas=betas,
        weight_decay=cfg.weight_decay,
    )
    opt_d = torch.optim.AdamW(
        disc.parameters(), lr=cfg.learning_rate, betas=betas, weight_decay=cfg.weight_decay
    )
    return opt_g, opt_d


def train(
    fragments: list[MotionClip],
    skeleton: Skeleton,
    gen_cfg: GeneratorConfig,
    cfg: TrainConfig,
    epochs: int | None = None,
    phase_corpus: list[MotionClip] | None = None,
    log_path=None,
    progress=None,
) -> TrainedBundle:
    """Pretrain the phase net, then run the curriculum training loop."""
    if not fragments:
        raise StructuralError("training needs at least one fragment")
    torch.manual_seed(cfg.seed)
    sources = phase_corpus if phase_corpus else fragments
    phase_net = pretrain_phase_net(
        sources + [reverse_clip(c) for c in sources], cfg.phase_epochs,
        lr=cfg.phase_lr, seed=cfg.seed,
    )
    fwd = SCVAE(gen_cfg, skeleton, phase_net)
    bwd = SCVAE(gen_cfg, skeleton, phase_net)
    disc = DiscriminatorPair(
        3 * skeleton.joint_count + 3, cfg.disc_short, cfg.disc_long, cfg.disc_hidden
    )
    opt_g, opt_d = make_optimizers(fwd, bwd, disc, cfg)

    rng = torch.Generator(device="cpu")
    rng.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    logger = LossLogger(log_path) if log_path else None

    total_epochs = cfg.total_epochs() if epochs is None else epochs
    step = 0
    for epoch in range(total_epochs):
        length = curriculum_length(epoch, cfg)
        order = order_rng.permutation(len(fragments))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [fragments[i] for i in order[lo:lo + cfg.batch_size]]
            record = train_step(
                batch, fwd, bwd, disc, cfg, length, rng, opt_g, opt_d
            )
            if logger:
                logger.log(step, record)
            if progress:
                progress(epoch, step, record)
            step += 1
    if logger:
        logger.close()
    return TrainedBundle(fwd, bwd, disc, phase_net, skeleton, gen_cfg, cfg)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, bundle: TrainedBundle) -> None:
    """Versioned container: config echoes plus named weight blocks."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "generator_config": asdict(bundle.gen_config),
        "train_config": asdict(bundle.train_config),
        "skeleton": {
            "joint_names": list(bundle.skeleton.joint_names),
            "parent_index": list(bundle.skeleton.parent_index),
            "local_offset": bundle.skeleton.local_offset.tolist(),
        },
        "weights": {
            "forward": bundle.forward.state_dict(),
            "backward": bundle.backward.state_dict(),
            "discriminator": bundle.discriminator.state_dict(),
            "phase_net": bundle.phase_net.state_dict(),
        },
    }
    torch.save(payload, path)


def load_checkpoint(path) -> TrainedBundle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise StructuralError(f"unsupported checkpoint version {version}")
    skeleton = Skeleton(
        tuple(payload["skeleton"]["joint_names"]),
        tuple(payload["skeleton"]["parent_index"]),
        np.asarray(payload["skeleton"]["local_offset"]),
    )
    gen_cfg = GeneratorConfig(**payload["generator_config"])
    tc = dict(payload["train_config"])
    tc["weights"] = LossWeights(**tc["weights"])
    train_cfg = TrainConfig(**tc)

    phase_net = PhaseNet(pose_feature_dim(skeleton.joint_count), gen_cfg.phase_dim)
    phase_net.load_state_dict(payload["weights"]["phase_net"])
    phase_net.freeze()
    fwd = SCVAE(gen_cfg, skeleton, phase_net)
    bwd = SCVAE(gen_cfg, skeleton, phase_net)
    fwd.load_state_dict(payload["weights"]["forward"])
    bwd.load_state_dict(payload["weights"]["backward"])
    disc = DiscriminatorPair(
        3 * skeleton.joint_count + 3, train_cfg.disc_short, train_cfg.disc_long,
        train_cfg.disc_hidden,
    )
    disc.load_state_dict(payload["weights"]["discriminator"])
    fwd.eval()
    bwd.eval()
    disc.eval()
    return TrainedBundle(fwd, bwd, disc, phase_net, skeleton, gen_cfg, train_cfg)
