"""Single-step student distillation: deterministic teacher rollouts, the
omnidirectional phase loss, and bijective consistency losses.

The student is one network whose time input selects direction: t=1 maps the
surrogate to the target (single-step generation, via the final-step identity
x_0 = prediction at t=0), t=0 maps a target back toward the surrogate.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .bcd import BCD
from .bridge import BridgeSchedule, SamplerConfig, sample
from .objectives import (
    DiscriminatorBank,
    adv_disc_loss,
    adv_gen_loss,
    data_loss,
    feat_match_loss,
)
from .spectral import safe_abs, safe_angle
from .training import (
    Batch,
    DatasetManifest,
    TrainConfig,
    TrainState,
    TrainingDiverged,
    _optimizer,
    make_batch,
    restore_train_state,
    synthesize_waveform,
)


def omni_kernels(dtype=torch.float32, device=None) -> torch.Tensor:
    """Nine fixed 3x3 kernels: identity plus eight center-minus-neighbor differences."""
    kernels = torch.zeros(9, 1, 3, 3, dtype=dtype, device=device)
    kernels[0, 0, 1, 1] = 1.0
    idx = 1
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            kernels[idx, 0, 1, 1] = 1.0
            kernels[idx, 0, 1 + di, 1 + dj] = -1.0
            idx += 1
    return kernels


def wrap_phase(x: torch.Tensor) -> torch.Tensor:
    """Wrap angles to (-pi, pi]."""
    return torch.atan2(torch.sin(x), torch.cos(x))


def omni_phase(phi: torch.Tensor) -> torch.Tensor:
    """Convolve a phase array (..., F, L) with the nine kernels (reflect padded).

    Channel 0 is the phase itself; channels 1-8 are wrapped differences against
    each neighbor.
    """
    squeeze = phi.ndim == 2
    if squeeze:
        phi = phi[None]
    padded = F.pad(phi[:, None], (1, 1, 1, 1), mode="reflect")
    out = F.conv2d(padded, omni_kernels(phi.dtype, phi.device))
    out = torch.cat([out[:, :1], wrap_phase(out[:, 1:])], dim=1)
    return out[0] if squeeze else out


def _omni_features(spec: torch.Tensor, trig: bool) -> torch.Tensor:
    mag = safe_abs(spec)
    deltas = omni_phase(safe_angle(spec))
    mag = mag[..., None, :, :]
    if trig:
        return torch.cat([mag * torch.cos(deltas), mag * torch.sin(deltas)], dim=-3)
    return mag * deltas


def omni_distill_loss(
    student_out: torch.Tensor, teacher_out: torch.Tensor, trig: bool = True
) -> torch.Tensor:
    """Mean squared distance between magnitude-modulated omnidirectional phase stacks.

    With trig=True each channel enters as (cos, sin) of the convolved phase,
    which is wrap-safe; trig=False keeps the raw product for ablation.
    """
    if student_out.shape != teacher_out.shape:
        raise ValueError(f"shape mismatch: {student_out.shape} vs {teacher_out.shape}")
    diff = _omni_features(student_out, trig) - _omni_features(teacher_out, trig)
    return (diff**2).mean()


def naive_distill_loss(student_out: torch.Tensor, teacher_out: torch.Tensor) -> torch.Tensor:
    """Plain mean squared complex distance (the ablation baseline)."""
    return data_loss(student_out, teacher_out)


def teacher_reverse(teacher, y: torch.Tensor, sched: BridgeSchedule, steps: int = 16) -> torch.Tensor:
    """Deterministic multi-step rollout of the frozen teacher (probability-flow sampler)."""
    if isinstance(teacher, torch.nn.Module):
        teacher.eval()
    with torch.no_grad():
        return sample(lambda x, cond, t: teacher(x, cond, t), y, SamplerConfig("ode", nfe=steps), sched)


def inverse_consistency_loss(
    student,
    teacher,
    y: torch.Tensor,
    x_source: torch.Tensor,
    sched: BridgeSchedule | None = None,
    teacher_nfe: int = 16,
    teacher_output: torch.Tensor | None = None,
) -> torch.Tensor:
    """Source round trip: the student, run target-to-source, must undo the teacher."""
    if teacher_output is None:
        teacher_output = teacher_reverse(teacher, y, sched, teacher_nfe)
    return data_loss(student(teacher_output, y, 0.0), x_source)


def gt_consistency_loss(student, y: torch.Tensor, x_target: torch.Tensor) -> torch.Tensor:
    """Target round trip with a gradient stop on the inner (degradation) pass."""
    degraded = student(x_target, y, 0.0).detach()
    return data_loss(student(degraded, y, 1.0), x_target)


@dataclass(frozen=True)
class DistillWeights:
    distill: float = 1.0
    mel: float = 0.1
    adv: float = 20.0
    fm: float = 20.0
    inverse: float = 1.0
    gt: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be nonnegative")


def distill_total_loss(
    distill, mel, adv, fm, inverse, gt, weights: DistillWeights = DistillWeights()
) -> torch.Tensor:
    components = [
        torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
        for v in (distill, mel, adv, fm, inverse, gt)
    ]
    for value in components:
        if not torch.isfinite(value):
            raise ValueError("non-finite distillation loss component")
    distill, mel, adv, fm, inverse, gt = components
    return (
        weights.distill * distill
        + weights.mel * mel
        + weights.adv * adv
        + weights.fm * fm
        + weights.inverse * inverse
        + weights.gt * gt
    )


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 10000
    lr: float = 8e-5
    teacher_nfe: int = 16
    seed: int = 0
    lambda_distill: float = 1.0
    lambda_mel: float = 0.1
    lambda_adv: float = 20.0
    lambda_fm: float = 20.0
    lambda_inverse: float = 1.0
    lambda_gt: float = 1.0
    distill_loss: str = "omni"
    trig_phase: bool = True
    log_interval: int = 10
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.teacher_nfe < 1:
            raise ValueError("lr, steps and teacher_nfe must be positive")
        if self.distill_loss not in ("omni", "naive"):
            raise ValueError(f"distill_loss must be 'omni' or 'naive', got {self.distill_loss!r}")

    @property
    def weights(self) -> DistillWeights:
        return DistillWeights(
            self.lambda_distill,
            self.lambda_mel,
            self.lambda_adv,
            self.lambda_fm,
            self.lambda_inverse,
            self.lambda_gt,
        )

    @property
    def adversarial(self) -> bool:
        return self.lambda_adv > 0 or self.lambda_fm > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown distillation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DistillState:
    config: DistillConfig
    train_config: TrainConfig
    teacher: BCD
    student: BCD
    student_opt: torch.optim.Optimizer
    discriminator: DiscriminatorBank | None
    disc_opt: torch.optim.Optimizer | None
    mel_loss: torch.nn.Module
    schedule: BridgeSchedule
    rng: torch.Generator
    step: int = 0


def build_distill_state(teacher_state: TrainState, cfg: DistillConfig) -> DistillState:
    """Freeze the teacher and clone it as the student's starting point."""
    teacher = teacher_state.generator
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = BCD(teacher_state.bcd_config)
    student.load_state_dict(copy.deepcopy(teacher.state_dict()))
    opt_cfg = dataclasses.replace(teacher_state.config, lr=cfg.lr)
    torch.manual_seed(cfg.seed)
    disc = DiscriminatorBank() if cfg.adversarial else None
    rng = torch.Generator()
    rng.manual_seed(cfg.seed)
    return DistillState(
        config=cfg,
        train_config=teacher_state.config,
        teacher=teacher,
        student=student,
        student_opt=_optimizer(student, opt_cfg),
        discriminator=disc,
        disc_opt=_optimizer(disc, opt_cfg) if disc is not None else None,
        mel_loss=teacher_state.mel_loss,
        schedule=teacher_state.schedule,
        rng=rng,
    )


def load_distill_state(teacher_checkpoint, cfg: DistillConfig) -> DistillState:
    return build_distill_state(restore_train_state(teacher_checkpoint), cfg)


def student_generate(student, y: torch.Tensor) -> torch.Tensor:
    """Single-step inference: the data prediction at t=1 from x_1 = y."""
    return student(y, y, 1.0)


def distill_train_step(batch: Batch, state: DistillState) -> dict:
    cfg = state.config
    tcfg = state.train_config
    state.student.train()
    x0_teacher = teacher_reverse(state.teacher, batch.y, state.schedule, cfg.teacher_nfe)
    x0_student = student_generate(state.student, batch.y)
    gen_wave = synthesize_waveform(x0_student, tcfg, batch.wave.shape[-1])

    disc_value = 0.0
    if cfg.adversarial:
        state.discriminator.train()
        real_scores, _ = state.discriminator(batch.wave)
        fake_scores, _ = state.discriminator(gen_wave.detach())
        d_loss = adv_disc_loss(real_scores, fake_scores)
        state.disc_opt.zero_grad()
        d_loss.backward()
        torch.nn.utils.clip_grad_norm_(state.discriminator.parameters(), tcfg.grad_clip)
        state.disc_opt.step()
        disc_value = d_loss.item()

    if cfg.distill_loss == "omni":
        l_distill = omni_distill_loss(x0_student, x0_teacher, trig=cfg.trig_phase)
    else:
        l_distill = naive_distill_loss(x0_student, x0_teacher)
    l_mel = state.mel_loss(gen_wave, batch.wave)
    if cfg.adversarial:
        fake_scores, fake_feats = state.discriminator(gen_wave)
        with torch.no_grad():
            _, real_feats = state.discriminator(batch.wave)
        l_adv = adv_gen_loss(fake_scores)
        l_fm = feat_match_loss(real_feats, fake_feats)
    else:
        l_adv = torch.zeros(())
        l_fm = torch.zeros(())
    l_inverse = inverse_consistency_loss(
        state.student, state.teacher, batch.y, batch.y, teacher_output=x0_teacher
    )
    l_gt = gt_consistency_loss(state.student, batch.y, batch.x)
    try:
        total = distill_total_loss(l_distill, l_mel, l_adv, l_fm, l_inverse, l_gt, cfg.weights)
    except ValueError as exc:
        raise TrainingDiverged(f"non-finite distillation loss at step {state.step}") from exc
    state.student_opt.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(state.student.parameters(), tcfg.grad_clip)
    state.student_opt.step()
    state.step += 1
    return {
        "step": state.step,
        "total": total.item(),
        "distill": l_distill.item(),
        "mel": l_mel.item(),
        "adv": float(l_adv.item()),
        "fm": float(l_fm.item()),
        "inverse": l_inverse.item(),
        "gt": l_gt.item(),
        "disc": disc_value,
    }


def save_student_checkpoint(path, state: DistillState) -> None:
    """Same payload layout as teacher checkpoints, so inference loads either."""
    payload = {
        "format": 1,
        "step": state.step,
        "train_config": dataclasses.replace(state.train_config, lr=state.config.lr).to_dict(),
        "bcd_config": state.teacher.cfg.to_dict(),
        "generator": state.student.state_dict(),
        "gen_opt": state.student_opt.state_dict(),
        "discriminator": state.discriminator.state_dict() if state.discriminator else None,
        "disc_opt": state.disc_opt.state_dict() if state.disc_opt else None,
        "rng": state.rng.get_state(),
    }
    torch.save(payload, Path(path))


def distill_loop(
    state: DistillState, manifest: DatasetManifest, out_dir=None
) -> list[dict]:
    tcfg = state.train_config
    fb = tcfg.build_filterbank()
    out_dir = Path(out_dir) if out_dir is not None else None
    reports = []
    log_rows = []
    while state.step < state.config.steps:
        batch = make_batch(manifest, tcfg, fb, state.rng)
        report = distill_train_step(batch, state)
        reports.append(report)
        if report["step"] % state.config.log_interval == 0:
            log_rows.append(report)
        if out_dir is not None and (
            report["step"] % state.config.checkpoint_interval == 0
            or report["step"] == state.config.steps
        ):
            save_student_checkpoint(out_dir / f"student_{report['step']:07d}.pt", state)
            save_student_checkpoint(out_dir / "student_last.pt", state)
    if out_dir is not None and log_rows:
        fields = list(log_rows[0].keys())
        with open(out_dir / "distill_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(log_rows)
    return reports
