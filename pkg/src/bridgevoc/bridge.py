"""Schrodinger-bridge schedules, marginal sampling, and reverse SDE/ODE samplers.

The bridge runs between the clean spectrum X at t=0 and the range-space
surrogate Y at t=1 (T is fixed to 1). All state here is carried as bare
complex torch tensors in the compressed domain; the spectral module owns
domain bookkeeping.

Closed forms per schedule kind (alpha_t = exp(int_0^t f), sigma_t^2 =
int_0^t g^2/alpha^2, sigma_bar_t^2 = sigma_1^2 - sigma_t^2):

  gmax: f = 0,            g^2 = b0 + t*db,      alpha = 1, sigma^2 = t^2*db/2 + b0*t
  vp:   f = -(b0+t*db)/2, g^2 = c*(b0 + t*db),  alpha = exp(-(b0*t + db*t^2/2)/2),
                                                sigma^2 = c*(exp(b0*t + db*t^2/2) - 1)
  ve:   f = 0,            g^2 = c*k^(2t),       alpha = 1, sigma^2 = c*(k^(2t)-1)/(2*ln k)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

SCHEDULE_KINDS = ("gmax", "vp", "ve")

# predictor maps (x_t, y, t) -> estimate of the clean spectrum
Predictor = Callable[[torch.Tensor, torch.Tensor, float], torch.Tensor]


@dataclass(frozen=True)
class BridgeSchedule:
    """Noise schedule with closed-form drift/diffusion/variance evaluators."""

    kind: str
    beta0: float = 0.01
    beta1: float = 20.0
    c: float = 0.4
    k: float = 2.6

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("gmax", "vp"):
            if self.beta0 <= 0 or self.beta1 <= 0:
                raise ValueError("beta0 and beta1 must be positive")
            if self.beta1 <= self.beta0:
                raise ValueError("beta1 must exceed beta0")
        if self.kind == "vp" and self.c <= 0:
            raise ValueError("c must be positive")
        if self.kind == "ve":
            if self.c <= 0:
                raise ValueError("c must be positive")
            if self.k <= 1:
                raise ValueError("k must exceed 1")

    @property
    def delta_beta(self) -> float:
        return self.beta1 - self.beta0

    def f(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "vp":
            return -0.5 * (self.beta0 + t * self.delta_beta)
        return np.zeros_like(t)

    def g_sq(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "gmax":
            return self.beta0 + t * self.delta_beta
        if self.kind == "vp":
            return self.c * (self.beta0 + t * self.delta_beta)
        return self.c * self.k ** (2.0 * t)

    def alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "vp":
            return np.exp(-0.5 * (self.beta0 * t + 0.5 * self.delta_beta * t**2))
        return np.ones_like(t)

    def alpha_bar(self, t):
        return self.alpha(t) / self.alpha(1.0)

    def sigma_sq(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "gmax":
            return 0.5 * self.delta_beta * t**2 + self.beta0 * t
        if self.kind == "vp":
            return self.c * (np.exp(self.beta0 * t + 0.5 * self.delta_beta * t**2) - 1.0)
        return self.c * (self.k ** (2.0 * t) - 1.0) / (2.0 * math.log(self.k))

    @property
    def sigma1_sq(self) -> float:
        return float(self.sigma_sq(1.0))

    def sigma_bar_sq(self, t):
        return self.sigma1_sq - self.sigma_sq(t)

    def sigma(self, t):
        return np.sqrt(self.sigma_sq(t))

    def sigma_bar(self, t):
        return np.sqrt(np.maximum(self.sigma_bar_sq(t), 0.0))

    @property
    def default_t_eps(self) -> float:
        # vp degenerates numerically near t=0; gmax/ve are clean down to 0
        return 1e-4 if self.kind == "vp" else 0.0


_DEFAULTS = {
    "gmax": dict(beta0=0.01, beta1=20.0),
    "vp": dict(beta0=0.01, beta1=20.0, c=0.4),
    "ve": dict(c=0.01, k=2.6),
}


def make_schedule(kind: str, **params) -> BridgeSchedule:
    """Build a schedule from its kind and (optionally overridden) default parameters."""
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r} (choose from {SCHEDULE_KINDS})")
    merged = dict(_DEFAULTS[kind])
    for name, value in params.items():
        if name not in ("beta0", "beta1", "c", "k"):
            raise ValueError(f"unknown schedule parameter {name!r}")
        merged[name] = float(value)
    return BridgeSchedule(kind=kind, **merged)


@dataclass
class DiffusionState:
    """Intermediate bridge state: x at time t, conditioned on the surrogate y."""

    x: torch.Tensor
    t: float | torch.Tensor
    y: torch.Tensor

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"state/condition shape mismatch: {self.x.shape} vs {self.y.shape}")


@dataclass(frozen=True)
class SamplerConfig:
    sampler: str = "sde"
    nfe: int = 4
    t_eps: float = 0.0

    def __post_init__(self):
        if self.sampler not in ("sde", "ode"):
            raise ValueError(f"sampler must be 'sde' or 'ode', got {self.sampler!r}")
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if not (0.0 <= self.t_eps < 1.0 / self.nfe):
            raise ValueError(f"t_eps must lie in [0, 1/nfe), got {self.t_eps}")


def _coeff(value, like: torch.Tensor):
    """Broadcast a scalar or per-example schedule coefficient against (..., F, L) data."""
    if np.ndim(value) == 0:
        return float(value)
    coeff = torch.as_tensor(np.asarray(value), device=like.device)
    return coeff.reshape(coeff.shape + (1,) * (like.ndim - coeff.ndim)).to(like.real.dtype)


def marginal(
    x: torch.Tensor, y: torch.Tensor, t, sched: BridgeSchedule
) -> tuple[torch.Tensor, torch.Tensor | float]:
    """Mean and per-channel std of the bridge marginal at time t.

    mean = (alpha_t sigma_bar_t^2 X + alpha_bar_t sigma_t^2 Y) / sigma_1^2
    std  = alpha_t sigma_t sigma_bar_t / sigma_1
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    s1_sq = sched.sigma1_sq
    if s1_sq <= 0:
        raise ValueError("degenerate schedule: sigma_1^2 = 0")
    w_x = sched.alpha(t_arr) * sched.sigma_bar_sq(t_arr) / s1_sq
    w_y = sched.alpha_bar(t_arr) * sched.sigma_sq(t_arr) / s1_sq
    std = sched.alpha(t_arr) * sched.sigma(t_arr) * sched.sigma_bar(t_arr) / math.sqrt(s1_sq)
    mean = _coeff(w_x, x) * x + _coeff(w_y, y) * y
    return mean, _coeff(std, x)


def complex_noise(
    shape, generator: torch.Generator | None = None, dtype=torch.complex64, device=None
) -> torch.Tensor:
    """Unit-variance Gaussian noise on the real and imaginary channels independently.

    The single noise convention shared by training (sample_xt) and inference
    (reverse_sde_step).
    """
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    re = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    im = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    return torch.complex(re, im)


def sample_xt(
    x: torch.Tensor, y: torch.Tensor, t, sched: BridgeSchedule, noise: torch.Tensor
) -> DiffusionState:
    """Draw x_t = mean(t) + std(t) * noise from the bridge marginal."""
    if noise.shape != x.shape:
        raise ValueError(f"noise shape {noise.shape} does not match data shape {x.shape}")
    mean, std = marginal(x, y, t, sched)
    return DiffusionState(mean + std * noise, t, y)


def timestep_grid(cfg: SamplerConfig) -> np.ndarray:
    """Uniform descending times 1 -> t_eps over nfe steps, then an exact hop to 0."""
    grid = np.linspace(1.0, cfg.t_eps, cfg.nfe + 1)
    if cfg.t_eps > 0.0:
        grid = np.append(grid, 0.0)
    grid[-1] = 0.0
    return grid


def reverse_sde_step(
    state: DiffusionState,
    t: float,
    predictor: Predictor,
    sched: BridgeSchedule,
    noise: torch.Tensor,
) -> DiffusionState:
    """One reverse SDE transition from the state's time tau down to t < tau."""
    tau = float(state.t)
    if not (0.0 <= t < tau):
        raise ValueError(f"need 0 <= t < tau, got t={t} tau={tau}")
    s_tau_sq = float(sched.sigma_sq(tau))
    if s_tau_sq <= 0.0:
        raise ValueError("cannot take an SDE step from t=0 (sigma_tau = 0)")
    s_t_sq = float(sched.sigma_sq(t))
    a_t = float(sched.alpha(t))
    a_tau = float(sched.alpha(tau))
    ratio = s_t_sq / s_tau_sq
    pred = predictor(state.x, state.y, tau)
    x_t = (
        (a_t * ratio / a_tau) * state.x
        + a_t * (1.0 - ratio) * pred
        + a_t * math.sqrt(s_t_sq) * math.sqrt(1.0 - ratio) * noise
    )
    return DiffusionState(x_t, t, state.y)


def reverse_ode_step(
    state: DiffusionState, t: float, predictor: Predictor, sched: BridgeSchedule
) -> DiffusionState:
    """One deterministic reverse (probability-flow) transition from tau down to t."""
    tau = float(state.t)
    if not (0.0 <= t < tau):
        raise ValueError(f"need 0 <= t < tau, got t={t} tau={tau}")
    s_tau = float(sched.sigma(tau))
    if s_tau == 0.0:
        raise ValueError("cannot take an ODE step from t=0 (sigma_tau = 0)")
    sb_tau = float(sched.sigma_bar(tau))
    s_t = float(sched.sigma(t))
    sb_t = float(sched.sigma_bar(t))
    a_t = float(sched.alpha(t))
    a_tau = float(sched.alpha(tau))
    ab_t = float(sched.alpha_bar(t))
    s1_sq = sched.sigma1_sq
    pred = predictor(state.x, state.y, tau)
    if sb_tau == 0.0:
        # boundary step from tau=1 where x_tau = y exactly: the x_tau coefficient
        # vanishes against the diverging y term, leaving the marginal-mean form
        x_t = (a_t * sb_t**2 / s1_sq) * pred + (ab_t * s_t**2 / s1_sq) * state.y
    else:
        w_state = a_t * s_t * sb_t / (a_tau * s_tau * sb_tau)
        w_pred = (a_t / s1_sq) * (sb_t**2 - s_t * sb_t * sb_tau / s_tau)
        w_y = (ab_t / s1_sq) * (s_t**2 - s_t * sb_t * s_tau / sb_tau)
        x_t = w_state * state.x + w_pred * pred + w_y * state.y
    return DiffusionState(x_t, t, state.y)


def sample(
    predictor: Predictor,
    y: torch.Tensor,
    cfg: SamplerConfig,
    sched: BridgeSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Run the full reverse process from x_1 = y down to t=0."""
    grid = timestep_grid(cfg)
    state = DiffusionState(y, float(grid[0]), y)
    for t in grid[1:]:
        if cfg.sampler == "sde":
            noise = complex_noise(y.shape, generator, dtype=y.dtype, device=y.device)
            state = reverse_sde_step(state, float(t), predictor, sched, noise)
        else:
            state = reverse_ode_step(state, float(t), predictor, sched)
    return state.x
