"""Consistency functions: noise schedule, skip parameterization, priors.

A consistency function maps any point (x_t, t) on a probability-flow
trajectory straight to the trajectory origin at the boundary time. Two
implementations live here: the trained network prior (backbone plus
optional control encoder) and a closed-form Gaussian prior used as an
exactly solvable oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch, ValidationError
from .nets import BackboneNet, ControlEncoder
from .tensor import MODEL, ImageTensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Warped discretization of [epsilon, t_max] with skip coefficients."""

    epsilon: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    steps: int = 18
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.epsilon <= 0 or self.t_max <= self.epsilon:
            raise ValidationError("need 0 < epsilon < t_max")
        if self.rho <= 0:
            raise ValidationError("rho must be positive")
        if self.steps < 2:
            raise ValidationError("discretization needs at least 2 levels")
        if self.sigma_data <= 0:
            raise ValidationError("sigma_data must be positive")

    def grid(self) -> np.ndarray:
        """Strictly increasing levels t_1 = epsilon ... t_N = t_max."""
        i = np.arange(self.steps, dtype=np.float64)
        lo = self.epsilon ** (1.0 / self.rho)
        hi = self.t_max ** (1.0 / self.rho)
        return (lo + i / (self.steps - 1) * (hi - lo)) ** self.rho

    def _check_t(self, t: float) -> float:
        t = float(t)
        if not (self.epsilon <= t <= self.t_max):
            raise ValidationError(f"t={t} outside [{self.epsilon}, {self.t_max}]")
        return t

    def c_skip(self, t: float) -> float:
        t = self._check_t(t)
        sd2 = self.sigma_data * self.sigma_data
        return sd2 / ((t - self.epsilon) ** 2 + sd2)

    def c_out(self, t: float) -> float:
        t = self._check_t(t)
        sd2 = self.sigma_data * self.sigma_data
        return self.sigma_data * (t - self.epsilon) / math.sqrt(sd2 + t * t)


class ConsistencyFunction:
    """Callable prior f(x, t[, cond]); counts network evaluations."""

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        self.eval_count = 0

    def __call__(self, x: ImageTensor, t: float, cond: ImageTensor | None = None,
                 scale: float | None = None) -> ImageTensor:
        t = self.schedule._check_t(t)
        if cond is not None and cond.shape != x.shape:
            raise ShapeMismatch(f"condition {cond.shape} vs input {x.shape}")
        self.eval_count += 1
        return self._forward(x, t, cond, scale)

    def _forward(self, x, t, cond, scale):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianOracle:
    """Isotropic Gaussian prior N(mu, s^2 I); exactly solvable."""

    mu: ImageTensor
    s: float

    def __post_init__(self):
        if self.s <= 0:
            raise ValidationError("prior std must be positive")


def gaussian_consistency(x: ImageTensor, t: float, oracle: GaussianOracle,
                         schedule: NoiseSchedule) -> ImageTensor:
    """Exact solution map of the probability-flow ODE for a Gaussian prior.

    Under variance-exploding noising the flow is dx/dt = t(x - mu)/(s^2 + t^2),
    whose solution through (x, t) lands at
    mu + (x - mu) * sqrt((s^2 + eps^2) / (s^2 + t^2)) at the boundary.
    """
    t = schedule._check_t(t)
    s2 = oracle.s * oracle.s
    ratio = math.sqrt((s2 + schedule.epsilon ** 2) / (s2 + t * t))
    return ImageTensor(oracle.mu.data + (x.data - oracle.mu.data) * ratio, MODEL)


class GaussianOracleModel(ConsistencyFunction):
    """Oracle wrapped as a sampler-compatible prior (condition is ignored)."""

    def __init__(self, oracle: GaussianOracle, schedule: NoiseSchedule):
        super().__init__(schedule)
        self.oracle = oracle

    def _forward(self, x, t, cond, scale):
        return gaussian_consistency(x, t, self.oracle, self.schedule)


def consistency_out(backbone: BackboneNet, x: torch.Tensor, t,
                    schedule: NoiseSchedule, control=None, scale: float = 1.0) -> torch.Tensor:
    """Skip-parameterized output c_skip(t) x + c_out(t) F(x, t), batched torch.

    Differentiable; training losses are built on this. t may be a float
    shared by the batch or a per-element (B,) tensor. `control` is the
    residual triple from a ControlEncoder forward.
    """
    f = backbone(x, t, control=control, scale=scale)
    if isinstance(t, torch.Tensor) and t.numel() > 1:
        ts = t.detach().reshape(-1).numpy()
        c_skip = torch.from_numpy(np.array([schedule.c_skip(v) for v in ts]))
        c_out = torch.from_numpy(np.array([schedule.c_out(v) for v in ts]))
        return c_skip[:, None, None, None] * x + c_out[:, None, None, None] * f
    t_val = float(t.reshape(-1)[0]) if isinstance(t, torch.Tensor) else t
    return schedule.c_skip(t_val) * x + schedule.c_out(t_val) * f


class ConsistencyModel(ConsistencyFunction):
    """Network prior: frozen or trainable backbone plus optional control encoder."""

    def __init__(self, backbone: BackboneNet, schedule: NoiseSchedule,
                 control: ControlEncoder | None = None):
        super().__init__(schedule)
        self.backbone = backbone
        self.control = control

    def _forward(self, x, t, cond, scale):
        if scale is None:
            scale = self.control.guidance_scale if self.control is not None else 0.0
        if not (0.0 <= scale <= 1.0):
            raise ValidationError("guidance scale must lie in [0, 1]")
        with torch.no_grad():
            xt = torch.from_numpy(x.data[None].copy())
            control = None
            if cond is not None and self.control is not None and scale != 0.0:
                control = self.control(xt, torch.from_numpy(cond.data[None].copy()), t)
            out = consistency_out(self.backbone, xt, t, self.schedule,
                                  control=control, scale=scale)
        return ImageTensor(out.numpy()[0], MODEL)


def self_consistency_residual(f: ConsistencyFunction, trajectory_points) -> float:
    """Worst-case pairwise origin disagreement over points of one trajectory.

    max over ordered pairs of |f(x_t, t) - f(x_t', t')| / |f(x_t, t)|.
    """
    points = list(trajectory_points)
    if len(points) < 2:
        raise ValidationError("need at least 2 trajectory points")
    outs = [f(x, t).data for x, t in points]
    worst = 0.0
    for i, a in enumerate(outs):
        norm = float(np.linalg.norm(a))
        if norm == 0.0:
            raise ValidationError("degenerate trajectory origin with zero norm")
        for j, b in enumerate(outs):
            if i == j:
                continue
            worst = max(worst, float(np.linalg.norm(a - b)) / norm)
    return worst
