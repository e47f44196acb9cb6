"""Distillation of the backbone from an analytic teacher, and control training.

The teacher is a closed-form posterior mean (isotropic Gaussian, or a
Gaussian mixture over known component images), so no pretrained diffusion
checkpoint is ever needed: one Heun step of the teacher's probability-flow
ODE supplies the neighbor point for the distillation loss.

Control-encoder training keeps the backbone frozen and regresses the
conditional output straight onto the ground truth (the reconstruction
loss), which is what preserves the single-step ability of the prior.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .cm import NoiseSchedule, consistency_out
from .errors import NumericalAbort, ValidationError
from .nets import BackboneNet, ControlEncoder, flat_params
from .tensor import SeededRng


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch: int = 16
    lr: float = 3e-3
    momentum: float = 0.9
    ema_mu: float = 0.5
    distance: str = "l2"
    seed: int = 0
    optimizer: str = "adam"  # sgd converges too slowly for desk-scale budgets
    lr_final: float | None = None  # linear decay target over the run

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValidationError("steps, batch, lr must be positive")
        if self.lr_final is not None and self.lr_final <= 0:
            raise ValidationError("lr_final must be positive when set")
        if not (0.0 <= self.ema_mu <= 1.0):
            raise ValidationError("ema_mu must lie in [0, 1]")
        if self.distance not in ("l2", "l1"):
            raise ValidationError("distance must be 'l2' or 'l1'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError("optimizer must be 'adam' or 'sgd'")


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.lr)


def distance(a: torch.Tensor, b: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    if kind == "l2":
        return torch.mean((a - b) ** 2)
    if kind == "l1":
        return torch.mean(torch.abs(a - b))
    raise ValidationError(f"unknown distance {kind!r}")


# ---------------------------------------------------------------------------
# Analytic teachers
# ---------------------------------------------------------------------------

def _bcast_t(t) -> torch.Tensor | float:
    """Times as a float or a (B, 1, 1, 1) tensor for image broadcasting."""
    if isinstance(t, torch.Tensor) and t.numel() > 1:
        return t.reshape(-1, 1, 1, 1)
    return float(t.reshape(-1)[0]) if isinstance(t, torch.Tensor) else float(t)


class GaussianTeacher:
    """Isotropic Gaussian prior N(mu, s^2 I) with closed-form E[x0 | x_t]."""

    def __init__(self, mu, s: float):
        if s <= 0:
            raise ValidationError("prior std must be positive")
        self.mu = torch.as_tensor(np.asarray(mu, dtype=np.float64))
        self.s = float(s)

    def denoise(self, x: torch.Tensor, t) -> torch.Tensor:
        t = _bcast_t(t)
        s2 = self.s * self.s
        return self.mu + (s2 / (s2 + t * t)) * (x - self.mu)


class MixtureTeacher:
    """Gaussian mixture over known component images (a smoothed empirical prior).

    Components are training images with a small bandwidth s; the posterior
    mean is a responsibility-weighted blend, exact for all t.
    """

    def __init__(self, components: np.ndarray, s: float):
        comps = np.asarray(components, dtype=np.float64)
        if comps.ndim != 4 or comps.shape[0] < 1:
            raise ValidationError("components must be (K, c, h, w)")
        if s <= 0:
            raise ValidationError("bandwidth must be positive")
        self.components = torch.as_tensor(comps)
        self.s = float(s)

    def denoise(self, x: torch.Tensor, t) -> torch.Tensor:
        t = _bcast_t(t)
        s2t2 = self.s * self.s + t * t
        temp = s2t2.reshape(x.shape[0], 1) if isinstance(s2t2, torch.Tensor) else s2t2
        flat_x = x.reshape(x.shape[0], -1)
        flat_c = self.components.reshape(self.components.shape[0], -1)
        d2 = torch.cdist(flat_x, flat_c) ** 2
        resp = torch.softmax(-d2 / (2.0 * temp), dim=1)
        mean_comp = (resp @ flat_c).reshape(x.shape)
        w = self.s * self.s / s2t2
        return w * x + (1.0 - w) * mean_comp


def heun_step(teacher, x: torch.Tensor, t_from, t_to) -> torch.Tensor:
    """One Heun step of the probability-flow ODE dx/dt = (x - D(x, t)) / t."""
    tf = _bcast_t(t_from)
    tt = _bcast_t(t_to)
    d1 = (x - teacher.denoise(x, t_from)) / tf
    x_euler = x + (tt - tf) * d1
    d2 = (x_euler - teacher.denoise(x_euler, t_to)) / tt
    return x + (tt - tf) * 0.5 * (d1 + d2)


# ---------------------------------------------------------------------------
# Pure loss functions (used by the trainers and by gradient checks)
# ---------------------------------------------------------------------------

def _grid_times(schedule: NoiseSchedule, n, lowest: int):
    """Adjacent level times for index n (int or int array, 1-based)."""
    grid = schedule.grid()
    n_arr = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if n_arr.min() < lowest or n_arr.max() > schedule.steps - 1:
        raise ValidationError(f"level index outside {lowest}..{schedule.steps - 1}")
    t_hi = grid[n_arr]
    t_lo = grid[n_arr - 1]
    if np.isscalar(n) or np.asarray(n).ndim == 0:
        return float(t_hi[0]), float(t_lo[0])
    return torch.from_numpy(t_hi), torch.from_numpy(t_lo)


def cd_loss(backbone: BackboneNet, target_backbone: BackboneNet, schedule: NoiseSchedule,
            teacher, x0: torch.Tensor, n, z: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    """Distillation loss at grid index n (1-based, in {1..N-1}; int or per-element array).

    The online network sees x at t_{n+1}; the EMA target sees the teacher's
    Heun step of it down to t_n.
    """
    t_hi, t_lo = _grid_times(schedule, n, lowest=1)
    x_hi = x0 + _bcast_t(t_hi) * z
    with torch.no_grad():
        x_lo = heun_step(teacher, x_hi, t_hi, t_lo)
        target = consistency_out(target_backbone, x_lo, t_lo, schedule)
    online = consistency_out(backbone, x_hi, t_hi, schedule)
    return distance(online, target, kind)


def recon_loss(backbone: BackboneNet, control: ControlEncoder, schedule: NoiseSchedule,
               x0: torch.Tensor, cond: torch.Tensor, t_index, z: torch.Tensor,
               kind: str = "l2", scale: float = 1.0) -> torch.Tensor:
    """Conditional reconstruction loss d(f(x_t, cond, t), x0) at grid level(s)."""
    grid = schedule.grid()
    idx = np.atleast_1d(np.asarray(t_index, dtype=np.int64))
    if idx.min() < 0 or idx.max() >= schedule.steps:
        raise ValidationError("t_index outside schedule grid")
    scalar = np.isscalar(t_index) or np.asarray(t_index).ndim == 0
    t = float(grid[idx[0]]) if scalar else torch.from_numpy(grid[idx])
    x_t = x0 + _bcast_t(t) * z
    residuals = control(x_t, cond, t)
    out = consistency_out(backbone, x_t, t, schedule, control=residuals, scale=scale)
    return distance(out, x0, kind)


def conditional_consistency_loss(backbone: BackboneNet, control: ControlEncoder,
                                 target_backbone: BackboneNet, target_control: ControlEncoder,
                                 schedule: NoiseSchedule, x0: torch.Tensor, cond: torch.Tensor,
                                 n: int, z: torch.Tensor, teacher=None, kind: str = "l2",
                                 scale: float = 1.0) -> torch.Tensor:
    """Conditional self-consistency loss (diagnostic; converges slowly).

    Conditions feed both the online and the target networks. Without a
    teacher the neighbor point reuses the same noise draw at the lower
    level; with one it is the teacher's Heun step.
    """
    if x0.shape != cond.shape:
        raise ValidationError("batch must pair each x0 with its condition")
    t_hi, t_lo = _grid_times(schedule, n, lowest=1)
    x_hi = x0 + _bcast_t(t_hi) * z
    with torch.no_grad():
        x_lo = heun_step(teacher, x_hi, t_hi, t_lo) if teacher is not None else x0 + _bcast_t(t_lo) * z
        target = consistency_out(target_backbone, x_lo, t_lo, schedule,
                                 control=target_control(x_lo, cond, t_lo), scale=scale)
    online = consistency_out(backbone, x_hi, t_hi, schedule,
                             control=control(x_hi, cond, t_hi), scale=scale)
    return distance(online, target, kind)


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------

def _ema_update(target: torch.nn.Module, source: torch.nn.Module, mu: float) -> None:
    with torch.no_grad():
        for p_t, p_s in zip(target.parameters(), source.parameters()):
            p_t.mul_(mu).add_(p_s, alpha=1.0 - mu)


def param_checksum(module: torch.nn.Module) -> str:
    return hashlib.sha256(flat_params(module).tobytes()).hexdigest()


class DistillationTrainer:
    """Owns the online backbone, its EMA target, and the SGD state."""

    def __init__(self, backbone: BackboneNet, schedule: NoiseSchedule, teacher,
                 sample_x0, cfg: TrainConfig):
        self.backbone = backbone
        self.schedule = schedule
        self.teacher = teacher
        self.sample_x0 = sample_x0  # (rng, count) -> np.ndarray (B, c, h, w)
        self.cfg = cfg
        self.rng = SeededRng(cfg.seed)
        self.target = BackboneNet(backbone.config, sigma_data=backbone.sigma_data)
        self.target.load_state_dict(backbone.state_dict())
        self.target.requires_grad_(False)
        self.opt = _make_optimizer(backbone.parameters(), cfg)
        self.step_index = 0

    def step(self) -> float:
        x0 = torch.from_numpy(self.sample_x0(self.rng, self.cfg.batch))
        n = 1 + self.rng.integers(self.schedule.steps - 1, self.cfg.batch)
        z = torch.from_numpy(self.rng.normal(x0.numel()).reshape(x0.shape))
        loss = cd_loss(self.backbone, self.target, self.schedule, self.teacher,
                       x0, n, z, self.cfg.distance)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericalAbort("NaN loss in distillation", {
                "step": self.step_index,
                "t_n": [float(self.schedule.grid()[i - 1]) for i in np.atleast_1d(n)],
                "batch_norm": float(torch.linalg.vector_norm(x0)),
            })
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        _ema_update(self.target, self.backbone, self.cfg.ema_mu)
        self.step_index += 1
        return value

    def run(self, callback=None) -> list:
        losses = []
        for _ in range(self.cfg.steps):
            value = self.step()
            losses.append(value)
            if callback is not None:
                callback(self.step_index, value)
        return losses


class ControlTrainer:
    """Trains the control encoder against a frozen backbone."""

    def __init__(self, backbone: BackboneNet, control: ControlEncoder,
                 schedule: NoiseSchedule, sample_pair, cfg: TrainConfig):
        backbone.requires_grad_(False)
        self.backbone = backbone
        self.control = control
        self.schedule = schedule
        self.sample_pair = sample_pair  # (rng, count) -> (x0, cond) np arrays
        self.cfg = cfg
        self.rng = SeededRng(cfg.seed)
        self.opt = _make_optimizer(control.parameters(), cfg)
        self.step_index = 0

    def step(self) -> float:
        x0_np, cond_np = self.sample_pair(self.rng, self.cfg.batch)
        x0 = torch.from_numpy(x0_np)
        cond = torch.from_numpy(cond_np)
        t_index = self.rng.integers(self.schedule.steps, self.cfg.batch)
        z = torch.from_numpy(self.rng.normal(x0.numel()).reshape(x0.shape))
        loss = recon_loss(self.backbone, self.control, self.schedule,
                          x0, cond, t_index, z, self.cfg.distance)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericalAbort("NaN loss in control training", {
                "step": self.step_index,
                "t_n": [float(self.schedule.grid()[i]) for i in np.atleast_1d(t_index)],
                "batch_norm": float(torch.linalg.vector_norm(x0)),
            })
        self.opt.zero_grad()
        loss.backward()
        # frozen-backbone contract: nothing may flow into theta
        assert all(p.grad is None for p in self.backbone.parameters()), \
            "gradient reached the frozen backbone"
        self.opt.step()
        self.step_index += 1
        return value

    def run(self, callback=None) -> list:
        losses = []
        for _ in range(self.cfg.steps):
            value = self.step()
            losses.append(value)
            if callback is not None:
                callback(self.step_index, value)
        return losses


class ConditionalConsistencyTrainer:
    """Trains the control encoder with the conditional self-consistency loss.

    Exists only for the convergence comparison against ControlTrainer; the
    backbone stays frozen and the control encoder keeps an EMA target.
    """

    def __init__(self, backbone: BackboneNet, control: ControlEncoder,
                 schedule: NoiseSchedule, sample_pair, cfg: TrainConfig, teacher=None):
        backbone.requires_grad_(False)
        self.backbone = backbone
        self.control = control
        self.schedule = schedule
        self.sample_pair = sample_pair
        self.teacher = teacher
        self.cfg = cfg
        self.rng = SeededRng(cfg.seed)
        self.target_control = ControlEncoder(backbone, control.cond_channels)
        self.target_control.load_state_dict(control.state_dict())
        self.target_control.requires_grad_(False)
        self.opt = _make_optimizer(control.parameters(), cfg)
        self.step_index = 0

    def step(self) -> float:
        x0_np, cond_np = self.sample_pair(self.rng, self.cfg.batch)
        x0 = torch.from_numpy(x0_np)
        cond = torch.from_numpy(cond_np)
        n = 1 + self.rng.integers(self.schedule.steps - 1, self.cfg.batch)
        z = torch.from_numpy(self.rng.normal(x0.numel()).reshape(x0.shape))
        loss = conditional_consistency_loss(
            self.backbone, self.control, self.backbone, self.target_control,
            self.schedule, x0, cond, n, z, teacher=self.teacher, kind=self.cfg.distance)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericalAbort("NaN loss in conditional consistency training",
                                 {"step": self.step_index})
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        _ema_update(self.target_control, self.control, self.cfg.ema_mu)
        self.step_index += 1
        return value
