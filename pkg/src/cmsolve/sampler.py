"""End-to-end solve pipeline: initial reconstruction, guided sampling, refinement.

A solve is three stages: project the measurement into signal space to form
the condition, run the consistency prior from pure noise conditioned on
it, then optionally enforce the hard measurement constraint. Multistep
plans re-noise the running estimate to a lower level and denoise again,
spending one extra network evaluation per level.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cm import ConsistencyFunction
from .errors import ValidationError
from .guidance import SKIP, GuidanceConfig, hard_constraint
from .operators import ForwardOperator, initial_reconstruction
from .tensor import ImageTensor, SeededRng, mse


@dataclass(frozen=True)
class SolvePlan:
    """Sampler configuration; nfe network evaluations, fixed up front."""

    nfe: int = 1
    intermediate_levels: tuple = ()
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    guidance_scale: float = 1.0
    seed: int = 0
    apply_hard_each_round: bool = True

    def __post_init__(self):
        object.__setattr__(self, "intermediate_levels", tuple(float(v) for v in self.intermediate_levels))
        if self.nfe < 1:
            raise ValidationError("nfe must be >= 1")
        if self.nfe != 1 + len(self.intermediate_levels):
            raise ValidationError("nfe must equal 1 + number of intermediate levels")
        levels = self.intermediate_levels
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise ValidationError("intermediate levels must be strictly decreasing")
        if not (0.0 <= self.guidance_scale <= 1.0):
            raise ValidationError("guidance scale must lie in [0, 1]")

    def validate_against(self, schedule) -> None:
        for tau in self.intermediate_levels:
            if not (schedule.epsilon < tau < schedule.t_max):
                raise ValidationError(f"intermediate level {tau} outside ({schedule.epsilon}, {schedule.t_max})")


@dataclass
class SolveReport:
    reconstruction: ImageTensor
    nfe_used: int
    residuals: list  # (stage label, ||A(x) - y||) in pipeline order
    wall_time: float
    seed: int


def _residual(op: ForwardOperator, x: ImageTensor, y: ImageTensor) -> float:
    return float(np.linalg.norm(op.apply(x).data - y.data))


def solve(y: ImageTensor, op: ForwardOperator, model: ConsistencyFunction,
          plan: SolvePlan) -> SolveReport:
    """Run the full pipeline on one measurement; bitwise-deterministic in
    (y, plan, seed)."""
    schedule = model.schedule
    plan.validate_against(schedule)
    start = time.perf_counter()
    nfe_before = model.eval_count
    rng = SeededRng(plan.seed)

    cond = initial_reconstruction(y, op)
    shape = cond.shape
    draws = rng.normal(int(np.prod(shape))).reshape(shape)
    x_t = ImageTensor(schedule.t_max * draws, cond.domain)

    residuals = []
    x0 = model(x_t, schedule.t_max, cond=cond, scale=plan.guidance_scale)
    residuals.append(("round0_prior", _residual(op, x0, y)))
    rounds = [schedule.t_max] + list(plan.intermediate_levels)
    for i, tau in enumerate(plan.intermediate_levels, start=1):
        if plan.apply_hard_each_round and plan.guidance.mode != SKIP:
            x0 = hard_constraint(x0, y, op, plan.guidance)
            residuals.append((f"round{i - 1}_hard", _residual(op, x0, y)))
        noise = rng.normal(int(np.prod(shape))).reshape(shape)
        sigma = math.sqrt(tau * tau - schedule.epsilon ** 2)
        x_tau = ImageTensor(x0.data + sigma * noise, x0.domain)
        x0 = model(x_tau, tau, cond=cond, scale=plan.guidance_scale)
        residuals.append((f"round{i}_prior", _residual(op, x0, y)))
    if plan.guidance.mode != SKIP:
        x0 = hard_constraint(x0, y, op, plan.guidance)
        residuals.append((f"round{len(rounds) - 1}_hard", _residual(op, x0, y)))

    return SolveReport(
        reconstruction=x0,
        nfe_used=model.eval_count - nfe_before,
        residuals=residuals,
        wall_time=time.perf_counter() - start,
        seed=plan.seed,
    )


def nfe_audit(report: SolveReport, plan: SolvePlan) -> bool:
    """True iff the counted network evaluations equal the plan's nfe."""
    return report.nfe_used == plan.nfe


def ternary_search(objective, lo: float, hi: float, iters: int) -> float:
    """Trisect [lo, hi] iters times; returns the final bracket midpoint."""
    if not lo < hi:
        raise ValidationError("need lo < hi")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if objective(m1) <= objective(m2):
            hi = m2
        else:
            lo = m1
    return 0.5 * (lo + hi)


def two_step_mse_objective(model: ConsistencyFunction, op: ForwardOperator, val_set,
                           guidance: GuidanceConfig | None = None,
                           guidance_scale: float = 1.0, seed: int = 0):
    """Mean validation MSE of the 2-step solve as a function of the level."""
    if not val_set:
        raise ValidationError("validation set must be non-empty")
    pairs = [(x, op.apply(x) if y is None else y) for x, y in val_set]
    guidance = GuidanceConfig() if guidance is None else guidance

    def objective(tau: float) -> float:
        total = 0.0
        for i, (x_true, y) in enumerate(pairs):
            plan = SolvePlan(nfe=2, intermediate_levels=(tau,), guidance=guidance,
                             guidance_scale=guidance_scale, seed=SeededRng(seed).derive(i).seed)
            report = solve(y, op, model, plan)
            total += mse(report.reconstruction, x_true)
        return total / len(pairs)

    return objective


def ternary_search_tau(model: ConsistencyFunction, op: ForwardOperator, val_set,
                       lo: float, hi: float, iters: int,
                       guidance: GuidanceConfig | None = None,
                       guidance_scale: float = 1.0, seed: int = 0) -> float:
    """Pick the 2-step intermediate noise level by ternary search.

    val_set is a list of (ground truth, measurement) pairs; a measurement
    of None is synthesized as the clean forward projection.
    """
    schedule = model.schedule
    if not (schedule.epsilon < lo < hi < schedule.t_max):
        raise ValidationError("search bracket must lie inside (epsilon, t_max)")
    objective = two_step_mse_objective(model, op, val_set, guidance, guidance_scale, seed)
    return ternary_search(objective, lo, hi, iters)
