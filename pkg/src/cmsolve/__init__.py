"""Few-step inverse problem solving with a consistency-model prior.

Pipeline: an initial reconstruction turns the measurement into a
signal-space condition, a control encoder steers the frozen consistency
prior toward it in one network evaluation, and an optional hard
measurement constraint (projection or momentum descent) enforces exact
data consistency. Multistep plans refine by re-noising and denoising.
"""

from .cm import (ConsistencyModel, GaussianOracle, GaussianOracleModel,
                 NoiseSchedule, gaussian_consistency, self_consistency_residual)
from .errors import (CapabilityError, CmsolveError, MalformedHeader, NumericalAbort,
                     ShapeMismatch, TruncatedPayload, ValidationError)
from .guidance import GuidanceConfig, gd_refine, hard_constraint, project_affine, relaxed_projection
from .operators import (BlockDownsampleOperator, ForwardOperator, InpaintOperator,
                        MatrixOperator, NonlinearBlurOperator, RadonOperator,
                        bilinear_resize, circle_mask, fbp, initial_reconstruction)
from .sampler import SolvePlan, SolveReport, nfe_audit, solve, ternary_search, ternary_search_tau
from .tensor import (ImageTensor, SeededRng, gaussian_noise, load_tensor, mse,
                     psnr, save_tensor, ssim, to_display, to_model)
from .training import (ControlTrainer, DistillationTrainer, GaussianTeacher,
                       MixtureTeacher, TrainConfig)

__all__ = [name for name in dir() if not name.startswith("_")]
