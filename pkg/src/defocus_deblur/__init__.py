"""Blind defocus deblurring from a single image with per-layer masks.

The observation model is a sum of depth layers, each a sharp image part
convolved with its own defocus kernel; the solver jointly estimates a
constrained non-parametric kernel, the sharp layer, and a sparse
residual that absorbs segmentation errors.
"""
from .conv import (
    KernelOperator,
    adjoint_masked,
    convolve,
    correlate,
    forward_masked,
    gradient_wrt_kernel,
    validate_kernel,
)
from .feasible_set import (
    DegenerateKernelError,
    FeasibleSetParams,
    effective_rank,
    flip_cols,
    flip_rows,
    project_omega,
    rank_truncate,
    simplex_normalize,
    symmetrize,
    symmetry_residual,
    transpose,
)
from .image_io import (
    ImageFormatError,
    load_image,
    load_labels,
    load_mask,
    psnr,
    save_image,
    to_luminance,
    validate_image,
    validate_mask,
)
from .layer_solver import (
    InsufficientTextureError,
    LayerProblem,
    LayerSolution,
    SolverConfig,
    adaptive_ridge_weight,
    disk_kernel,
    gaussian_kernel,
    gaussian_pupil_kernel,
    init_kernel,
    pillbox_kernel,
    solve_layer,
    weight_map,
)
from .pipeline import (
    LayerOutcome,
    LayerSet,
    SceneLayer,
    SceneSpec,
    deblur_all,
    evaluate,
    layers_from_defocus_map,
    synthesize,
)
from .solvers import (
    AdmmConfig,
    CgResult,
    PgaConfig,
    SparsifyingTransform,
    admm_solve_u,
    cg_solve,
    hard_threshold_weighted,
    objective_eval,
    pga_solve_k,
    soft_threshold,
    transform_adjoint,
    transform_apply,
)

__version__ = "0.1.0"
