"""Self-supervised denoising of diffusion tensor MRI.

Subsets of six well-conditioned diffusion directions are fitted with the
tensor model and re-synthesized along every acquired direction. A residual
3D convolutional network learns to map each subset's synthesis onto the
synthesis from all data, and the denoised subsets are averaged.
"""

__version__ = "0.1.0"

from .denoiser import MUNet, TrainConfig, build_model, denoise_volume, predict, train
from .estimator import SDnDTIDenoiser
from .exceptions import (
    DegenerateInputError,
    DivergenceError,
    FormatError,
    InsufficientCandidatesError,
    InvalidInputError,
    InvalidPlanError,
    InvalidSchemeError,
    InvalidSignalError,
    SDnDTIError,
    ShapeError,
    SingularSchemeError,
    StageError,
    UnsupportedError,
    WindowError,
)
from .gradient_design import (
    SubsetPlan,
    condition_number,
    design_matrix,
    design_scheme,
    electrostatic_energy,
    optimize_dsm6,
    select_subsets_from_fixed,
    uniform_directions,
)
from .phantom import PhantomSpec, make_phantom, simulate_acquisition
from .pipeline import resolve_config, run_pipeline
from .quality_metrics import MetricReport, aggregate, angular_mad, mae, psnr, ssim
from .selfsup import (
    StandardizationParams,
    TrainingPair,
    augment_flip,
    average_denoised,
    build_selfsup_pairs,
    build_supervised_pairs,
    destandardize,
    extract_blocks,
    standardize,
)
from .tensor_model import DtiMetrics, TensorField, dti_metrics, fit_tensor, synthesize_dwis
from .volume_io import (
    BrainMask,
    GradientScheme,
    Volume4D,
    load_model,
    read_gradients,
    read_nifti,
    save_model,
    write_gradients,
    write_nifti,
)
