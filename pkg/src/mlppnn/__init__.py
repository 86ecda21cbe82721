"""Multi-frame image superresolution with a learned kernel-regression interpolator.

Sub-pixel registration projects every low-resolution pixel into the
reference frame; a dense high-resolution grid gathers the nearest samples;
a small MLP maps sample distance to an interpolation weight and a
normalized weighted average produces each output pixel; a least-squares
FIR filter restores the remaining blur.
"""

from .imagecore import (
    PgmParseError,
    add_gaussian_noise,
    as_image,
    gradient_magnitude,
    gradients,
    load_pgm,
    rmse,
    sample_bilinear,
    save_pgm,
)
from .kernelnet import (
    DEGENERATE_EPS,
    DegeneratePattern,
    Exponential,
    KernelMlp,
    MlpKernel,
    NearestOnly,
    combine_field,
    kernel_half_width,
    mlp_backprop,
    mlp_forward,
    model_from_text,
    model_to_text,
    pnn_combine,
    pnn_output_grad,
    seq_nn,
)
from .pipeline import (
    BenchReport,
    BenchRow,
    PipelineConfig,
    PipelineError,
    bilinear_upsample,
    generate_sequence,
    interpolate_sequence,
    run_bench,
    superresolve,
)
from .projection import (
    HighResGrid,
    NeighborArray,
    NeighborField,
    build_neighbor_field,
    gather_neighbors,
)
from .registration import (
    IDENTITY,
    RegistrationError,
    SimilarityTransform,
    estimate,
    load_transforms,
    register_sequence,
    save_transforms,
)
from .restoration import (
    FilterDesignError,
    FirFilter,
    apply_filter,
    design_filter,
    filter_from_text,
    filter_to_text,
)
from .training import (
    TrainConfig,
    TrainingError,
    TrainingPattern,
    batch_loss,
    dataset_from_bytes,
    dataset_to_bytes,
    make_dataset,
    make_pattern,
    minimize_cg,
    sample_target_location,
    synth_lowres_pixel,
    train,
)

__version__ = "0.1.0"
