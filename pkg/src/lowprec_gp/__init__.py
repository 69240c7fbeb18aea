"""Mixed-precision Gaussian process regression with emulated float formats."""

from .backend import HAVE_COMPILED, backend_name, set_backend
from .formats import (
    BF16,
    FP16,
    FP32,
    FP64,
    FloatFormat,
    SignedLogValue,
    format_constants,
    get_format,
    lse_dot,
    quantize,
)
from .kernels import (
    DimensionMismatch,
    KernelSpec,
    SupportRadius,
    UnsupportedFamily,
    assemble_kernel_matrix,
    eval_kernel,
    max_representable_distance,
    support_mask,
)
from .mvm import (
    BLOCK_SAME,
    BLOCK_WIDER,
    KAHAN,
    DenseOperator,
    KernelOperator,
    MvmPolicy,
    OverflowDetected,
    block_mvm,
    cross_mvm,
    dot_in_format,
    kahan_sum,
    naive_sum,
    truncated_predict_dot,
)
from .precond import (
    InnerSolveFailed,
    NotPositiveDefinite,
    PivotedCholeskyFactor,
    direct_woodbury_solve,
    kernel_preconditioner,
    pivoted_cholesky,
    precond_apply,
)
from .cg import (
    CgConfig,
    SolveReport,
    cg_batched,
    cg_stable,
    cg_standard,
    solve_kernel_system,
)
from .spectrum import (
    DomainError,
    EigFailure,
    SpectrumReport,
    effective_dimension,
    quantized_ed_bound,
    quantized_spectrum,
    rbf_eigen_cutoff,
)
from .training import (
    GpModel,
    NonFinite,
    ProbeSet,
    TrainConfig,
    TrainTrace,
    predict,
    pseudo_loss,
    pseudo_loss_grad,
    train,
)
from .data import Dataset, EmptyDataset, ParseError, load_csv, synthetic_gp

__version__ = "0.1.0"
