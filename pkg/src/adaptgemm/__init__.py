"""adaptgemm: build input-adaptive GEMM libraries.

Tunes two parametric cache-blocked kernel families over many input shapes,
trains a decision-tree classifier mapping (M, N, K) to the best kernel
configuration, scores it with misclassification-aware metrics, and emits the
trained tree as a near-zero-overhead dispatcher.
"""

__version__ = "0.1.0"

from .kernels import (
    ConfigError,
    DeviceCaps,
    KernelConfig,
    KernelFamily,
    ProblemShape,
    ShapeError,
    enumerate_search_space,
    gemm_execute,
    gemm_reference,
    is_legal,
)
from .tuner import Measurement, TimingPolicy, TuningTable, flops_of, tune_exhaustive, tune_random

__all__ = [
    "ConfigError",
    "DeviceCaps",
    "KernelConfig",
    "KernelFamily",
    "Measurement",
    "ProblemShape",
    "ShapeError",
    "TimingPolicy",
    "TuningTable",
    "__version__",
    "enumerate_search_space",
    "flops_of",
    "gemm_execute",
    "gemm_reference",
    "is_legal",
    "tune_exhaustive",
    "tune_random",
]
