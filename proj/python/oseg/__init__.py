"""On-line instance segmentation on pre-extracted features."""

from ._core import (
    ArgumentError,
    FormatError,
    KernelClassifier,
    UntrainableError,
    __version__,
    default_config,
    evaluate,
    generate_synthetic,
    sampling_equivalence_test,
    stream_report,
    train,
    train_kernel_classifier,
    verify,
)

__all__ = [
    "ArgumentError",
    "FormatError",
    "KernelClassifier",
    "UntrainableError",
    "__version__",
    "default_config",
    "evaluate",
    "generate_synthetic",
    "sampling_equivalence_test",
    "stream_report",
    "train",
    "train_kernel_classifier",
    "verify",
]
