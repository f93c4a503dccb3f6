"""Temporal gaze-attention distillation for long-tailed image classification.

Pipeline: fixation ingestion -> time-windowed attention maps -> two-branch
attention teacher -> margin + Bhattacharyya student distillation -> group
metrics. See the CLI (gazedistill --help) for the end-to-end commands.
"""

from ._kernels import BACKEND_NAME as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
