"""Layer-wise model merging with data-free covariance estimates.

The main entry points are :func:`actmat.merging.merge` for whole checkpoints,
the per-layer rules in :mod:`actmat.merging`, and the ``actmat`` CLI.
"""

__version__ = "0.1.0"

from .merging import MergeConfig, TaskSet, merge, merge_actmat, merge_interference
from .tensor_store import Checkpoint, TaskVector, compute_task_vector, load_checkpoint, save_checkpoint

__all__ = [
    "Checkpoint",
    "TaskVector",
    "MergeConfig",
    "TaskSet",
    "merge",
    "merge_actmat",
    "merge_interference",
    "compute_task_vector",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
