"""Minimal dense-tensor training engine: layers, losses, SGD, checkpoints."""

import ctypes as _ctypes
import os as _os

_thread_controller = None


def _tune_allocator() -> None:
    """Keep large blocks in the glibc arena instead of mmap/munmap round trips.

    Training allocates hundreds of MB of short-lived workspaces per step; the
    default allocator returns them to the OS on free and the page faults
    dominate the step time. Best effort: silently does nothing off glibc.
    """
    try:
        libc = _ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def configure_threads(n: int | None = None) -> None:
    """Pin the BLAS pool to `n` threads (default 1, env KEYLOCK_BLAS_THREADS overrides).

    A fixed thread count makes runs bit-reproducible, and one thread is
    actually fastest for this engine's skinny convolution GEMMs.
    """
    global _thread_controller
    if n is None:
        n = int(_os.environ.get("KEYLOCK_BLAS_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits

        _thread_controller = threadpool_limits(limits=n, user_api="blas")
    except Exception:
        pass


_tune_allocator()
configure_threads()

from .layers import (
    BatchNorm2d,
    BlockShuffle,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2d,
    NumericsError,
    ReLU,
    ResidualBlock,
)
from .net import Network, accuracy, forward, loss_and_grad, log_softmax, softmax_cross_entropy
from .optim import SgdHyper, SgdState, cyclic_lr, sgd_update
from .gradcheck import GradCheckReport, finite_diff_check
from .checkpoint import CheckpointError, load_tensors, save_tensors

__all__ = [
    "BatchNorm2d", "BlockShuffle", "Conv2d", "Flatten", "GlobalAvgPool", "Layer",
    "Linear", "MaxPool2d", "NumericsError", "ReLU", "ResidualBlock",
    "Network", "accuracy", "forward", "loss_and_grad", "log_softmax", "softmax_cross_entropy",
    "SgdHyper", "SgdState", "cyclic_lr", "sgd_update",
    "GradCheckReport", "finite_diff_check",
    "CheckpointError", "load_tensors", "save_tensors",
]
