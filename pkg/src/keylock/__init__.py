"""keylock: secret-key feature-map shuffling for CNN access control.

Train small CNN classifiers whose internal feature maps are locked by a
keyed block-wise permutation, evaluate them under correct/wrong/no-key
conditions, and run key-estimation and fine-tuning attacks against them.
"""

__version__ = "0.1.0"

from .keys import SecretKey, generate_key, load_key, save_key
from .shuffle import (
    BlockSpec,
    apply_block_shuffle,
    as_permutation,
    derive_permutation,
    invert_block_shuffle,
    invert_permutation,
    iter_index_pairs,
    key_space,
    pair_count,
    shuffle_vjp,
)
from .arch import ArchConfig, LayerSpec, Placement
from .protected import ProtectedModel, build_model, evaluate, load_model, protect, train_model, train_protected
from .attacks import AttackerView, estimate_key, finetune_attack, random_key_eval
from .data import Dataset, load_cifar10, sample_subset, synthetic_cifar
from .experiment import ExperimentConfig, run_experiment

__all__ = [
    "SecretKey", "generate_key", "load_key", "save_key",
    "BlockSpec", "apply_block_shuffle", "as_permutation", "derive_permutation",
    "invert_block_shuffle", "invert_permutation", "iter_index_pairs", "key_space",
    "pair_count", "shuffle_vjp",
    "ArchConfig", "LayerSpec", "Placement",
    "ProtectedModel", "build_model", "evaluate", "load_model", "protect",
    "train_model", "train_protected",
    "AttackerView", "estimate_key", "finetune_attack", "random_key_eval",
    "Dataset", "load_cifar10", "sample_subset", "synthetic_cifar",
    "ExperimentConfig", "run_experiment",
]
