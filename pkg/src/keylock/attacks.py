"""Attacks on a stolen protected model: greedy key estimation and fine-tuning.

The attacker holds a clone of the model with the key unbound plus a small
labeled subset of the training data; in the worst case they also know which
placement carries the transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, normalize_images
from .engine.layers import BlockShuffle
from .engine.optim import SgdHyper
from .keys import SecretKey
from .protected import ProtectedModel, evaluate, train_model
from .shuffle import BlockSpec, apply_block_shuffle, derive_permutation, iter_index_pairs


@dataclass
class AttackerView:
    """What the adversary has: unkeyed model clone, known placement, subset of data."""

    model: ProtectedModel
    placement_id: str
    data: Dataset

    def __post_init__(self):
        if self.model.key is not None:
            raise ValueError("attacker view must not carry the true key")


@dataclass
class TraceStep:
    i: int
    j: int
    accepted: bool
    accuracy: float  # incumbent accuracy right after the decision, percent


@dataclass
class KeyEstimationTrace:
    initial_accuracy: float
    steps: list[TraceStep] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.steps[-1].accuracy if self.steps else self.initial_accuracy

    def summary(self) -> dict:
        return {
            "pairs_tested": len(self.steps),
            "pairs_accepted": sum(s.accepted for s in self.steps),
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
        }


def _split_at_placement(model: ProtectedModel, placement_id: str):
    """Layers strictly before the placement's shuffle slot, and strictly after it."""
    idx = None
    for k, (_, layer) in enumerate(model.net.layers):
        if isinstance(layer, BlockShuffle) and layer.placement_id == placement_id:
            idx = k
            break
    if idx is None:
        raise ValueError(f"model has no shuffle slot for placement {placement_id!r}")
    return model.net.layers[:idx], model.net.layers[idx + 1 :]


def _forward_layers(layers, x: np.ndarray) -> np.ndarray:
    # eval mode; unbound shuffle slots inside the span act as identity
    for _, layer in layers:
        x = layer.forward(x, False) if not isinstance(layer, BlockShuffle) else layer.forward(x, False, perm=None)
    return x


def estimate_key(view: AttackerView, block_size: int, rng: np.random.Generator,
                 batch_size: int = 512) -> tuple[np.ndarray, KeyEstimationTrace]:
    """Greedy single pass over all index pairs, keeping swaps that do not hurt accuracy.

    Starts from a permutation derived from a randomly drawn key. For each
    pair (i, j) in the fixed enumeration order the candidate swap is kept
    unless accuracy on the attacker's own labeled subset strictly drops;
    ties are kept and the incumbent accuracy updated. The feature maps
    entering the attacked placement are cached once, so each candidate costs
    one shuffle plus the network suffix.
    """
    if len(view.data) == 0:
        raise ValueError("attacker data is empty")
    placement = view.model.placement_table[view.placement_id]
    if placement.height % block_size or placement.width % block_size:
        raise ValueError(f"placement {view.placement_id!r} not divisible by block size {block_size}")
    spec = BlockSpec(block_size, placement.channels)
    n = spec.n

    guess_key = SecretKey(bytes(rng.bytes(16)))
    perm = derive_permutation(guess_key, n)

    prefix, suffix = _split_at_placement(view.model, view.placement_id)
    images = normalize_images(view.data)
    labels = view.data.labels
    cached = [
        _forward_layers(prefix, images[s : s + batch_size])
        for s in range(0, len(labels), batch_size)
    ]

    def accuracy_of(candidate: np.ndarray) -> float:
        correct = 0
        offset = 0
        for z in cached:
            logits = _forward_layers(suffix, apply_block_shuffle(z, candidate, spec))
            correct += int((logits.argmax(axis=1) == labels[offset : offset + len(z)]).sum())
            offset += len(z)
        return 100.0 * correct / len(labels)

    incumbent = accuracy_of(perm)
    trace = KeyEstimationTrace(initial_accuracy=incumbent)
    for i, j in iter_index_pairs(n):
        perm[i], perm[j] = perm[j], perm[i]
        current = accuracy_of(perm)
        if current < incumbent:
            perm[i], perm[j] = perm[j], perm[i]  # accuracy does not improve, return the swap
            trace.steps.append(TraceStep(i, j, False, incumbent))
        else:
            incumbent = current
            trace.steps.append(TraceStep(i, j, True, incumbent))
    return perm, trace


@dataclass
class FinetuneResult:
    trajectory: list[float]  # held-out accuracy after each epoch, percent
    final_accuracy: float
    transform: str


def finetune_attack(view: AttackerView, epochs: int, hyper: SgdHyper, test_set: Dataset,
                    rng: np.random.Generator, transform: str = "bypass",
                    augment: bool = True) -> FinetuneResult:
    """Fine-tune the stolen clone on the attacker subset, transform bypassed by default.

    `transform="random-key"` instead binds a freshly drawn key for both the
    fine-tuning and the held-out evaluations. All weights and batchnorm
    statistics update; the hyper's epoch count is ignored in favor of
    `epochs`.
    """
    if transform not in ("bypass", "random-key"):
        raise ValueError(f"transform must be 'bypass' or 'random-key', got {transform!r}")
    model = view.model
    if transform == "random-key":
        model.bind_key(SecretKey(bytes(rng.bytes(16))))
        eval_mode = "correct"  # i.e. the attacker's own substituted key
    else:
        model.unbind_key()
        eval_mode = "none"

    trajectory: list[float] = []
    if epochs > 0:
        run_hyper = replace(hyper, epochs=epochs)
        train_model(model, view.data, run_hyper, rng, augment=augment,
                    on_epoch=lambda _: trajectory.append(evaluate(model, test_set, eval_mode)))
    final = trajectory[-1] if trajectory else evaluate(model, test_set, eval_mode)
    return FinetuneResult(trajectory, final, transform)


@dataclass
class RandomKeyReport:
    mean: float
    std: float
    accuracies: list[float]
    fingerprints: list[str]


def _sample_wrong_keys(draw_bytes, n_keys: int, excluded_fingerprint: str | None) -> list[SecretKey]:
    """Draw keys, resampling any whose fingerprint collides with the true key's."""
    keys: list[SecretKey] = []
    while len(keys) < n_keys:
        key = SecretKey(bytes(draw_bytes(16)))
        if excluded_fingerprint is not None and key.fingerprint() == excluded_fingerprint:
            continue
        keys.append(key)
    return keys


def random_key_eval(model: ProtectedModel, test_set: Dataset, n_keys: int,
                    rng_seed: int, batch_size: int = 256) -> RandomKeyReport:
    """Accuracy statistics over `n_keys` independent wrong keys (true key excluded)."""
    if n_keys < 1:
        raise ValueError("n_keys must be >= 1")
    rng = np.random.default_rng(rng_seed)
    excluded = model.key.fingerprint() if model.key else None
    keys = _sample_wrong_keys(rng.bytes, n_keys, excluded)
    accs = [evaluate(model, test_set, "wrong", wrong_key=k, batch_size=batch_size) for k in keys]
    return RandomKeyReport(
        mean=float(np.mean(accs)),
        std=float(np.std(accs)),
        accuracies=accs,
        fingerprints=[k.fingerprint() for k in keys],
    )
