"""Protected classifiers: placement binding, training through the shuffle, evaluation.

A ProtectedModel owns the layer stack, the table of possible placements, the
set of active placements with their block geometry, and (for the owner) the
bound key's derived permutations. The checkpoint on disk never contains the
key; rebinding after load requires the key file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchConfig, Placement, build_layers
from .engine.checkpoint import load_tensors, save_tensors
from .engine.layers import BlockShuffle, NumericsError
from .engine.net import Network, accuracy, softmax_cross_entropy
from .engine.optim import SgdHyper, SgdState, cyclic_lr, sgd_update
from .keys import SecretKey
from .shuffle import BlockSpec, derive_permutation, key_space
from . import data as datamod

KEY_MODES = ("correct", "wrong", "none")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_dict(self) -> list[dict]:
        return [vars(e) for e in self.epochs]


class ProtectedModel:
    def __init__(self, arch: ArchConfig, net: Network, placement_table: dict[str, Placement]):
        self.arch = arch
        self.net = net
        self.placement_table = placement_table
        self.active: dict[str, BlockSpec] = {}
        self.key: SecretKey | None = None
        self.perms: dict[str, np.ndarray] = {}

    # -- placement / key management -------------------------------------------------

    def activate_placements(self, placement_ids: list[str], block_size: int) -> None:
        for pid in placement_ids:
            if pid not in self.placement_table:
                raise ValueError(f"unknown placement {pid!r}; model exposes {sorted(self.placement_table)}")
            if pid in self.active:
                raise ValueError(f"placement {pid!r} already active")
            pl = self.placement_table[pid]
            if pl.height % block_size or pl.width % block_size:
                raise ValueError(
                    f"placement {pid!r} has spatial dims ({pl.height},{pl.width}) "
                    f"not divisible by block size {block_size}"
                )
            spec = BlockSpec(block_size, pl.channels)
            self.active[pid] = spec
            self._shuffle_layer(pid).configure(spec)

    def bind_key(self, key: SecretKey) -> None:
        """Derive (or rederive) every active placement's permutation from `key`."""
        self.key = key
        self.perms = {pid: derive_permutation(key, spec.n) for pid, spec in self.active.items()}

    def unbind_key(self) -> None:
        self.key = None
        self.perms = {}

    def _shuffle_layer(self, placement_id: str) -> BlockShuffle:
        for _, layer in self.net.layers:
            if isinstance(layer, BlockShuffle) and layer.placement_id == placement_id:
                return layer
        raise ValueError(f"no shuffle layer for placement {placement_id!r}")

    def perms_for_mode(self, key_mode: str, wrong_key: SecretKey | None = None) -> dict[str, np.ndarray]:
        if key_mode == "correct":
            return dict(self.perms)
        if key_mode == "none":
            return {}
        if key_mode == "wrong":
            if wrong_key is None:
                raise ValueError("key_mode 'wrong' needs a key to derive the wrong permutations from")
            return {pid: derive_permutation(wrong_key, spec.n) for pid, spec in self.active.items()}
        raise ValueError(f"key_mode must be one of {KEY_MODES}, got {key_mode!r}")

    # -- forward / persistence -------------------------------------------------------

    def forward(self, batch: np.ndarray, train: bool = False,
                perms: dict[str, np.ndarray] | None = None) -> np.ndarray:
        return self.net.forward(batch, train=train, perms=self.perms if perms is None else perms)

    def key_space_table(self) -> list[dict]:
        rows = []
        for pid, spec in self.active.items():
            rows.append({
                "placement": pid,
                "n": spec.n,
                "symbolic": f"{spec.n}!",
                "decimal": str(key_space(spec)),
            })
        return rows

    def manifest(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "placements": sorted(self.active),
            "block_size": next(iter(self.active.values())).block_size if self.active else None,
            "key_fingerprint": self.key.fingerprint() if self.key else None,
        }

    def save(self, path: str | Path, extra_tensors: dict[str, np.ndarray] | None = None) -> None:
        """Write the binary checkpoint plus the JSON manifest sidecar."""
        path = Path(path)
        tensors = {f"param/{k}": v for k, v in self.net.named_params().items()}
        tensors.update({f"buffer/{k}": v for k, v in self.net.named_buffers().items()})
        if extra_tensors:
            tensors.update(extra_tensors)
        save_tensors(path, tensors)
        manifest_path(path).write_text(
            json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def clone(self, unbind: bool = False) -> "ProtectedModel":
        """Structural copy with independent parameter arrays (the 'stolen model' view)."""
        rng = np.random.default_rng(0)
        dtype = next(iter(self.net.named_params().values())).dtype
        layers, table = build_layers(self.arch, rng, dtype=dtype)
        other = ProtectedModel(self.arch, Network(layers), table)
        if self.active:
            block_size = next(iter(self.active.values())).block_size
            other.activate_placements(sorted(self.active), block_size)
        src_p, dst_p = self.net.named_params(), other.net.named_params()
        for k, v in src_p.items():
            dst_p[k][...] = v
        src_b, dst_b = self.net.named_buffers(), other.net.named_buffers()
        for k, v in src_b.items():
            dst_b[k][...] = v
        if not unbind and self.key is not None:
            other.bind_key(self.key)
        return other


def manifest_path(ckpt_path: str | Path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".manifest.json")


def build_model(arch: ArchConfig, init_seed: int = 0, dtype=np.float32) -> ProtectedModel:
    """Runnable unprotected classifier; shuffle slots present but inactive."""
    rng = np.random.default_rng(init_seed)
    layers, table = build_layers(arch, rng, dtype=dtype)
    return ProtectedModel(arch, Network(layers), table)


def protect(model: ProtectedModel, placement_ids: list[str], block_size: int,
            key: SecretKey) -> ProtectedModel:
    """Activate the named placements and bind the key's permutations (one per placement)."""
    model.activate_placements(placement_ids, block_size)
    model.bind_key(key)
    return model


def load_model(path: str | Path, key: SecretKey | None = None) -> ProtectedModel:
    """Rebuild a model from checkpoint + manifest; binds `key` when supplied.

    Without a key, active placements stay unbound (identity shuffles) --
    exactly what an attacker holding the stolen files gets.
    """
    path = Path(path)
    man = json.loads(manifest_path(path).read_text(encoding="utf-8"))
    arch = ArchConfig.from_dict(man["arch"])
    tensors = load_tensors(path)
    dtype = np.float32
    for k, v in tensors.items():
        if k.startswith("param/"):
            dtype = v.dtype
            break
    model = build_model(arch, dtype=dtype)
    if man["placements"]:
        model.activate_placements(man["placements"], man["block_size"])
    params = model.net.named_params()
    buffers = model.net.named_buffers()
    for k, v in tensors.items():
        if k.startswith("param/"):
            params[k[len("param/"):]][...] = v
        elif k.startswith("buffer/"):
            buffers[k[len("buffer/"):]][...] = v
    if key is not None:
        if man["key_fingerprint"] and key.fingerprint() != man["key_fingerprint"]:
            raise ValueError(
                f"key fingerprint {key.fingerprint()} does not match manifest "
                f"{man['key_fingerprint']}; refusing to bind"
            )
        model.bind_key(key)
    return model


# -- training ------------------------------------------------------------------------


def train_model(model: ProtectedModel, train_set, hyper: SgdHyper,
                data_rng: np.random.Generator, augment: bool = True,
                state: SgdState | None = None, on_epoch=None) -> TrainingLog:
    """SGD with momentum and the one-cycle schedule over epochs * steps_per_epoch.

    Works for protected (bound) and unprotected models alike; the shuffle is a
    fixed permutation, owns no parameters, and gradients pass through its
    inverse. `on_epoch(stats)` runs after each epoch is logged.
    """
    images, labels = train_set.images, train_set.labels
    norm = datamod.normalize_images(train_set)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    state = state or SgdState()
    params = model.net.named_params()
    log = TrainingLog()
    step = 0
    for epoch in range(hyper.epochs):
        order = data_rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        lr = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            xb = norm[idx]
            if augment:
                xb = datamod.augment_batch(xb, data_rng)
            yb = labels[idx]
            lr = cyclic_lr(step, total_steps, hyper.max_lr)
            logits = model.forward(xb, train=True)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite loss at step {step}")
            model.net.backward(dlogits)
            sgd_update(params, model.net.named_grads(), state, hyper, lr)
            epoch_loss += loss * len(idx)
            epoch_correct += int((logits.argmax(axis=1) == yb).sum())
            step += 1
        log.epochs.append(EpochStats(epoch, epoch_loss / n, 100.0 * epoch_correct / n, lr))
        if on_epoch is not None:
            on_epoch(log.epochs[-1])
    return log


def train_protected(model: ProtectedModel, train_set, hyper: SgdHyper,
                    data_rng: np.random.Generator, augment: bool = True) -> TrainingLog:
    """Train through the bound shuffle; refuses to run without a key."""
    if model.active and model.key is None:
        raise ValueError("model has active placements but no bound key; bind a key first")
    if not model.active:
        raise ValueError("model has no active placements; train an unprotected model via train_model")
    return train_model(model, train_set, hyper, data_rng, augment=augment)


def evaluate(model: ProtectedModel, test_set, key_mode: str = "correct",
             wrong_key: SecretKey | None = None, batch_size: int = 256) -> float:
    """Accuracy in percent under one of the three key conditions."""
    perms = model.perms_for_mode(key_mode, wrong_key)
    images = datamod.normalize_images(test_set)
    labels = test_set.labels
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits = model.forward(images[start : start + batch_size], train=False, perms=perms)
        correct += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return 100.0 * correct / len(labels)
