"""Layer stacks, softmax cross-entropy, and whole-model gradients."""

from __future__ import annotations

import numpy as np

from .layers import BlockShuffle, Layer, NumericsError


class Network:
    """Ordered stack of named layers with explicit reverse-mode backprop.

    Shuffle slots receive their active permutation per call through `perms`
    (placement id -> permutation vector, missing/None meaning identity), so
    eval forwards never mutate layer state.
    """

    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, train: bool = False,
                perms: dict[str, np.ndarray] | None = None) -> np.ndarray:
        perms = perms or {}
        out = x
        for name, layer in self.layers:
            if isinstance(layer, BlockShuffle):
                out = layer.forward(out, train, perm=perms.get(layer.placement_id))
            else:
                out = layer.forward(out, train)
        if not np.all(np.isfinite(out)):
            self._diagnose_nonfinite(x, train, perms)
        return out

    def _diagnose_nonfinite(self, x, train, perms):
        """Re-run layer by layer to name the first offender (state is already suspect)."""
        out = x
        for name, layer in self.layers:
            if isinstance(layer, BlockShuffle):
                out = layer.forward(out, train, perm=perms.get(layer.placement_id))
            else:
                out = layer.forward(out, train)
            if not np.all(np.isfinite(out)):
                raise NumericsError(f"non-finite activation leaving layer {name!r}")
        raise NumericsError("non-finite activation (transient; could not localize)")

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        g = g_out
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params().items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.grads().items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.buffers().items()}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        shape = in_shape
        for _, layer in self.layers:
            shape = layer.out_shape(shape)
        return shape


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def forward(net: Network, batch: np.ndarray, mode: str = "eval",
            perms: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Run the model on a batch; mode is 'train' or 'eval'."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net.forward(batch, train=(mode == "train"), perms=perms)


def loss_and_grad(net: Network, batch: np.ndarray, labels: np.ndarray,
                  perms: dict[str, np.ndarray] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and gradients for every trainable parameter."""
    logits = net.forward(batch, train=True, perms=perms)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    net.backward(dlogits)
    return loss, net.named_grads()


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    return float((logits.argmax(axis=1) == labels).mean() * 100.0)
