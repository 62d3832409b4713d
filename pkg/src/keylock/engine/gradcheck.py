"""Finite-difference verification of analytic gradients.

Central differences around every parameter entry; intended for tiny test
models (<= 1e4 parameters) built in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import Network, softmax_cross_entropy

# Relative error floor: keeps near-zero gradients (pure FD noise) from
# registering as spurious relative blowups.
_DENOM_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    per_param: dict[str, float] = field(default_factory=dict)


def finite_diff_check(net: Network, batch: np.ndarray, labels: np.ndarray,
                      epsilon: float = 1e-5,
                      perms: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients to central differences.

    Uses train-mode forwards throughout so batchnorm statistics match the
    analytic path; running stats are snapshotted and restored afterwards.
    """
    params = net.named_params()
    n_params = sum(p.size for p in params.values())
    if n_params > 10_000:
        raise ValueError(f"model has {n_params} parameters; gradient check wants <= 10000")

    buffers_before = {k: v.copy() for k, v in net.named_buffers().items()}

    logits = net.forward(batch, train=True, perms=perms)
    _, dlogits = softmax_cross_entropy(logits, labels)
    net.backward(dlogits)
    analytic = {k: v.copy() for k, v in net.named_grads().items()}

    def loss_at() -> float:
        out = net.forward(batch, train=True, perms=perms)
        return softmax_cross_entropy(out, labels)[0]

    report = GradCheckReport(0.0, "", ())
    for name, p in params.items():
        worst = 0.0
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at()
            flat[i] = orig - epsilon
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), _DENOM_FLOOR)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = np.unravel_index(i, p.shape)
        report.per_param[name] = worst

    for k, v in net.named_buffers().items():
        v[...] = buffers_before[k]
    return report
