from typing import List, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node
from .tensor import ShapeError, Tensor

REDUCTIONS = ("mean", "sum")

KernelTrace = List[Node]


def channel_expand(k: Node, target_channels: int) -> Node:
    """Repeat the channels of `k` [1, C_t, ...] until there are `target_channels`."""
    k = ag.as_node(k)
    channels = k.shape[1]
    if target_channels % channels:
        raise ShapeError(f"cannot expand {channels} channels to {target_channels}")
    reps = target_channels // channels
    return k if reps == 1 else ag.tile_channels(k, reps)


def slow_neural_loss(trace: Sequence[Node], reduction: str = "mean") -> Node:
    """Sum over blocks j >= 1 and earlier blocks t of ||K_g^j - E(K_g^t)||^2.

    With `reduction="mean"` each squared norm is divided by the element count of K_g^j.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}, expected one of {REDUCTIONS}")
    kernels = [ag.as_node(k) for k in trace]
    total = ag.constant(0.0)
    for j, k_j in enumerate(kernels):
        for k_t in kernels[:j]:
            if k_t.shape[2:] != k_j.shape[2:]:
                raise ShapeError(f"kernel spatial shapes differ: {k_t.shape} vs {k_j.shape}")
            diff = ag.sub(k_j, channel_expand(k_t, k_j.shape[1]))
            sq = ag.reduce_sum(ag.mul(diff, diff), keepdims=False)
            if reduction == "mean":
                sq = ag.mul(sq, 1.0 / k_j.value.size)
            total = ag.add(total, sq)
    return total


def cross_entropy(logits: Node, labels: Sequence[int]) -> Node:
    """Mean negative log-likelihood of `labels` under softmax(`logits`)."""
    logits = ag.as_node(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, classes], got {logits.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")

    z = logits.value.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    value = -log_probs[rows, labels].mean()

    def vjp(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (g * grad / batch,)

    return ag.custom_op(Tensor.wrap(np.asarray(value, dtype=z.dtype)), (logits,), vjp, "cross_entropy")


def total_loss(ce: Node, ls: Node, alpha: float) -> Node:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return ag.as_node(ce)
    return ag.add(ce, ag.mul(ls, alpha))
