from dataclasses import dataclass
from typing import Any, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Node

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class StdConfig:
    epsilon: float = DEFAULT_EPS
    groups: int = 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive, got {self.groups}")


def _spatial_axes(ndim: int) -> Tuple[int, ...]:
    return tuple(range(2, ndim))


def z_score(x: Any, axes: Sequence[int], eps: float = DEFAULT_EPS) -> Node:
    """(x - E[x]) / sqrt(Var[x] + eps) over `axes`, without affine or running statistics."""
    x = ag.as_node(x)
    centered = ag.sub(x, ag.reduce_mean(x, axes))
    var = ag.reduce_mean(ag.mul(centered, centered), axes)
    return ag.mul(centered, ag.power(ag.add(var, eps), -0.5))


def batch_standardize(x: Any, eps: float = DEFAULT_EPS) -> Node:
    x = ag.as_node(x)
    return z_score(x, (0,) + _spatial_axes(x.ndim), eps)


def instance_standardize(x: Any, eps: float = DEFAULT_EPS) -> Node:
    x = ag.as_node(x)
    return z_score(x, _spatial_axes(x.ndim), eps)


def g_ibs(x: Any, groups: int, eps: float = DEFAULT_EPS) -> Node:
    """Group-based instance-batch standardization.

    Channels are split into `groups` contiguous blocks. Even-indexed groups are
    z-scored jointly over (batch, group channels, space); odd-indexed groups over
    (group channels, space) separately for each sample.
    """
    x = ag.as_node(x)
    batch, channels = x.shape[0], x.shape[1]
    if groups < 1 or channels % groups:
        raise ValueError(f"groups={groups} must divide {channels} channels")
    spatial = x.shape[2:]
    grouped = ag.reshape(x, (batch, groups, channels // groups) + spatial)
    inner = tuple(range(2, grouped.ndim))
    batch_part = z_score(grouped, (0,) + inner, eps)
    if groups == 1:
        return ag.reshape(batch_part, x.shape)
    instance_part = z_score(grouped, inner, eps)
    mask = np.zeros((1, groups) + (1,) * len(inner))
    mask[:, 0::2] = 1.0
    mixed = ag.add(ag.mul(batch_part, mask), ag.mul(instance_part, 1.0 - mask))
    return ag.reshape(mixed, x.shape)
