from dataclasses import dataclass
from typing import Tuple

from . import autograd as ag
from .autograd import Node
from .tensor import ShapeError


@dataclass(frozen=True)
class ContextKernel:
    """Context-dependent global kernel Z * K_g of one block at one step."""

    value: Node
    block: int = 0
    step: int = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


def _check_kernel(z: Node, k_g: Node) -> None:
    if k_g.ndim != z.ndim or k_g.shape[0] != 1 or k_g.shape[1:] != z.shape[1:]:
        raise ShapeError(f"global kernel {k_g.shape} does not match activations {z.shape}")


def global_hyperzzw_2d(z: Node, k_g: Node) -> Tuple[Node, Node]:
    """Return (K_hat, Z_g) with K_hat = Z * K_g and Z_g = Z * K_hat."""
    z, k_g = ag.as_node(z), ag.as_node(k_g)
    _check_kernel(z, k_g)
    k_hat = ag.ew_mul(z, k_g)
    return k_hat, ag.mul(z, k_hat)


def global_hyperzzw_1d(z: Node, k_g: Node) -> Tuple[Node, Node]:
    """Return (K_hat, Z_g) with Z_g the circular convolution of Z with K_hat along L."""
    z, k_g = ag.as_node(z), ag.as_node(k_g)
    _check_kernel(z, k_g)
    k_hat = ag.ew_mul(z, k_g)
    return k_hat, ag.circular_conv(z, k_hat)


def global_hyperzzw(z: Node, k_g: Node) -> Tuple[Node, Node]:
    z = ag.as_node(z)
    if z.ndim == 3:
        return global_hyperzzw_1d(z, k_g)
    if z.ndim == 4:
        return global_hyperzzw_2d(z, k_g)
    raise ShapeError(f"global HyperZZW expects [B,C,L] or [B,C,H,W], got {z.shape}")


def local_hyperzzw(z: Node, k_hat: Node) -> Node:
    return ag.depthwise_conv(z, k_hat)


def _descriptor(x: Node) -> Node:
    return ag.adaptive_avg_pool(x, (1,) * (x.ndim - 2))


def _check_channel_weights(x: Node, w_c: Node) -> None:
    if w_c.shape[0] != x.shape[1]:
        raise ShapeError(f"channel weights {w_c.shape} do not match {x.shape[1]} channels")


def hyper_channel_interaction(x: Node, w_c: Node) -> Node:
    """Gate each channel of `x` by sigmoid(z_c * w_c * z_c), z_c its spatial mean."""
    x, w_c = ag.as_node(x), ag.as_node(w_c)
    _check_channel_weights(x, w_c)
    z_c = _descriptor(x)
    scores = ag.mul(ag.mul(z_c, w_c), z_c)
    return ag.mul(x, ag.sigmoid(scores))


def hyper_interaction(x_low: Node, h_high: Node, w_c: Node, w_s: Node) -> Node:
    """Pixel-level gating of `x_low` by channel and spatial scores computed from `h_high`."""
    x_low, h_high, w_c, w_s = (ag.as_node(t) for t in (x_low, h_high, w_c, w_s))
    if x_low.shape != h_high.shape:
        raise ShapeError(f"hyper interaction operands differ: {x_low.shape} vs {h_high.shape}")
    _check_channel_weights(h_high, w_c)
    if w_s.shape[1:] != h_high.shape[2:]:
        raise ShapeError(f"spatial weights {w_s.shape} do not match spatial shape {h_high.shape[2:]}")
    z_c = _descriptor(h_high)
    s_c = ag.mul(ag.mul(z_c, w_c), z_c)
    z_s = ag.reduce_mean(h_high, axes=1)
    s_s = ag.mul(ag.mul(z_s, w_s), z_s)
    return ag.mul(x_low, ag.sigmoid(ag.mul(s_c, s_s)))
