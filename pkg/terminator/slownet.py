"""Coordinate-based slow networks (multiplicative filter networks).

A slow network maps a fixed coordinate grid to a kernel. The global generator
emits an input-sized kernel K_g, the local generator a small depthwise kernel
conditioned on the activations through the T transform, and the hyper-weight
generators the channel and spatial gating weights of the interaction modules.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter
from .tensor import ShapeError, Tensor

RENORM_EPS = 1e-8


@dataclass(frozen=True)
class MfnConfig:
    depth: int = 2
    width: int = 32
    omega: float = 64.0

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")


def make_grid(*extents: int) -> Tensor:
    """Normalized coordinates in [-1, 1] with shape [1, len(extents), *extents]."""
    if not extents or any(n < 1 for n in extents):
        raise ShapeError(f"grid extents must be >= 1, got {extents}")
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in extents]
    mesh = np.meshgrid(*axes, indexing="ij")
    return Tensor(np.stack(mesh)[None])


def sin_filter(c: Union[Tensor, Node], w: Node, phi: Node) -> Node:
    """sin(w c + phi): w [d, r] projects the r coordinate channels to d channels."""
    return ag.sin(ag.channel_bias(ag.channel_mix(c, w), phi))


def s_renormalize(h: Node, a: Node, b: Node, eps: float = RENORM_EPS) -> Node:
    """a_j h_j + b_j h_j / ||h_j||, the norm taken per channel over the spatial extent."""
    spatial = tuple(range(2, h.ndim))
    inv_norm = ag.power(ag.add(ag.l2_norm(h, spatial), eps), -1.0)
    return ag.add(ag.channel_scale(h, a), ag.channel_scale(ag.mul(h, inv_norm), b))


def _uniform(rng: np.random.Generator, bound: float, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Mfn:
    """Parameters and recursion of one multiplicative filter network.

    Parameter names are `<prefix>.w{i}` / `<prefix>.phi{i}` for the l+1 filters,
    `<prefix>.W{i}` / `<prefix>.b{i}` for the l linear layers, `renorm_a`,
    `renorm_b` and the output layer `Wo` / `bo`.
    """

    def __init__(self, prefix: str, coord_dim: int, out_channels: int, cfg: MfnConfig, rng: np.random.Generator):
        self.prefix = prefix
        self.coord_dim = coord_dim
        self.out_channels = out_channels
        self.cfg = cfg
        d, depth = cfg.width, cfg.depth
        freq_bound = cfg.omega / np.sqrt(depth + 1)
        lin_bound = np.sqrt(1.0 / d)

        self.filters: List[Tuple[Parameter, Parameter]] = [
            (
                self._param(f"w{i}", _uniform(rng, freq_bound, (d, coord_dim))),
                self._param(f"phi{i}", _uniform(rng, np.pi, (d,))),
            )
            for i in range(depth + 1)
        ]
        self.linears: List[Tuple[Parameter, Parameter]] = [
            (self._param(f"W{i}", _uniform(rng, lin_bound, (d, d))), self._param(f"b{i}", _uniform(rng, lin_bound, (d,))))
            for i in range(depth)
        ]
        self.renorm_a = self._param("renorm_a", np.full(d, 1.0))
        self.renorm_b = self._param("renorm_b", np.full(d, 0.1))
        self.out_w = self._param("Wo", _uniform(rng, lin_bound, (out_channels, d)))
        self.out_b = self._param("bo", np.zeros(out_channels))

    def _param(self, name: str, value: np.ndarray) -> Parameter:
        return Parameter(f"{self.prefix}.{name}", value, component="slow", group="slow")

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for w, phi in self.filters:
            params += [w, phi]
        for weight, bias in self.linears:
            params += [weight, bias]
        return params + [self.renorm_a, self.renorm_b, self.out_w, self.out_b]

    def layer_gate(self, index: int, context: Optional[Node]) -> Optional[Node]:
        return None

    def hidden(self, grid: Union[Tensor, Node], context: Optional[Node] = None) -> Node:
        if ag.as_node(grid).shape[1] != self.coord_dim:
            raise ShapeError(f"{self.prefix}: grid has {ag.as_node(grid).shape[1]} coordinate channels, expected {self.coord_dim}")
        w, phi = self.filters[0]
        h = sin_filter(grid, w, phi)
        for i, (weight, bias) in enumerate(self.linears):
            w, phi = self.filters[i + 1]
            h = ag.mul(ag.channel_bias(ag.channel_mix(h, weight), bias), sin_filter(grid, w, phi))
            gate = self.layer_gate(i, context)
            if gate is not None:
                h = ag.mul(gate, h)
            h = s_renormalize(h, self.renorm_a, self.renorm_b)
        return h

    def output(self, h: Node) -> Node:
        return ag.channel_bias(ag.channel_mix(h, self.out_w), self.out_b)


class LocalMfn(Mfn):
    """MFN whose hidden layers are gated by the context summary T(Z)."""

    def __init__(self, prefix: str, coord_dim: int, channels: int, kernel_size: int, cfg: MfnConfig, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ShapeError(f"local kernel size must be odd, got {kernel_size}")
        super().__init__(prefix, coord_dim, channels, cfg, rng)
        self.kernel_size = kernel_size
        d = cfg.width
        bound = np.sqrt(1.0 / d)
        self.gates: List[Tuple[Parameter, Parameter]] = [
            (self._param(f"Wz{i}", _uniform(rng, bound, (d, d))), self._param(f"bz{i}", np.ones(d)))
            for i in range(cfg.depth)
        ]
        self.reduction = self._param("T", _uniform(rng, np.sqrt(1.0 / channels), (d, channels)))

    def parameters(self) -> List[Parameter]:
        params = super().parameters()
        for weight, bias in self.gates:
            params += [weight, bias]
        return params + [self.reduction]

    def layer_gate(self, index: int, context: Optional[Node]) -> Optional[Node]:
        if context is None:
            return None
        weight, bias = self.gates[index]
        return ag.channel_bias(ag.channel_mix(context, weight), bias)


def generate_global(params: Mfn, grid: Union[Tensor, Node]) -> Node:
    """K_g [1, C, *S] from the coordinate grid alone."""
    return params.output(params.hidden(grid))


def transform_T(z: Node, k: int, reduction: Node) -> Node:
    """Pool Z to k per spatial axis, reduce channels C -> d, then average over the batch."""
    z = ag.as_node(z)
    spatial = z.shape[2:]
    if k > min(spatial):
        raise ShapeError(f"kernel size {k} exceeds spatial extent {spatial}")
    pooled = ag.adaptive_avg_pool(z, (k,) * len(spatial))
    return ag.reduce_mean(ag.channel_mix(pooled, reduction), axes=0)


def generate_local(params: LocalMfn, z: Node, grid: Optional[Tensor] = None) -> Node:
    """Context-dependent depthwise kernel [C, 1, k, ...] for the activations `z`."""
    z = ag.as_node(z)
    k = params.kernel_size
    rank = z.ndim - 2
    if grid is None:
        grid = make_grid(*(k,) * rank)
    if grid.shape[2:] != (k,) * rank:
        raise ShapeError(f"local grid {grid.shape} does not match kernel size {k}")
    if z.shape[1] != params.out_channels:
        raise ShapeError(f"{params.prefix}: activations have {z.shape[1]} channels, expected {params.out_channels}")
    context = transform_T(z, k, params.reduction)
    kernel = params.output(params.hidden(grid, context))
    return ag.reshape(kernel, (params.out_channels, 1) + (k,) * rank)


def generate_hyperweights(params: Mfn, kind: str, size: Union[int, Sequence[int]], spatial_rank: int = 2) -> Node:
    """Channel weights w_c [C, 1, ...] or spatial weights w_s [1, *S] from a one-output MFN."""
    if kind == "channel":
        out = params.output(params.hidden(make_grid(int(size))))
        return ag.reshape(out, (int(size),) + (1,) * spatial_rank)
    if kind == "spatial":
        extents = tuple(size)
        out = params.output(params.hidden(make_grid(*extents)))
        return ag.reshape(out, (1,) + extents)
    raise ValueError(f"unknown hyper-weight kind {kind!r}, expected 'channel' or 'spatial'")
