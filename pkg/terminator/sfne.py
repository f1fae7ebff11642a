"""Slow-Fast Neural Encoding block.

Nine branches read the block input: three global HyperZZW branches on three
channel-mixed views sharing one K_g, local HyperZZW branches (the first two
cross-conditioned through MuHKGen), Si-GLU, the raw mixer output ("middle") and
hyper interaction. Their concatenation is compressed to `expansion * C` channels
by a bias-free 1x1 bottleneck followed by G-IBS. There is no residual path.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter
from .hyperzzw import ContextKernel, global_hyperzzw, hyper_channel_interaction, hyper_interaction, local_hyperzzw
from .slownet import LocalMfn, Mfn, MfnConfig, generate_global, generate_hyperweights, generate_local, make_grid
from .standardize import DEFAULT_EPS, g_ibs, instance_standardize
from .tensor import Tensor

GLOBAL_BRANCHES = ("global_mixer", "global_rgu", "global_hci")
TAIL_BRANCHES = ("siglu", "middle", "hyper_interaction")
VIEWS = ("mixer", "rgu", "hci")


class BranchError(ValueError):
    """Raised when a branch of an SFNE block fails; the message names the branch."""


@dataclass(frozen=True)
class SfneConfig:
    in_channels: int
    expansion: int = 2
    kernel_sizes: Tuple[int, ...] = (3, 5, 7)
    groups: int = 4
    spatial_rank: int = 2
    eps: float = DEFAULT_EPS
    global_mfn: MfnConfig = field(default_factory=lambda: MfnConfig(depth=2, width=32))
    local_mfn: MfnConfig = field(default_factory=lambda: MfnConfig(depth=2, width=8))
    hyper_mfn: MfnConfig = field(default_factory=lambda: MfnConfig(depth=1, width=16))
    disabled_branches: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.spatial_rank not in (1, 2):
            raise ValueError(f"spatial_rank must be 1 or 2, got {self.spatial_rank}")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"local kernel sizes must be odd, got {k}")
        unknown = set(self.disabled_branches) - set(self.all_branches)
        if unknown:
            raise ValueError(f"unknown branches {sorted(unknown)}")
        if not self.branches:
            raise ValueError("at least one branch must be enabled")
        if self.concat_channels < self.out_channels:
            raise ValueError(
                f"{len(self.branches)} branches give {self.concat_channels} channels, "
                f"fewer than the {self.out_channels} output channels"
            )
        if self.out_channels % self.groups:
            raise ValueError(f"groups={self.groups} must divide {self.out_channels} output channels")

    @property
    def all_branches(self) -> Tuple[str, ...]:
        return GLOBAL_BRANCHES + tuple(f"local_{i}" for i in range(len(self.kernel_sizes))) + TAIL_BRANCHES

    @property
    def branches(self) -> Tuple[str, ...]:
        return tuple(name for name in self.all_branches if name not in self.disabled_branches)

    @property
    def out_channels(self) -> int:
        return self.expansion * self.in_channels

    @property
    def concat_channels(self) -> int:
        return len(self.branches) * self.in_channels


@dataclass
class RguParams:
    wk: Parameter
    wv: Parameter
    w: Parameter
    wy: Parameter
    b: Parameter

    def parameters(self) -> List[Parameter]:
        return [self.wk, self.wv, self.w, self.wy, self.b]


@dataclass
class SfneOutput:
    output: Node
    k_g: Node
    context: ContextKernel
    branches: Dict[str, Node]


def si_glu(x: Node) -> Node:
    x = ag.as_node(x)
    return ag.mul(ag.sigmoid(x), x)


def channel_mixer(x: Node, w: Node, b: Node, eps: float = DEFAULT_EPS) -> Node:
    """One-layer per-position channel MLP followed by instance standardization."""
    return instance_standardize(ag.channel_bias(ag.channel_mix(x, w), b), eps)


def rgu(x: Node, p: RguParams, eps: float = DEFAULT_EPS) -> Node:
    """Recursive gated unit: W_Y (GeLU(IS(W_K x * W (W_V x))) + b)."""
    k = ag.channel_mix(x, p.wk)
    v = ag.channel_mix(x, p.wv)
    q = ag.channel_bias(ag.gelu(instance_standardize(ag.mul(k, ag.channel_mix(v, p.w)), eps)), p.b)
    return ag.channel_mix(q, p.wy)


def muhkgen(z1: Node, z2: Node, slow1: LocalMfn, slow2: LocalMfn) -> Tuple[Node, Node]:
    """Each input is convolved with a kernel generated from its partner's activations.

    Returns (z1 * gen(slow1, z2), z2 * gen(slow2, z1)): slow net i owns the kernel
    applied to z_i and reads its context from the other stream. Neither slow net
    is ever conditioned on the stream it convolves.
    """
    z1, z2 = ag.as_node(z1), ag.as_node(z2)
    if z1.shape != z2.shape:
        raise ValueError(f"MuHKGen operands differ: {z1.shape} vs {z2.shape}")
    k1 = generate_local(slow1, z2)
    k2 = generate_local(slow2, z1)
    return local_hyperzzw(z1, k1), local_hyperzzw(z2, k2)


def bottleneck(concat: Node, weight: Node, expansion: int, in_channels: int, groups: int, eps: float = DEFAULT_EPS) -> Node:
    """Bias-free 1x1 projection C_cat -> expansion * C_in, then G-IBS."""
    concat = ag.as_node(concat)
    target = expansion * in_channels
    if concat.shape[1] < target:
        raise ValueError(f"cannot compress {concat.shape[1]} channels to {target}")
    return g_ibs(ag.channel_mix(concat, weight), groups, eps)


def _mean(nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for node in nodes[1:]:
        total = ag.add(total, node)
    return ag.mul(total, 1.0 / len(nodes))


class SfneBlock:
    """All parameters of one SFNE block, named `block{j}.{slow|fast}.<part>.<symbol>`."""

    def __init__(self, index: int, cfg: SfneConfig, rng: np.random.Generator):
        self.index = index
        self.cfg = cfg
        c, rank = cfg.in_channels, cfg.spatial_rank
        prefix = f"block{index}"
        self.global_net = Mfn(f"{prefix}.slow.global", rank, c, cfg.global_mfn, rng)
        self.local_nets = [
            LocalMfn(f"{prefix}.slow.local{i}", rank, c, k, cfg.local_mfn, rng) for i, k in enumerate(cfg.kernel_sizes)
        ]
        self.hci_net = Mfn(f"{prefix}.slow.hci", 1, 1, cfg.hyper_mfn, rng)
        self.hi_channel_net = Mfn(f"{prefix}.slow.hi_channel", 1, 1, cfg.hyper_mfn, rng)
        self.hi_spatial_net = Mfn(f"{prefix}.slow.hi_spatial", rank, 1, cfg.hyper_mfn, rng)

        self.mixer_w = self._fast("mixer.W", rng, (c, c), c, "mixer")
        self.mixer_b = self._fast("mixer.b", rng, (c,), c, "mixer")
        self.rgu = RguParams(
            wk=self._fast("rgu.Wk", rng, (c, c), c, "mixer"),
            wv=self._fast("rgu.Wv", rng, (c, c), c, "mixer"),
            w=self._fast("rgu.W", rng, (c, c), c, "mixer"),
            wy=self._fast("rgu.Wy", rng, (c, c), c, "mixer"),
            b=self._fast("rgu.b", rng, (c,), c, "mixer"),
        )
        self.bottleneck_w = self._fast(
            "bottleneck.W", rng, (cfg.out_channels, cfg.concat_channels), cfg.concat_channels, "bottleneck"
        )
        self._grids: Dict[Tuple[int, ...], Tensor] = {}

    def _fast(self, name: str, rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, group: str) -> Parameter:
        bound = 1.0 / np.sqrt(fan_in)
        return Parameter(f"block{self.index}.fast.{name}", rng.uniform(-bound, bound, size=shape), "fast", group)

    def slow_nets(self) -> List[Mfn]:
        return [self.global_net, *self.local_nets, self.hci_net, self.hi_channel_net, self.hi_spatial_net]

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for net in self.slow_nets():
            params += net.parameters()
        return params + [self.mixer_w, self.mixer_b, *self.rgu.parameters(), self.bottleneck_w]

    def global_kernel(self, spatial: Tuple[int, ...]) -> Node:
        grid = self._grids.get(spatial)
        if grid is None:
            grid = self._grids[spatial] = make_grid(*spatial)
        return generate_global(self.global_net, grid)

    def forward(self, x: Node, step: int = 0) -> SfneOutput:
        x = ag.as_node(x)
        cfg = self.cfg
        if x.ndim != cfg.spatial_rank + 2 or x.shape[1] != cfg.in_channels:
            raise BranchError(f"block{self.index}: input {x.shape} does not match {cfg.in_channels} channels of rank {cfg.spatial_rank}")
        spatial = x.shape[2:]
        enabled = set(cfg.branches)
        k_g = self.global_kernel(spatial)
        context = ContextKernel(ag.ew_mul(x, k_g), block=self.index, step=step)

        views: Dict[str, Node] = {}
        makers: Dict[str, Callable[[], Node]] = {
            "mixer": lambda: channel_mixer(x, self.mixer_w, self.mixer_b, cfg.eps),
            "rgu": lambda: instance_standardize(ag.add(rgu(x, self.rgu, cfg.eps), rgu(context.value, self.rgu, cfg.eps)), cfg.eps),
            "hci": lambda: instance_standardize(
                hyper_channel_interaction(x, generate_hyperweights(self.hci_net, "channel", cfg.in_channels, cfg.spatial_rank)),
                cfg.eps,
            ),
        }

        def view(name: str) -> Node:
            if name not in views:
                views[name] = makers[name]()
            return views[name]

        paired: Dict[str, Node] = {}

        def local_branch(i: int) -> Node:
            if len(self.local_nets) >= 2 and i < 2:
                if not paired:
                    paired["local_0"], paired["local_1"] = muhkgen(view("mixer"), view("rgu"), self.local_nets[0], self.local_nets[1])
                return paired[f"local_{i}"]
            z = view(VIEWS[i % len(VIEWS)])
            return local_hyperzzw(z, generate_local(self.local_nets[i], z))

        outputs: Dict[str, Node] = {}
        for name in cfg.branches:
            if name == "hyper_interaction":
                continue
            try:
                if name.startswith("global_"):
                    outputs[name] = global_hyperzzw(view(name[len("global_"):]), k_g)[1]
                elif name.startswith("local_"):
                    outputs[name] = local_branch(int(name[len("local_"):]))
                elif name == "siglu":
                    outputs[name] = si_glu(x)
                elif name == "middle":
                    outputs[name] = view("mixer")
            except ValueError as e:
                raise BranchError(f"block{self.index}.{name}: {e}") from e

        if "hyper_interaction" in enabled:
            try:
                h_high = _mean(list(outputs.values())) if outputs else x
                w_c = generate_hyperweights(self.hi_channel_net, "channel", cfg.in_channels, cfg.spatial_rank)
                w_s = generate_hyperweights(self.hi_spatial_net, "spatial", spatial)
                outputs["hyper_interaction"] = hyper_interaction(x, h_high, w_c, w_s)
            except ValueError as e:
                raise BranchError(f"block{self.index}.hyper_interaction: {e}") from e

        ordered = [outputs[name] for name in cfg.branches]
        concat = ag.concat(ordered, axis=1) if len(ordered) > 1 else ordered[0]
        try:
            out = bottleneck(concat, self.bottleneck_w, cfg.expansion, cfg.in_channels, cfg.groups, cfg.eps)
        except ValueError as e:
            raise BranchError(f"block{self.index}.bottleneck: {e}") from e
        logging.debug("block%d forward: %s -> %s over %d branches", self.index, x.shape, out.shape, len(ordered))
        return SfneOutput(output=out, k_g=k_g, context=context, branches={name: outputs[name] for name in cfg.branches})


def sfne_forward(x: Node, block: SfneBlock, step: int = 0) -> Node:
    return block.forward(x, step).output
