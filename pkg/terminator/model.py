import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter
from .hyperzzw import ContextKernel
from .losses import KernelTrace
from .sfne import SfneBlock, SfneConfig
from .slownet import MfnConfig
from .tensor import ShapeError


@dataclass(frozen=True)
class ModelConfig:
    input_shape: Tuple[int, ...]
    stem_channels: int
    blocks: Tuple[SfneConfig, ...]
    num_classes: int = 10

    def __post_init__(self):
        if len(self.input_shape) not in (2, 3) or any(n < 1 for n in self.input_shape):
            raise ValueError(f"input_shape must be (C, L) or (C, H, W), got {self.input_shape}")
        if self.stem_channels < 1 or self.num_classes < 2:
            raise ValueError("stem_channels must be >= 1 and num_classes >= 2")
        channels = self.stem_channels
        seen: List[int] = []
        for j, block in enumerate(self.blocks):
            if block.in_channels != channels:
                raise ValueError(f"block{j} expects {block.in_channels} channels but receives {channels}")
            if block.spatial_rank != self.spatial_rank:
                raise ValueError(f"block{j} has spatial rank {block.spatial_rank}, input has {self.spatial_rank}")
            for earlier in seen:
                if channels % earlier:
                    raise ValueError(f"block{j} channels {channels} are not a multiple of earlier block channels {earlier}")
            seen.append(channels)
            channels = block.out_channels

    @property
    def mode(self) -> str:
        return "1d" if len(self.input_shape) == 2 else "2d"

    @property
    def spatial_rank(self) -> int:
        return len(self.input_shape) - 1

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.stem_channels


def _schedule(
    input_shape: Tuple[int, ...],
    stem: int,
    num_blocks: int,
    expansion: int = 2,
    **block_kwargs: Any,
) -> Tuple[SfneConfig, ...]:
    rank = len(input_shape) - 1
    blocks, channels = [], stem
    for _ in range(num_blocks):
        blocks.append(SfneConfig(in_channels=channels, expansion=expansion, spatial_rank=rank, **block_kwargs))
        channels *= expansion
    return tuple(blocks)


def desk_config(num_classes: int = 10) -> ModelConfig:
    """Four blocks 8 -> 16 -> 32 -> 64 (output 128) for 28x28 images."""
    return ModelConfig((1, 28, 28), 8, _schedule((1, 28, 28), 8, 4), num_classes)


def tiny_config(num_classes: int = 3) -> ModelConfig:
    """Two small blocks on 6x6 inputs, sized for finite-difference checks."""
    blocks = _schedule(
        (1, 6, 6),
        4,
        2,
        kernel_sizes=(3, 5),
        groups=2,
        global_mfn=MfnConfig(depth=2, width=6, omega=8.0),
        local_mfn=MfnConfig(depth=2, width=4, omega=4.0),
        hyper_mfn=MfnConfig(depth=1, width=4, omega=4.0),
    )
    return ModelConfig((1, 6, 6), 4, blocks, num_classes)


def sequential_config(length: int = 784, num_classes: int = 10) -> ModelConfig:
    """Three 1D blocks 8 -> 16 -> 32 for pixel sequences (global path through the FFT)."""
    return ModelConfig((1, length), 8, _schedule((1, length), 8, 3), num_classes)


def reference_config(num_classes: int = 10) -> ModelConfig:
    """Five blocks 32 -> 512 on 32x32 RGB inputs, used for parameter accounting only."""
    blocks = _schedule(
        (3, 32, 32),
        32,
        5,
        global_mfn=MfnConfig(depth=2, width=160),
        local_mfn=MfnConfig(depth=2, width=32),
    )
    return ModelConfig((3, 32, 32), 32, blocks, num_classes)


CONFIG_FACTORIES = {
    "desk": desk_config,
    "tiny": tiny_config,
    "sequential": sequential_config,
    "reference": reference_config,
}


@dataclass
class ForwardResult:
    logits: Node
    trace: KernelTrace
    contexts: List[ContextKernel]
    taps: Dict[str, Node] = field(default_factory=dict)


class Terminator:
    """Stem, stacked SFNE blocks, one global average pool and a linear head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        c0 = cfg.input_shape[0]
        self.stem_w = Parameter("stem.W", rng.uniform(-1, 1, size=(cfg.stem_channels, c0)) / np.sqrt(c0), "fast", "stem")
        self.blocks = [SfneBlock(j, block_cfg, rng) for j, block_cfg in enumerate(cfg.blocks)]
        bound = 1.0 / np.sqrt(cfg.feature_channels)
        self.head_w = Parameter("head.W", rng.uniform(-bound, bound, size=(cfg.num_classes, cfg.feature_channels)), "fast", "head")
        self.head_b = Parameter("head.b", rng.uniform(-bound, bound, size=(cfg.num_classes,)), "fast", "head")
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("parameter names are not unique")
        logging.debug("Built %s model with %d parameter tensors", cfg.mode, len(names))

    def parameters(self) -> List[Parameter]:
        params = [self.stem_w]
        for block in self.blocks:
            params += block.parameters()
        return params + [self.head_w, self.head_b]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def slow_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.component == "slow"]

    def fast_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.component == "fast"]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.numpy() for p in self.parameters()}

    def forward(self, x: Any, step: int = 0) -> ForwardResult:
        x = ag.as_node(x)
        if x.shape[1:] != tuple(self.cfg.input_shape):
            raise ShapeError(f"input {x.shape} does not match model input {tuple(self.cfg.input_shape)}")
        h = ag.channel_mix(x, self.stem_w)
        taps: Dict[str, Node] = {"stem": h}
        trace: KernelTrace = []
        contexts: List[ContextKernel] = []
        for block in self.blocks:
            result = block.forward(h, step)
            h = result.output
            trace.append(result.k_g)
            contexts.append(result.context)
            taps[f"block{block.index}"] = h
        pooled = ag.adaptive_avg_pool(h, (1,) * self.cfg.spatial_rank)
        features = ag.reshape(pooled, pooled.shape[:2])
        logits = ag.channel_bias(ag.channel_mix(features, self.head_w), self.head_b)
        return ForwardResult(logits=logits, trace=trace, contexts=contexts, taps=taps)


def forward(x: Any, model: Terminator, step: int = 0) -> ForwardResult:
    return model.forward(x, step)


@dataclass
class ParamCount:
    slow: int
    fast: int
    rows: List[Dict[str, Any]]

    @property
    def total(self) -> int:
        return self.slow + self.fast

    @property
    def slow_fraction(self) -> float:
        return self.slow / self.total if self.total else 0.0

    @property
    def fast_fraction(self) -> float:
        return self.fast / self.total if self.total else 0.0


def count_params(model: Terminator) -> ParamCount:
    """Parameter counts split by component, with one row per block plus stem and head."""
    def size(params: List[Parameter]) -> int:
        return int(sum(p.value.size for p in params))

    rows: List[Dict[str, Any]] = [{"part": "stem", "slow": 0, "mixers": 0, "bottleneck": 0, "other": size([model.stem_w])}]
    for block in model.blocks:
        params = block.parameters()
        rows.append(
            {
                "part": f"block{block.index}",
                "slow": size([p for p in params if p.group == "slow"]),
                "mixers": size([p for p in params if p.group == "mixer"]),
                "bottleneck": size([p for p in params if p.group == "bottleneck"]),
                "other": 0,
            }
        )
    rows.append({"part": "head", "slow": 0, "mixers": 0, "bottleneck": 0, "other": size([model.head_w, model.head_b])})
    for row in rows:
        row["total"] = row["slow"] + row["mixers"] + row["bottleneck"] + row["other"]
    return ParamCount(slow=size(model.slow_parameters()), fast=size(model.fast_parameters()), rows=rows)
