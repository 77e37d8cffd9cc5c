"""Residual UNet++ and its plain UNet++ ablation.

Nodes R(i, j) sit on a triangular grid: depth i in 0..3, column j in
0..3-i.  Column 0 is the encoder (each node fed by max-pooling the node
above it); every later node concatenates all earlier nodes of its own row
(increasing j) followed by the bilinear upsampling of R(i+1, j-1).  Three
1x1 heads read R(0,1), R(0,2) and R(0,3); only the last one is used at
inference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    upsample_bilinear2,
)

DEPTH = 4
VARIANTS = ("runetpp", "unetpp")
# fixed topological order: column-major by j, then i
NODE_ORDER = [(i, j) for j in range(DEPTH) for i in range(DEPTH - j)]
HEAD_NODES = [(0, 1), (0, 2), (0, 3)]


@dataclass
class ModelConfig:
    variant: str = "runetpp"
    base_width: int = 16
    in_channels: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base_width < 1 or self.in_channels < 1:
            raise ValueError("base_width and in_channels must be >= 1")


def node_width(i: int, base_width: int) -> int:
    return base_width * 2 ** i


def in_edges(i: int, j: int) -> list[tuple[str, tuple[int, int] | None]]:
    """Ordered in-edges of R(i, j) as (kind, source) pairs.

    kind is 'input', 'down', 'skip' or 'up'; the concat order at a node
    follows this list.
    """
    if j == 0:
        return [("input", None)] if i == 0 else [("down", (i - 1, 0))]
    edges: list[tuple[str, tuple[int, int] | None]] = [("skip", (i, k)) for k in range(j)]
    edges.append(("up", (i + 1, j - 1)))
    return edges


def node_in_channels(i: int, j: int, base_width: int, in_channels: int) -> int:
    total = 0
    for kind, src in in_edges(i, j):
        total += in_channels if kind == "input" else node_width(src[0], base_width)
    return total


class Block:
    """One R node.  Holds convolution weights and two batch-norm states."""

    def __init__(self, variant: str, m: int, n: int):
        self.variant, self.m, self.n = variant, m, n
        self.params: dict[str, Tensor] = {}
        if variant == "runetpp":
            self._conv("fusion", n, m, 1)
            self._conv("conv1", n, n, 3)
        else:
            self._conv("conv1", n, m, 3)
        self._conv("conv2", n, n, 3)
        self.bn1 = BatchNormState(n)
        self.bn2 = BatchNormState(n)
        self.params["bn1.gamma"], self.params["bn1.beta"] = self.bn1.gamma, self.bn1.beta
        self.params["bn2.gamma"], self.params["bn2.beta"] = self.bn2.gamma, self.bn2.beta

    def _conv(self, name: str, n: int, m: int, k: int) -> None:
        self.params[f"{name}.weight"] = Tensor(np.zeros((n, m, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(n), requires_grad=True)

    def _c(self, x: Tensor, name: str) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.m:
            raise ShapeError(f"block expects {self.m} input channels, got {x.shape[1]}")
        if self.variant == "runetpp":
            return residual_block(x, self, training)
        return plain_block(x, self, training)


def residual_block(x: Tensor, blk: Block, training: bool) -> Tensor:
    s = blk._c(x, "fusion")
    y = relu(batchnorm2d(blk._c(s, "conv1"), blk.bn1, training))
    y = batchnorm2d(blk._c(y, "conv2"), blk.bn2, training)
    return relu(add(y, s))


def plain_block(x: Tensor, blk: Block, training: bool) -> Tensor:
    y = relu(batchnorm2d(blk._c(x, "conv1"), blk.bn1, training))
    return relu(batchnorm2d(blk._c(y, "conv2"), blk.bn2, training))


def block_parameter_count(variant: str, m: int, n: int) -> int:
    return Block(variant, m, n).count()


class UNetPP:
    """The nested-skip network; ``variant`` picks residual or plain blocks."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        c = self.config
        self.blocks: dict[tuple[int, int], Block] = {}
        for i, j in NODE_ORDER:
            m = node_in_channels(i, j, c.base_width, c.in_channels)
            self.blocks[(i, j)] = Block(c.variant, m, node_width(i, c.base_width))
        self.heads: dict[tuple[int, int], dict[str, Tensor]] = {}
        for node in HEAD_NODES:
            self.heads[node] = {
                "weight": Tensor(np.zeros((1, c.base_width, 1, 1)), requires_grad=True),
                "bias": Tensor(np.zeros(1), requires_grad=True),
            }
        init_params(self, c.seed)

    # parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for (i, j), blk in self.blocks.items():
            for name, t in blk.params.items():
                yield f"R{i}{j}.{name}", t
        for (i, j), head in self.heads.items():
            for name, t in head.items():
                yield f"F{i}{j}.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def batchnorm_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for (i, j), blk in self.blocks.items():
            yield f"R{i}{j}.bn1", blk.bn1
            yield f"R{i}{j}.bn2", blk.bn2

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # forward -----------------------------------------------------------------

    def forward(self, x: Tensor, training: bool = True) -> dict[str, Tensor]:
        """Logits per head: {'y01','y02','y03'} in training, {'y03'} otherwise."""
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B,{self.config.in_channels},H,W], got {x.shape}")
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ShapeError(f"H and W must be divisible by 8, got {h}x{w}")
        out: dict[tuple[int, int], Tensor] = {}
        for i, j in NODE_ORDER:
            parts = []
            for kind, src in in_edges(i, j):
                if kind == "input":
                    parts.append(x)
                elif kind == "down":
                    parts.append(maxpool2(out[src]))
                elif kind == "skip":
                    parts.append(out[src])
                else:
                    parts.append(upsample_bilinear2(out[src]))
            out[(i, j)] = self.blocks[(i, j)](concat_channels(parts), training)
        wanted = HEAD_NODES if training else HEAD_NODES[-1:]
        return {
            f"y{i}{j}": conv2d(out[(i, j)], self.heads[(i, j)]["weight"], self.heads[(i, j)]["bias"])
            for i, j in wanted
        }

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 56) -> np.ndarray:
        """Inference-mode probabilities of the final head, [B,1,H,W]."""
        from .autograd import no_grad

        outs = []
        with no_grad():
            for k in range(0, len(x), batch_size):
                logits = self.forward(Tensor(x[k:k + batch_size]), training=False)["y03"].data
                outs.append(_sigmoid_np(logits))
        return np.concatenate(outs, axis=0)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def init_params(model: UNetPP, seed: int) -> None:
    """He-normal conv weights (std sqrt(2/fan_in)), zero biases, gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        if name.endswith(".weight"):
            fan_in = int(np.prod(t.shape[1:]))
            t.data[...] = rng.standard_normal(t.shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".gamma"):
            t.data[...] = 1.0
        else:
            t.data[...] = 0.0
    for _, st in model.batchnorm_states():
        st.running_mean[...] = 0.0
        st.running_var[...] = 1.0
        st.num_batches_tracked = 0


def count_parameters(model: UNetPP | Block) -> int:
    if isinstance(model, Block):
        return model.count()
    return int(sum(t.data.size for t in model.parameters()))


def decays(name: str) -> bool:
    """Weight decay applies to conv/head weights only."""
    return name.endswith(".weight")
