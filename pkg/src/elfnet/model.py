"""Multi-exit backbone: conv segments with an auxiliary classifier per segment.

Each segment is two 3x3 convs + relu (the first conv of every segment after
the first downsamples with stride 2). Exit head k is two 3x3 convs at the
segment's output width, relu, global average pooling, and a dense layer to
the class count; the last head doubles as the network's main classifier.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, FormatError
from .io import read_tensor, write_tensor
from .layers import Conv2d, Dense, GlobalAvgPool, Layer, LayerParams, ReLU

CHECKPOINT_MAGIC = b"ELFC"
CHECKPOINT_VERSION = 1

DEFAULT_WIDTHS = (16, 32, 64)


@dataclass(frozen=True)
class FlopsTable:
    """Per-exit costs; cumulative cost of exit k = segments 1..k + head k."""

    segment_flops: np.ndarray
    head_flops: np.ndarray
    cumulative_exit_flops: np.ndarray

    @property
    def baseline_flops(self) -> int:
        """Cost of routing everything to the last exit, no auxiliary heads."""
        return int(self.cumulative_exit_flops[-1])


def _he_conv(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k * k))
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
    return w, np.zeros(c_out, dtype=dtype)


def _he_dense(rng, m, n, dtype):
    std = np.sqrt(2.0 / m)
    return rng.normal(0.0, std, size=(m, n)).astype(dtype), np.zeros(n, dtype=dtype)


class MultiExitNetwork:
    """K backbone segments, each followed by an auxiliary exit head."""

    def __init__(self, segments, heads, num_classes, input_dims, widths, seed):
        if len(segments) != len(heads):
            raise ConfigurationError(
                f"{len(segments)} segments but {len(heads)} heads"
            )
        self.segments: list[list[Layer]] = segments
        self.heads: list[list[Layer]] = heads
        self.num_classes = num_classes
        self.input_dims = tuple(input_dims)
        self.widths = tuple(widths)
        self.seed = seed

    @property
    def num_exits(self) -> int:
        return len(self.segments)

    def parameters(self) -> list[LayerParams]:
        out = []
        for block in [*self.segments, *self.heads]:
            out.extend(layer.params for layer in block if layer.params is not None)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def run_segment(self, k: int, x: np.ndarray) -> np.ndarray:
        for layer in self.segments[k]:
            x = layer.forward(x)
        return x

    def run_head(self, k: int, x: np.ndarray) -> np.ndarray:
        for layer in self.heads[k]:
            x = layer.forward(x)
        return x

    def forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        """Logits at every exit; shared backbone activations computed once."""
        logits = []
        for k in range(self.num_exits):
            x = self.run_segment(k, x)
            logits.append(self.run_head(k, x))
        return logits

    def backward_all(self, head_grads: list[np.ndarray]) -> None:
        """Backprop per-head logit gradients through heads and backbone.

        head_grads[k] may be None (or all-zero) when exit k contributed no
        loss; segment gradients accumulate the sum over downstream paths.
        """
        upstream = None
        for k in reversed(range(self.num_exits)):
            g = head_grads[k]
            if g is not None:
                for layer in reversed(self.heads[k]):
                    g = layer.backward(g)
                upstream = g if upstream is None else upstream + g
            if upstream is not None:
                for layer in reversed(self.segments[k]):
                    upstream = layer.backward(upstream)

    def flops_table(self) -> FlopsTable:
        seg_costs, head_costs = [], []
        shape = self.input_dims
        for k in range(self.num_exits):
            cost = 0
            for layer in self.segments[k]:
                cost += layer.flops(shape)
                shape = layer.output_shape(shape)
            seg_costs.append(cost)
            hshape, hcost = shape, 0
            for layer in self.heads[k]:
                hcost += layer.flops(hshape)
                hshape = layer.output_shape(hshape)
            head_costs.append(hcost)
        seg = np.asarray(seg_costs, dtype=np.int64)
        head = np.asarray(head_costs, dtype=np.int64)
        return FlopsTable(seg, head, np.cumsum(seg) + head)


def _make_segment(rng, c_in, width, downsample, dtype):
    w1, b1 = _he_conv(rng, width, c_in, 3, dtype)
    w2, b2 = _he_conv(rng, width, width, 3, dtype)
    return [
        Conv2d(w1, b1, stride=2 if downsample else 1, pad=1),
        ReLU(),
        Conv2d(w2, b2, stride=1, pad=1),
        ReLU(),
    ]


def _make_head(rng, width, num_classes, dtype):
    w1, b1 = _he_conv(rng, width, width, 3, dtype)
    w2, b2 = _he_conv(rng, width, width, 3, dtype)
    wd, bd = _he_dense(rng, width, num_classes, dtype)
    return [
        Conv2d(w1, b1, stride=1, pad=1),
        ReLU(),
        Conv2d(w2, b2, stride=1, pad=1),
        ReLU(),
        GlobalAvgPool(),
        Dense(wd, bd),
    ]


def build_network(
    num_classes: int,
    input_dims: tuple[int, int, int],
    num_exits: int = 3,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    seed: int = 0,
    dtype=np.float64,
) -> MultiExitNetwork:
    """Deterministic He-initialized multi-exit CNN.

    Head k's conv width equals segment k's output channel count. Segments
    after the first halve the spatial size, so the input must survive
    num_exits - 1 stride-2 steps.
    """
    if num_exits < 1:
        raise ConfigurationError(f"need at least one exit, got {num_exits}")
    if len(widths) != num_exits:
        raise ConfigurationError(
            f"widths {widths} must have one entry per exit (K={num_exits})"
        )
    c_in, h, w = input_dims
    rng = np.random.default_rng(seed)
    segments, heads = [], []
    prev = c_in
    for k, width in enumerate(widths):
        segments.append(_make_segment(rng, prev, width, downsample=k > 0, dtype=dtype))
        heads.append(_make_head(rng, width, num_classes, dtype))
        prev = width
    net = MultiExitNetwork(segments, heads, num_classes, input_dims, widths, seed)
    # walk the shape chain now so a bad stride plan fails at build time
    shape = net.input_dims
    for k in range(net.num_exits):
        for layer in net.segments[k]:
            shape = layer.output_shape(shape)
        hshape = shape
        for layer in net.heads[k]:
            hshape = layer.output_shape(hshape)
    return net


def save_checkpoint(net: MultiExitNetwork, path: str | Path) -> None:
    """ELFC format: magic, version, architecture descriptor, ELFT tensors."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(
            struct.pack(
                "<8I",
                CHECKPOINT_VERSION,
                net.num_classes,
                *net.input_dims,
                net.num_exits,
                net.seed & 0xFFFFFFFF,
                len(net.widths),
            )
        )
        f.write(struct.pack(f"<{len(net.widths)}I", *net.widths))
        for p in net.parameters():
            write_tensor(f, p.weights)
            write_tensor(f, p.bias)


def load_checkpoint(path: str | Path, dtype=np.float64) -> MultiExitNetwork:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        header = f.read(32)
        if len(header) != 32:
            raise FormatError("truncated checkpoint header", offset=4 + len(header))
        version, num_classes, c, h, w, k_exits, seed, n_widths = struct.unpack(
            "<8I", header
        )
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        wbuf = f.read(4 * n_widths)
        if len(wbuf) != 4 * n_widths:
            raise FormatError("truncated width table", offset=36 + len(wbuf))
        widths = struct.unpack(f"<{n_widths}I", wbuf)
        net = build_network(num_classes, (c, h, w), k_exits, widths, seed, dtype=dtype)
        for p in net.parameters():
            for name, target in (("weights", p.weights), ("bias", p.bias)):
                loaded = read_tensor(f).astype(dtype)
                if loaded.shape != target.shape:
                    raise FormatError(
                        f"checkpoint tensor shape {loaded.shape} does not match "
                        f"architecture tensor '{name}' {target.shape}"
                    )
                target[...] = loaded
    return net
