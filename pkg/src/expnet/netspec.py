"""Network description, parameter initialization, forward pass, and pruning.

A network is an ordered run of conv blocks and max pools capped by one dense
classifier. Conv positions are numbered from 1 and named conv1, conv2, ...;
under the edge-layer rule the first and last conv stay unquantized, and only
quantized convs may carry an expansion. Parameters are initialized one rng
stream per parameter name, so a baseline network and an expanded network
built from the same seed share bit-identical LP parameters.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import ConvSpec, RunningStats, Tensor, dense, flatten, maxpool2d
from .bitops import LayerShape
from .blocks import (
    ExpandedConvLayer,
    ExpBlockConfig,
    LPConvLayer,
    expanded_forward,
    lp_block_forward,
)
from .quantizers import QuantConfig


@dataclass(frozen=True)
class ConvDef:
    """Geometry of one conv block; input channels are derived from the chain."""

    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class PoolDef:
    size: int


@dataclass(frozen=True)
class DenseLayer:
    layer_id: str
    weights: Tensor
    bias: Tensor


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus quantization and expansion annotations."""

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[ConvDef | PoolDef, ...]
    quant: QuantConfig = field(default_factory=QuantConfig)
    expanded: frozenset[int] = frozenset()
    block: ExpBlockConfig = field(default_factory=ExpBlockConfig)
    edge_unquantized: bool = True

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input shape must be (C, H, W) >= 1, got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if not any(isinstance(l, ConvDef) for l in self.layers):
            raise ValueError("network needs at least one conv layer")
        n_convs = self.conv_count
        quantized = self.quantized_positions
        for pos in sorted(self.expanded):
            if not 1 <= pos <= n_convs:
                raise ValueError(f"expansion names conv{pos}, but there are {n_convs} convs")
            if pos not in quantized:
                raise ValueError(
                    f"cannot expand conv{pos}: it is unquantized under the edge-layer rule"
                )
        self.shape_chain()  # raises on invalid geometry

    @property
    def conv_count(self) -> int:
        return sum(1 for l in self.layers if isinstance(l, ConvDef))

    @property
    def quantized_positions(self) -> frozenset[int]:
        """1-based conv positions that run quantized (the LP layers)."""
        n = self.conv_count
        if not self.edge_unquantized:
            return frozenset(range(1, n + 1))
        return frozenset(p for p in range(1, n + 1) if p not in (1, n))

    def expanded_ids(self) -> tuple[str, ...]:
        return tuple(f"conv{p}" for p in sorted(self.expanded))

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """(C, H, W) after each layer, including concat-widened channels."""
        c, h, w = self.input_shape
        chain = []
        pos = 0
        for layer in self.layers:
            if isinstance(layer, ConvDef):
                pos += 1
                spec = ConvSpec(layer.kernel, c, layer.out_channels, layer.stride, layer.padding)
                h, w = spec.out_size(h, w)
                c = layer.out_channels
                if pos in self.expanded and self.block.combine == "concat":
                    c += self.block.fp_channels(layer.out_channels)
            else:
                if h % layer.size or w % layer.size:
                    raise ValueError(
                        f"pool size {layer.size} does not tile the {h}x{w} map before it"
                    )
                h, w = h // layer.size, w // layer.size
            if h < 1 or w < 1:
                raise ValueError("spatial dimensions vanished inside the network")
            chain.append((c, h, w))
        return chain

    def capability_shapes(self) -> list[LayerShape]:
        """Conv geometries of the surviving LP topology (expansion ignored)."""
        base = dataclasses.replace(self, expanded=frozenset())
        chain = base.shape_chain()
        shapes = []
        c_in = self.input_shape[0]
        pos = 0
        for layer, (c, h, w) in zip(self.layers, chain):
            if isinstance(layer, ConvDef):
                pos += 1
                shapes.append(
                    LayerShape(
                        layer_id=f"conv{pos}",
                        kernel=layer.kernel,
                        in_channels=c_in,
                        out_channels=layer.out_channels,
                        out_h=h,
                        out_w=w,
                    )
                )
            c_in = c
        return shapes


def _param_rng(seed: int, name: str) -> np.random.Generator:
    """One stream per parameter name, independent of layer ordering."""
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class Network:
    """A parameterized instance of a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.blocks: list[tuple[str, object]] = []

        c, h, w = spec.input_shape
        pos = 0
        for layer in spec.layers:
            if isinstance(layer, PoolDef):
                self.blocks.append(("pool", layer.size))
                h, w = h // layer.size, w // layer.size
                continue
            pos += 1
            layer_id = f"conv{pos}"
            conv = ConvSpec(layer.kernel, c, layer.out_channels, layer.stride, layer.padding)
            h, w = conv.out_size(h, w)
            weights = Tensor(
                _param_rng(seed, f"{layer_id}.w").normal(
                    0.0, np.sqrt(2.0 / (c * layer.kernel**2)),
                    size=(layer.out_channels, c, layer.kernel, layer.kernel),
                )
            )
            gamma = Tensor(np.ones(layer.out_channels))
            beta = Tensor(np.zeros(layer.out_channels))
            stats = RunningStats.fresh(layer.out_channels)
            if pos in spec.expanded:
                fp_out = spec.block.fp_channels(layer.out_channels)
                fp_conv = ConvSpec(layer.kernel, c, fp_out, layer.stride, layer.padding)
                fp_weights = Tensor(
                    _param_rng(seed, f"{layer_id}.fp.w").normal(
                        0.0, np.sqrt(2.0 / (c * layer.kernel**2)),
                        size=(fp_out, c, layer.kernel, layer.kernel),
                    )
                )
                block = ExpandedConvLayer(
                    layer_id=layer_id,
                    conv=conv,
                    weights=weights,
                    gamma=gamma,
                    beta=beta,
                    stats=stats,
                    fp_conv=fp_conv,
                    fp_weights=fp_weights,
                    fp_gamma=Tensor(np.ones(fp_out)),
                    fp_beta=Tensor(np.zeros(fp_out)),
                    fp_stats=RunningStats.fresh(fp_out),
                    config=dataclasses.replace(spec.block, decay_binding=layer_id),
                )
                self.blocks.append(("exp", block))
                c = layer.out_channels + (fp_out if spec.block.combine == "concat" else 0)
            else:
                self.blocks.append(
                    (
                        "lp",
                        LPConvLayer(
                            layer_id=layer_id,
                            conv=conv,
                            weights=weights,
                            gamma=gamma,
                            beta=beta,
                            stats=stats,
                            quantize=pos in spec.quantized_positions,
                        ),
                    )
                )
                c = layer.out_channels

        feat = c * h * w
        dense_w = Tensor(
            _param_rng(seed, "dense.w").normal(
                0.0, np.sqrt(1.0 / feat), size=(feat, spec.num_classes)
            )
        )
        dense_b = Tensor(np.zeros(spec.num_classes))
        self.blocks.append(("dense", DenseLayer("dense", dense_w, dense_b)))

    # ------------------------------------------------------------- forward

    def forward(self, x: Tensor, factors: Mapping[str, float] | None = None,
                mode: str = "train") -> Tensor:
        """Logits for a batch; ``factors`` maps expanded layer ids to f."""
        factors = dict(factors or {})
        h = x
        for kind, layer in self.blocks:
            if kind == "pool":
                h = maxpool2d(h, layer)
            elif kind == "lp":
                h = lp_block_forward(layer, h, self.spec.quant, mode)
            elif kind == "exp":
                if layer.layer_id not in factors:
                    raise ValueError(f"no decay factor supplied for {layer.layer_id}")
                h = expanded_forward(layer, h, factors[layer.layer_id], self.spec.quant, mode)
            else:
                h = dense(flatten(h), layer.weights, layer.bias)
        return h

    # ---------------------------------------------------------- parameters

    def params(self) -> dict[str, Tensor]:
        """Trainable tensors, in stable layer order."""
        out: dict[str, Tensor] = {}
        for kind, layer in self.blocks:
            if kind in ("lp", "exp"):
                lid = layer.layer_id
                out[f"{lid}.w"] = layer.weights
                out[f"{lid}.bn.gamma"] = layer.gamma
                out[f"{lid}.bn.beta"] = layer.beta
                if kind == "exp":
                    out[f"{lid}.fp.w"] = layer.fp_weights
                    out[f"{lid}.fp.bn.gamma"] = layer.fp_gamma
                    out[f"{lid}.fp.bn.beta"] = layer.fp_beta
            elif kind == "dense":
                out["dense.w"] = layer.weights
                out["dense.b"] = layer.bias
        return out

    def tensor_table(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint must carry: parameters plus BN stats."""
        table = {name: t.data for name, t in self.params().items()}
        for kind, layer in self.blocks:
            if kind in ("lp", "exp"):
                lid = layer.layer_id
                table[f"{lid}.bn.running_mean"] = layer.stats.mean
                table[f"{lid}.bn.running_var"] = layer.stats.var
                if kind == "exp":
                    table[f"{lid}.fp.bn.running_mean"] = layer.fp_stats.mean
                    table[f"{lid}.fp.bn.running_var"] = layer.fp_stats.var
        return table

    def load_tensor_table(self, table: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameters and BN stats in place from a checkpoint table."""
        mine = self.tensor_table()
        missing = sorted(set(mine) - set(table))
        stray = sorted(set(table) - set(mine))
        if missing or stray:
            raise ValueError(f"tensor table mismatch: missing {missing}, unexpected {stray}")
        params = self.params()
        for name, arr in table.items():
            if mine[name].shape != arr.shape:
                raise ValueError(
                    f"tensor {name!r} has shape {arr.shape}, expected {mine[name].shape}"
                )
        for name, t in params.items():
            t.data = np.array(table[name], dtype=np.float64)
        for kind, layer in self.blocks:
            if kind in ("lp", "exp"):
                lid = layer.layer_id
                layer.stats.mean = np.array(table[f"{lid}.bn.running_mean"])
                layer.stats.var = np.array(table[f"{lid}.bn.running_var"])
                if kind == "exp":
                    layer.fp_stats.mean = np.array(table[f"{lid}.fp.bn.running_mean"])
                    layer.fp_stats.var = np.array(table[f"{lid}.fp.bn.running_var"])

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params().values())


def build_network(spec: NetworkSpec, seed: int) -> Network:
    return Network(spec, seed)


def prune_network(net: Network, factors: Mapping[str, float]) -> Network:
    """Drop every FP branch, recovering the plain LP topology.

    Requires every expanded layer's factor to be exactly zero; with f = 0 the
    FP contributions are exact zeros (add/sub) or all-zero channels (concat),
    so the pruned network's outputs match the expanded network's bit-for-bit
    up to concat consumers' summation-order rounding.
    """
    for lid in net.spec.expanded_ids():
        f = factors.get(lid)
        if f is None:
            raise ValueError(f"no factor supplied for expanded layer {lid}")
        if f != 0.0:
            raise ValueError(f"refusing to prune: decay factor is {f} on {lid}, not 0")

    pruned_spec = dataclasses.replace(net.spec, expanded=frozenset())
    pruned = Network(pruned_spec, seed=net.seed)

    # producer bookkeeping: how many leading input channels the consumer keeps
    keep_channels: int | None = None
    table: dict[str, np.ndarray] = {}
    for kind, layer in net.blocks:
        if kind == "pool":
            continue
        if kind == "dense":
            w = layer.weights.data
            if keep_channels is not None:
                # flatten order is channel-major, spatial dims unchanged by pruning
                spatial = _dense_spatial(pruned)
                c_total = w.shape[0] // spatial
                w = w.reshape(c_total, spatial, w.shape[1])[:keep_channels].reshape(
                    keep_channels * spatial, w.shape[1]
                )
            table["dense.w"] = w.copy()
            table["dense.b"] = layer.bias.data.copy()
            continue
        lid = layer.layer_id
        w = layer.weights.data
        if keep_channels is not None:
            w = w[:, :keep_channels]
        table[f"{lid}.w"] = w.copy()
        table[f"{lid}.bn.gamma"] = layer.gamma.data.copy()
        table[f"{lid}.bn.beta"] = layer.beta.data.copy()
        table[f"{lid}.bn.running_mean"] = layer.stats.mean.copy()
        table[f"{lid}.bn.running_var"] = layer.stats.var.copy()
        if kind == "exp" and layer.config.combine == "concat":
            keep_channels = layer.conv.out_channels
        else:
            keep_channels = None

    pruned.load_tensor_table(table)
    return pruned


def _dense_spatial(net: Network) -> int:
    """H * W of the feature map entering the dense layer."""
    chain = net.spec.shape_chain()
    c, h, w = chain[-1]
    return h * w
