"""Conv blocks: plain low-precision blocks and their expanded twins.

A plain block is Q_a(clip01(BN(Q_w(W) (*) input))). An expanded block runs a
second, never-quantized conv branch beside it, scaled by a decaying factor f,
and merges the two by add, subtract (LP minus FP), or channel concat:

  scheme 1 quantizes after combining, so one activation quantizer sees both
  branches; scheme 2 quantizes the LP branch first and combines afterwards,
  so the block output keeps full-precision content on the FP contribution.

At f = 0 both schemes collapse exactly onto the plain block, which is what
makes pruning the FP branches lossless.

Branch conventions: the FP branch has its own BatchNorm and uses relu (the
LP branch keeps clip01); under scheme 1 the combined tensor is passed
through clip01 before activation quantization, since add/sub/concat can
leave the quantizer's [0, 1] input domain and clip01 is the block's
range-restriction function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .autodiff import (
    ConvSpec,
    RunningStats,
    Tensor,
    activation,
    batch_norm,
    combine,
    conv2d,
    scale_const,
)
from .quantizers import QuantConfig, q_acts, q_weights

COMBINES = ("add", "sub", "concat")


@dataclass(frozen=True)
class ExpBlockConfig:
    """How one expanded layer merges its FP branch into the LP path."""

    scheme: int = 2
    combine: str = "add"
    fp_width_factor: Fraction = Fraction(1)
    decay_binding: str | None = None

    def __post_init__(self):
        if self.scheme not in (1, 2):
            raise ValueError(f"scheme must be 1 or 2, got {self.scheme}")
        if self.combine not in COMBINES:
            raise ValueError(f"unknown combine {self.combine!r}")
        factor = Fraction(self.fp_width_factor)
        object.__setattr__(self, "fp_width_factor", factor)
        if factor <= 0:
            raise ValueError(f"fp width factor must be positive, got {factor}")
        if self.combine in ("add", "sub") and factor != 1:
            raise ValueError(f"{self.combine} requires fp width factor 1, got {factor}")

    def fp_channels(self, lp_channels: int) -> int:
        """FP branch output channels; must come out a whole number."""
        value = self.fp_width_factor * lp_channels
        if value.denominator != 1:
            raise ValueError(
                f"fp width factor {self.fp_width_factor} times {lp_channels} "
                "channels is not an integer"
            )
        return int(value)


@dataclass
class LPConvLayer:
    """One low-precision conv block's parameters and geometry."""

    layer_id: str
    conv: ConvSpec
    weights: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    quantize: bool = True


@dataclass
class ExpandedConvLayer:
    """An LP block plus its full-precision helper branch.

    Both branches share kernel size, stride, padding, and input channels;
    output channels match except under concat, where the FP branch width is
    the configured multiple of the LP width.
    """

    layer_id: str
    conv: ConvSpec
    weights: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    fp_conv: ConvSpec
    fp_weights: Tensor
    fp_gamma: Tensor
    fp_beta: Tensor
    fp_stats: RunningStats
    config: ExpBlockConfig = field(default_factory=ExpBlockConfig)

    def __post_init__(self):
        c, f = self.conv, self.fp_conv
        if (c.kernel, c.stride, c.padding, c.in_channels) != (
            f.kernel,
            f.stride,
            f.padding,
            f.in_channels,
        ):
            raise ValueError(
                f"layer {self.layer_id!r}: FP branch must share kernel, stride, "
                "padding, and input channels with the LP branch"
            )
        if self.config.combine in ("add", "sub") and c.out_channels != f.out_channels:
            raise ValueError(
                f"layer {self.layer_id!r}: {self.config.combine} needs equal "
                f"branch widths, got {c.out_channels} and {f.out_channels}"
            )
        if f.out_channels != self.config.fp_channels(c.out_channels):
            raise ValueError(
                f"layer {self.layer_id!r}: FP branch width {f.out_channels} does "
                f"not match factor {self.config.fp_width_factor} x {c.out_channels}"
            )

    def lp_view(self) -> LPConvLayer:
        """The surviving LP block, sharing this layer's parameter tensors."""
        return LPConvLayer(
            layer_id=self.layer_id,
            conv=self.conv,
            weights=self.weights,
            gamma=self.gamma,
            beta=self.beta,
            stats=self.stats,
            quantize=True,
        )


def lp_block_forward(layer: LPConvLayer, a_prev: Tensor, qcfg: QuantConfig,
                     mode: str = "train") -> Tensor:
    """Plain block: conv with quantized weights, BN, clip01, quantized output.

    Layers flagged quantize=False (the first and last quantizable layers
    under the edge-layer rule) skip both quantizers but keep BN and clip01.
    """
    w = q_weights(layer.weights, qcfg) if layer.quantize else layer.weights
    z = conv2d(a_prev, w, layer.conv)
    h = batch_norm(z, layer.gamma, layer.beta, mode, layer.stats)
    a = activation(h, "clip01")
    return q_acts(a, qcfg) if layer.quantize else a


def _lp_branch(layer: ExpandedConvLayer, a_prev: Tensor, qcfg: QuantConfig,
               mode: str) -> Tensor:
    w1 = q_weights(layer.weights, qcfg)
    z1 = conv2d(a_prev, w1, layer.conv)
    return activation(batch_norm(z1, layer.gamma, layer.beta, mode, layer.stats), "clip01")


def _fp_branch(layer: ExpandedConvLayer, a_prev: Tensor, f: float, mode: str) -> Tensor:
    z2 = conv2d(a_prev, layer.fp_weights, layer.fp_conv)
    h = activation(
        batch_norm(z2, layer.fp_gamma, layer.fp_beta, mode, layer.fp_stats), "relu"
    )
    return scale_const(h, f)


def scheme1_forward(layer: ExpandedConvLayer, a_prev: Tensor, f: float,
                    qcfg: QuantConfig, mode: str = "train") -> Tensor:
    """Combine first, quantize after: Q_a(clip01(combine(LP, f * FP)))."""
    if layer.config.scheme != 1:
        raise ValueError(f"layer {layer.layer_id!r} is configured for scheme {layer.config.scheme}")
    merged = combine(
        _lp_branch(layer, a_prev, qcfg, mode),
        _fp_branch(layer, a_prev, f, mode),
        layer.config.combine,
    )
    return q_acts(activation(merged, "clip01"), qcfg)


def scheme2_forward(layer: ExpandedConvLayer, a_prev: Tensor, f: float,
                    qcfg: QuantConfig, mode: str = "train") -> Tensor:
    """Quantize the LP branch first, then combine; output is not re-quantized."""
    if layer.config.scheme != 2:
        raise ValueError(f"layer {layer.layer_id!r} is configured for scheme {layer.config.scheme}")
    a1 = q_acts(_lp_branch(layer, a_prev, qcfg, mode), qcfg)
    return combine(a1, _fp_branch(layer, a_prev, f, mode), layer.config.combine)


def expanded_forward(layer: ExpandedConvLayer, a_prev: Tensor, f: float,
                     qcfg: QuantConfig, mode: str = "train") -> Tensor:
    """Scheme dispatch for one expanded block."""
    if layer.config.scheme == 1:
        return scheme1_forward(layer, a_prev, f, qcfg, mode)
    return scheme2_forward(layer, a_prev, f, qcfg, mode)
