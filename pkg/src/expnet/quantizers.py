"""Weight and activation quantizers with straight-through gradients.

Each quantizer forward snaps values onto a small level set; its backward
passes the upstream gradient through unchanged (straight-through estimator).
The quantization step itself is recorded as a non-differentiable tape node
so gradient checks can detect and reject it; ``bypass`` mode skips the
quantizers entirely, leaving the smooth skeleton of the network.

Conventions shared by all families: sign(0) = +1, and rounding is half away
from zero, so results are platform-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

FAMILIES = ("dorefa", "xnor", "syq")


@dataclass(frozen=True)
class QuantConfig:
    """Which quantizer family runs on weights/activations and at what width."""

    family: str = "dorefa"
    weight_bits: int = 1
    act_bits: int = 1
    bypass: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown quantizer family {self.family!r}")
        if not (1 <= self.weight_bits <= 8 and 1 <= self.act_bits <= 8):
            raise ValueError("bit widths must lie in [1, 8]")
        if self.family == "xnor" and self.weight_bits != 1:
            raise ValueError("xnor weights are 1-bit by construction")
        if self.family == "syq" and self.weight_bits not in (1, 2):
            raise ValueError("syq supports 1-bit (sign) or 2-bit (ternary) weights")


def _ste(data: np.ndarray, parent: Tensor, op: str) -> Tensor:
    """Tape node whose backward is the identity, flagged non-differentiable."""
    return Tensor(data, (parent,), lambda g: (g,), _op=op, _nondiff=True)


def _affine(x: Tensor, scale: float, shift: float, op: str) -> Tensor:
    return Tensor(x.data * scale + shift, (x,), lambda g: (g * scale,), _op=op)


def _tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor(t, (x,), lambda g: (g * (1.0 - t * t),), _op="tanh")


def uniform_levels(k: int) -> np.ndarray:
    """The representable values of the k-bit [0, 1] quantizer."""
    n = 2**k - 1
    return np.arange(n + 1) / n


def quantize_uniform(x: Tensor, k: int) -> Tensor:
    """Snap values in [0, 1] onto the k-bit grid {i / (2^k - 1)}."""
    _check_bits(k)
    lo, hi = x.data.min(initial=0.0), x.data.max(initial=1.0)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"quantize_uniform input outside [0, 1]: range [{lo}, {hi}]")
    n = 2**k - 1
    out = np.floor(x.data * n + 0.5) / n
    return _ste(out, x, op=f"quantize_uniform[k={k}]")


def q_activations(a: Tensor, k: int) -> Tensor:
    """Uniform k-bit activation quantizer; expects clip01 output."""
    return quantize_uniform(a, k)


def q_weights_dorefa(w: Tensor, k: int) -> Tensor:
    """DoReFa-style weight quantizer.

    k = 1 maps to {+-mean|W|} by sign in a single straight-through node.
    k > 1 rescales tanh(W) into [0, 1], snaps it onto the uniform grid, and
    maps back to [-1, 1]; only the snap is straight-through, the tanh
    rescale chain carries its ordinary gradient. The normalizer
    max|tanh(W)| is treated as a constant of the forward pass.
    """
    _check_bits(k)
    _check_nonempty(w)
    if k == 1:
        scale = np.abs(w.data).mean()
        return _ste(np.where(w.data >= 0, scale, -scale), w, op="q_weights_dorefa[k=1]")
    t = _tanh(w)
    m = np.abs(t.data).max()
    if m == 0.0:
        return _ste(np.zeros_like(w.data), w, op=f"q_weights_dorefa[k={k}]")
    u = _affine(t, 1.0 / (2.0 * m), 0.5, op="dorefa_rescale")
    q = quantize_uniform(u, k)
    return _affine(q, 2.0, -1.0, op="dorefa_expand")


@dataclass(frozen=True)
class XnorWeights:
    """Binary codes with per-filter scales, plus the effective weight node."""

    weights: Tensor
    alpha: np.ndarray
    codes: np.ndarray


def q_weights_xnor(w: Tensor) -> XnorWeights:
    """Per-filter binarization: codes = sign(W), alpha_o = mean|W_o|."""
    _check_nonempty(w)
    if w.data.ndim != 4:
        raise ValueError("xnor quantizer expects OIHW weights")
    alpha = np.abs(w.data).mean(axis=(1, 2, 3))
    codes = np.where(w.data >= 0, 1.0, -1.0)
    eff = alpha.reshape(-1, 1, 1, 1) * codes
    return XnorWeights(_ste(eff, w, op="q_weights_xnor"), alpha, codes)


def q_weights_syq(w: Tensor, k: int) -> Tensor:
    """Row-wise subgroup quantizer: one scale per (filter, kernel row).

    k = 1 uses sign codes; k = 2 uses ternary codes with dead zone
    |w| <= 0.05 * max|W_o|. Scale s_{o,r} is the mean magnitude of the row.
    """
    if k not in (1, 2):
        raise ValueError(f"syq supports k in {{1, 2}}, got {k}")
    _check_nonempty(w)
    if w.data.ndim != 4:
        raise ValueError("syq quantizer expects OIHW weights")
    mag = np.abs(w.data)
    scales = mag.mean(axis=(1, 3))  # (out_channels, kernel_rows)
    if k == 1:
        codes = np.where(w.data >= 0, 1.0, -1.0)
    else:
        thresh = 0.05 * mag.max(axis=(1, 2, 3))
        codes = np.where(w.data >= 0, 1.0, -1.0) * (mag > thresh.reshape(-1, 1, 1, 1))
    out = scales[:, None, :, None] * codes
    return _ste(out, w, op=f"q_weights_syq[k={k}]")


def q_weights(w: Tensor, cfg: QuantConfig) -> Tensor:
    """Family dispatch for weight quantization; identity in bypass mode."""
    if cfg.bypass:
        return w
    if cfg.family == "dorefa":
        return q_weights_dorefa(w, cfg.weight_bits)
    if cfg.family == "xnor":
        return q_weights_xnor(w).weights
    return q_weights_syq(w, cfg.weight_bits)


def q_acts(a: Tensor, cfg: QuantConfig) -> Tensor:
    """Activation quantization under ``cfg``; identity in bypass mode."""
    if cfg.bypass:
        return a
    return q_activations(a, cfg.act_bits)


def _check_bits(k: int) -> None:
    if not 1 <= k <= 8:
        raise ValueError(f"bit width must lie in [1, 8], got {k}")


def _check_nonempty(w: Tensor) -> None:
    if w.data.size == 0:
        raise ValueError("cannot quantize an empty tensor")
