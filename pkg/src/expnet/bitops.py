"""Packed sign-bit arithmetic and representational-capability counting.

Sign vectors over {-1, +1} are packed into a single arbitrary-precision
integer (+1 is bit 1, -1 is bit 0), so an xnor-and-popcount dot product is
three word-level operations regardless of length. The capability side counts
how many distinct values a quantized convolution output can take (D) and the
log-domain representational capability of a whole feature map (log2 R).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ConvSpec


class BitPlane:
    """Length-n sign vector packed little-endian into one big integer.

    Bit i holds element i: set for +1, clear for -1. Bits at positions >= n
    are always zero, which the xnor mask relies on.
    """

    __slots__ = ("n", "bits", "mask")

    def __init__(self, n: int, bits: int):
        if n < 1:
            raise ValueError(f"length must be >= 1, got {n}")
        self.mask = (1 << n) - 1
        if bits & ~self.mask:
            raise ValueError("set bits beyond the logical length")
        self.n = n
        self.bits = bits

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"BitPlane(n={self.n}, bits={self.bits:#x})"


def pack(values) -> BitPlane:
    """Pack a flat {-1, +1} vector into a BitPlane."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("cannot pack an empty vector")
    if not np.all(np.abs(arr) == 1.0):
        raise ValueError("pack expects values in {-1, +1}")
    packed = np.packbits(arr > 0, bitorder="little")
    return BitPlane(arr.size, int.from_bytes(packed.tobytes(), "little"))


def unpack(plane: BitPlane) -> np.ndarray:
    """Inverse of pack: BitPlane back to a float64 {-1, +1} vector."""
    nbytes = (plane.n + 7) // 8
    raw = np.frombuffer(plane.bits.to_bytes(nbytes, "little"), dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[: plane.n]
    return np.where(bits == 1, 1.0, -1.0)


def xnor_dot(x: BitPlane, y: BitPlane) -> int:
    """Integer dot product of two packed sign vectors.

    Agreeing positions contribute +1 and disagreeing ones -1, so with
    c = popcount(xnor(x, y)) the dot is c - (n - c) = 2c - n. The mask
    keeps the pad bits above n out of the count.
    """
    if x.n != y.n:
        raise ValueError(f"length mismatch: {x.n} vs {y.n}")
    return 2 * (x.bits ^ y.bits ^ x.mask).bit_count() - x.n


def binary_conv2d(
    input_signs: np.ndarray,
    weight_signs: np.ndarray,
    alpha: np.ndarray,
    spec: ConvSpec,
) -> np.ndarray:
    """Convolution of sign-valued tensors via xnor/popcount, scaled per filter.

    Accumulation is pure integer; each output element is alpha_o times an
    exact integer dot, so it equals the float convolution of the sign data
    scaled per-filter by alpha, with zero error. Zero padding never enters
    the popcount: padded positions are masked out of both count terms.
    """
    x = np.asarray(input_signs, dtype=np.float64)
    w = np.asarray(weight_signs, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("binary_conv2d expects NCHW input and OIHW weights")
    if not np.all(np.abs(x) == 1.0) or not np.all(np.abs(w) == 1.0):
        raise ValueError("binary_conv2d operands must be sign tensors over {-1, +1}")
    n, c, h, wd = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    expect_w = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if w.shape != expect_w:
        raise ValueError(f"weight shape {w.shape} != {expect_w}")
    if alpha.shape != (spec.out_channels,):
        raise ValueError(f"alpha must have shape ({spec.out_channels},)")
    ho, wo = spec.out_size(h, wd)
    d, stride, pad = spec.kernel, spec.stride, spec.padding

    filters = [pack(w[o].reshape(-1)) for o in range(spec.out_channels)]
    length = c * d * d
    full = (1 << length) - 1

    # 0 marks padding; bit planes are built from the surviving sign entries
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x

    out = np.zeros((n, spec.out_channels, ho, wo))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = xp[b, :, i * stride : i * stride + d, j * stride : j * stride + d]
                flat = patch.reshape(-1)
                pbits = int.from_bytes(
                    np.packbits(flat > 0, bitorder="little").tobytes(), "little"
                )
                vbits = int.from_bytes(
                    np.packbits(flat != 0, bitorder="little").tobytes(), "little"
                )
                valid_n = vbits.bit_count()
                for o, fplane in enumerate(filters):
                    agree = ((pbits ^ fplane.bits ^ full) & vbits).bit_count()
                    out[b, o, i, j] = alpha[o] * (2 * agree - valid_n)
    return out


def distinct_count(d: int, m: int, k: int = 1) -> int:
    """Distinct pre-normalization conv outputs for a d x d x m receptive field.

    For 1-bit signs the dot of two length-L sign vectors ranges over
    {-L, -L+2, ..., L}, hence d*d*m + 1 values. Wider bit widths have no
    closed form here and are routed to exhaustive enumeration.
    """
    _check_geometry(d, m)
    if k != 1:
        return distinct_count_enum(d, m, k)
    return d * d * m + 1


def distinct_count_enum(d: int, m: int, k: int) -> int:
    """Count distinct dot products by exhausting the level sets.

    Positions are independent, so the set of achievable dots is the L-fold
    sumset of the single-position product set; the walk below grows it one
    position at a time in exact rational arithmetic. k = 1 pairs sign
    levels with sign levels (the two-valued analysis); k >= 2 pairs the
    2^k symmetric weight levels with the 2^k unit-interval activation
    levels.
    """
    _check_geometry(d, m)
    if not 1 <= k <= 8:
        raise ValueError(f"bit width must lie in [1, 8], got {k}")
    length = d * d * m
    if (2**k) ** length > 2**20:
        raise ValueError(
            f"enumeration over ({2**k}^{length})^2 combinations exceeds the 2^20 guard"
        )
    n = 2**k - 1
    if k == 1:
        w_levels = [Fraction(-1), Fraction(1)]
        a_levels = w_levels
    else:
        w_levels = [Fraction(2 * i - n, n) for i in range(n + 1)]
        a_levels = [Fraction(i, n) for i in range(n + 1)]
    per_position = {w * a for w in w_levels for a in a_levels}
    sums = {Fraction(0)}
    for _ in range(length):
        sums = {s + p for s in sums for p in per_position}
    return len(sums)


def _check_geometry(d: int, m: int) -> None:
    if d < 1 or m < 1:
        raise ValueError(f"kernel size and channel count must be >= 1, got d={d}, m={m}")


@dataclass(frozen=True)
class LayerShape:
    """Concrete geometry of one conv layer's weights and output map."""

    layer_id: str
    kernel: int
    in_channels: int
    out_channels: int
    out_h: int
    out_w: int


@dataclass(frozen=True)
class CapabilityRow:
    layer_id: str
    d_value: int
    size: int
    log2_r: float


@dataclass(frozen=True)
class CapabilityReport:
    """Per-layer distinct-output counts and log2 representational capability."""

    rows: tuple[CapabilityRow, ...]

    def as_csv(self) -> str:
        lines = ["layer,D,size,log2_R"]
        for r in self.rows:
            lines.append(f"{r.layer_id},{r.d_value},{r.size},{r.log2_r:.9f}")
        return "\n".join(lines) + "\n"


def capability_report(shapes: Iterable[LayerShape] | Sequence[LayerShape]) -> CapabilityReport:
    """1-bit capability of each conv layer: D and log2 R = size * log2 D.

    R itself (D raised to the feature-map size) overflows any fixed-width
    integer for realistic nets, so only its log is reported.
    """
    rows = []
    for s in shapes:
        d_value = distinct_count(s.kernel, s.in_channels, k=1)
        size = s.out_h * s.out_w * s.out_channels
        if size < 1:
            raise ValueError(f"layer {s.layer_id!r} has an empty output map")
        rows.append(
            CapabilityRow(
                layer_id=s.layer_id,
                d_value=d_value,
                size=size,
                log2_r=size * math.log2(d_value),
            )
        )
    return CapabilityReport(tuple(rows))


