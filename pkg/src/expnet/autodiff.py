"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is tape-based: every operation returns a new Tensor that keeps
references to its parent tensors and a closure computing the vector-Jacobian
product into them. ``Tensor.backward()`` rebuilds the topological order from
the parent links (deterministically, parents in declaration order) and
accumulates gradients in one reverse sweep, so re-running backward on the
same graph adds exactly one more copy of each gradient.

Only the layer ops a small quantized CNN needs are provided; there is no
broadcasting, no operator overloading, and no GPU path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(ArithmeticError):
    """A tensor came out of an op containing NaN or Inf."""


class QuantizedGraphError(RuntimeError):
    """A gradient check ran over a graph with active quantizer nodes."""


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Tensors are immutable once produced by an op (the optimizer mutates
    parameter ``data`` between steps, never inside a step). ``grad`` is
    ``None`` until a backward pass deposits into it.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp", "_op", "_nondiff")

    def __init__(self, data, _parents=(), _vjp=None, _op="leaf", _nondiff=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by op '{_op}'")
        self.data = arr
        self.grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self._op = _op
        self._nondiff = _nondiff

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """Copy of this tensor cut off from the tape."""
        return Tensor(self.data.copy(), _op="detached")

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every tape node.

        ``seed`` defaults to ones and must match this tensor's shape; for a
        scalar loss no seed is needed. Each call computes the full gradient
        from scratch and adds it, so two calls accumulate exactly twice the
        single-pass gradient.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")

        order = _topo_order(self)
        flowing: dict[Tensor, np.ndarray] = {self: seed}
        for node in reversed(order):
            g = flowing.get(node)
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if parent in flowing:
                    flowing[parent] = flowing[parent] + pg
                else:
                    flowing[parent] = pg
        for node, g in flowing.items():
            node.grad = g if node.grad is None else node.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the tape reachable from root."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def tape_nodes(root: Tensor) -> list[Tensor]:
    """All tensors feeding into ``root``, in deterministic topological order."""
    return _topo_order(root)


@dataclass(frozen=True)
class ConvSpec:
    """Square-kernel 2D convolution geometry."""

    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.kernel, self.in_channels, self.out_channels, self.stride) < 1:
            raise ValueError("kernel, channel counts and stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        num_h = h + 2 * self.padding - self.kernel
        num_w = w + 2 * self.padding - self.kernel
        if num_h < 0 or num_w < 0 or num_h % self.stride or num_w % self.stride:
            raise ValueError(
                f"conv geometry {self} does not tile a {h}x{w} input to an integer output size"
            )
        return num_h // self.stride + 1, num_w // self.stride + 1


def _im2col(x: np.ndarray, d: int, stride: int, pad: int) -> np.ndarray:
    """Gather all d x d patches of NCHW ``x`` into a (C*d*d, N*Ho*Wo) matrix."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    windows = sliding_window_view(xp, (d, d), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, d, d) -> (C, d, d, N, Ho, Wo) -> (C*d*d, N*Ho*Wo)
    return np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(c * d * d, -1)


def _col2im(cols: np.ndarray, x_shape, d: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add column gradients back to the NCHW input layout."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - d) // stride + 1
    wo = (w + 2 * pad - d) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, d, d, n, ho, wo)
    # Fixed (i, j) slices never overlap themselves, so += is a plain store-add;
    # looping i then j pins the accumulation order.
    for i in range(d):
        for j in range(d):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols6[:, i, j].transpose(1, 0, 2, 3)
            )
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    """2D convolution of an NCHW input with OIHW weights (im2col + matmul)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    expect_w = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if weights.data.shape != expect_w:
        raise ValueError(f"weight shape {weights.shape} != {expect_w}")
    ho, wo = spec.out_size(h, w)

    cols = _im2col(x.data, spec.kernel, spec.stride, spec.padding)
    wmat = weights.data.reshape(spec.out_channels, -1)
    out = (wmat @ cols).reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)

    def vjp(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        gw = (gmat @ cols.T).reshape(weights.data.shape)
        gcols = wmat.T @ gmat
        gx = _col2im(gcols, x.data.shape, spec.kernel, spec.stride, spec.padding)
        return gx, gw

    return Tensor(out, (x, weights), vjp, _op="conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance owned by one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    stats: RunningStats,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel batch normalization over the batch and spatial axes.

    Train mode normalizes with the biased batch statistics and folds them
    into ``stats`` (``running = momentum * running + (1 - momentum) * batch``);
    infer mode normalizes with ``stats`` as-is.
    """
    if x.data.ndim != 4:
        raise ValueError("batch_norm expects an NCHW tensor")
    n, c, h, w = x.data.shape
    if n * h * w == 0:
        raise ValueError("batch_norm over an empty batch")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    axes = (0, 2, 3)
    gam = gamma.data.reshape(1, c, 1, 1)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        stats.mean = momentum * stats.mean + (1.0 - momentum) * mu
        stats.var = momentum * stats.var + (1.0 - momentum) * var
        m = n * h * w

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gxhat = g * gam
            gx = (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / m
            ) * inv.reshape(1, c, 1, 1)
            return gx, dgamma, dbeta

    else:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

        def vjp(g):
            dgamma = (g * xhat).sum(axes)
            dbeta = g.sum(axes)
            gx = g * gam * inv.reshape(1, c, 1, 1)
            return gx, dgamma, dbeta

    out = gam * xhat + beta.data.reshape(1, c, 1, 1)
    return Tensor(out, (x, gamma, beta), vjp, _op=f"batch_norm[{mode}]")


def activation(x: Tensor, kind: str) -> Tensor:
    """Pointwise nonlinearity with pass-through gradient on the active region.

    ``clip01`` clamps to [0, 1] and passes gradient wherever 0 <= x <= 1
    (both endpoints inclusive); ``relu`` clamps below 0 and passes gradient
    where x > 0.
    """
    if kind == "clip01":
        out = np.clip(x.data, 0.0, 1.0)
        mask = (x.data >= 0.0) & (x.data <= 1.0)
    elif kind == "relu":
        out = np.maximum(x.data, 0.0)
        mask = x.data > 0.0
    else:
        raise ValueError(f"unknown activation {kind!r}")

    def vjp(g):
        return (g * mask,)

    return Tensor(out, (x,), vjp, _op=f"activation[{kind}]")


def combine(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Merge two branch outputs: elementwise add/sub or channel concat.

    ``sub`` computes a - b. ``concat`` stacks a's channels first, then b's,
    and requires the non-channel dims to match.
    """
    if op in ("add", "sub"):
        if a.data.shape != b.data.shape:
            raise ValueError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")
        if op == "add":
            out = a.data + b.data
            vjp = lambda g: (g, g)
        else:
            out = a.data - b.data
            vjp = lambda g: (g, -g)
    elif op == "concat":
        if a.data.ndim != 4 or b.data.ndim != 4:
            raise ValueError("concat expects NCHW tensors")
        if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
            raise ValueError(
                f"concat needs matching non-channel dims, got {a.shape} and {b.shape}"
            )
        ca = a.data.shape[1]
        out = np.concatenate([a.data, b.data], axis=1)
        vjp = lambda g: (g[:, :ca], g[:, ca:])
    else:
        raise ValueError(f"unknown combine op {op!r}")

    return Tensor(out, (a, b), vjp, _op=f"combine[{op}]")


def scale_const(x: Tensor, f: float) -> Tensor:
    """Scale by a constant factor in [0, 1]; the factor is not a parameter."""
    f = float(f)
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"scale factor must lie in [0, 1], got {f}")

    def vjp(g):
        return (g * f,)

    return Tensor(x.data * f, (x,), vjp, _op=f"scale_const[{f}]")


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch dims, row-major."""
    n = x.data.shape[0]
    shape = x.data.shape

    def vjp(g):
        return (g.reshape(shape),)

    return Tensor(x.data.reshape(n, -1), (x,), vjp, _op="flatten")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, D) @ (D, K) + (K,)."""
    if x.data.ndim != 2:
        raise ValueError("dense input must be 2D (batch, features)")
    n, d = x.data.shape
    if weights.data.ndim != 2 or weights.data.shape[0] != d:
        raise ValueError(f"weight shape {weights.shape} incompatible with input {x.shape}")
    k = weights.data.shape[1]
    if bias.data.shape != (k,):
        raise ValueError(f"bias must have shape ({k},)")

    def vjp(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor(x.data @ weights.data + bias.data, (x, weights, bias), vjp, _op="dense")


def maxpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first max per window."""
    if x.data.ndim != 4:
        raise ValueError("maxpool2d expects an NCHW tensor")
    n, c, h, w = x.data.shape
    if size < 1 or h % size or w % size:
        raise ValueError(f"pool size {size} does not tile a {h}x{w} input")
    ho, wo = h // size, w // size
    windows = (
        x.data.reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(x.data.shape)
        return (gx,)

    return Tensor(out, (x,), vjp, _op="maxpool2d")


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch of class-index labels (scalar output)."""
    if logits.data.ndim != 2:
        raise ValueError("logits must be 2D (batch, classes)")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label index out of range for {k} classes")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (float(g) / n), None)

    # labels ride along as a constant parent so the vjp tuple lines up
    return Tensor(loss, (logits, Tensor(labels.astype(np.float64), _op="labels")), vjp, _op="softmax_xent")


@dataclass
class GradCheckReport:
    """Outcome of comparing backward gradients against central differences."""

    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Check backward gradients of a scalar loss against central differences.

    ``loss_fn`` must rebuild the forward tape on every call (it is invoked
    2 * size times per parameter). Graphs containing active quantizer nodes
    are rejected; switch the quantizers to bypass mode first.
    """
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    for node in _topo_order(loss):
        if node._nondiff:
            raise QuantizedGraphError(
                f"graph contains quantizer node '{node._op}' in quantize mode; "
                "gradient checking requires quantizers in bypass mode"
            )

    for p in params.values():
        p.grad = None
    loss.backward()

    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = 0.0
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn().item()
            flat[i] = keep - h
            down = loss_fn().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, float(abs(aflat[i] - numeric) / denom))
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=per_param, tolerance=tolerance)
