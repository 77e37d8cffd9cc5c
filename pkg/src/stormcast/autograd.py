"""Double-precision tensors with reverse-mode differentiation.

Only the handful of layers the segmentation network needs are provided:
zero-padded convolution, 2x2 max pooling, bilinear 2x upsampling, batch
normalization, relu/sigmoid, channel concatenation, plus the elementwise
glue (add, mul, sum, mean) that losses and tests are built from.

Every op takes and returns :class:`Tensor`.  When any input requires a
gradient the output keeps a reference to its parents and a closure that
maps the output gradient to parent gradients; :func:`backward` replays those
closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap an op result, recording it only if some parent needs a gradient."""
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Public hook for ops defined outside this module (e.g. fused losses).

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    return _make(np.asarray(data, dtype=DTYPE), tuple(parents), backward_fn, op)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# elementwise glue


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def pointwise(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def _expit(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# layers


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {x.shape} incompatible with {ref}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([x.shape[1] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=1))

    return _make(np.concatenate([x.data for x in xs], axis=1), tuple(xs), bw, "concat")


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    """[B,M,H+kh-1,W+kw-1] -> [M*kh*kw, B*H*W] (row order m, di, dj)."""
    b, m = xp.shape[:2]
    col = np.empty((m, kh, kw, b, h, w), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xt[:, :, i:i + h, j:j + w]
    return col.reshape(m * kh * kw, b * h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding ``pad`` on every side."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    b, m, h, w = x.shape
    n, mw, kh, kw = weight.shape
    if mw != m:
        raise ShapeError(f"conv2d: input has {m} channels, weight expects {mw}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: unsupported kernel {kh}x{kw}")
    if pad is None:
        pad = (kh - 1) // 2
    if 2 * pad != kh - 1 or kh != kw:
        raise ShapeError("conv2d: padding must preserve spatial dims")
    if bias is not None and bias.shape != (n,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({n},)")

    w2 = weight.data.reshape(n, m * kh * kw)
    if kh == 1:
        col = x.data.transpose(1, 0, 2, 3).reshape(m, b * h * w)
        xp = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        col = _im2col(xp, kh, kw, h, w)
    out = w2 @ col
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, b, h, w).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    del col

    parents = (x, weight) if bias is None else (x, weight, bias)
    xd = x.data

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(n, b * h * w)
        if kh == 1:
            c = xd.transpose(1, 0, 2, 3).reshape(m, b * h * w)
        else:
            c = _im2col(xp, kh, kw, h, w)
        gw = (g2 @ c.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (w2.T @ g2).reshape(m, kh, kw, b, h, w)
            if kh == 1:
                gx = gc[:, 0, 0].transpose(1, 0, 2, 3)
            else:
                gxp = np.zeros((m, b, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + h, j:j + w] += gc[:, i, j]
                gx = gxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _make(out, parents, bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects rank 4, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = idx[..., None] == np.arange(4)
        gb = onehot * g[..., None]
        return (gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _make(out, (x,), bw, "maxpool2")


def _upsample_matrix(n: int) -> np.ndarray:
    """[2n, n] linear interpolation with half-pixel centers and edge clamping."""
    a = np.zeros((2 * n, n), dtype=DTYPE)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    return a


def upsample_bilinear2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear2 expects rank 4, got {x.shape}")
    ah = _upsample_matrix(x.shape[2])
    aw = _upsample_matrix(x.shape[3])
    out = ah @ x.data @ aw.T
    return _make(out, (x,), lambda g: (ah.T @ g @ aw,), "upsample")


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    gamma: Tensor = field(init=False)
    beta: Tensor = field(init=False)
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)
    num_batches_tracked: int = 0

    def __post_init__(self):
        self.gamma = Tensor(np.ones(self.channels), requires_grad=True)
        self.beta = Tensor(np.zeros(self.channels), requires_grad=True)
        self.running_mean = np.zeros(self.channels, dtype=DTYPE)
        self.running_var = np.ones(self.channels, dtype=DTYPE)


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over (B, H, W).

    Training mode uses batch statistics and updates the running averages
    (unbiased variance, as torch does); inference mode uses the running
    averages and refuses to run before any update.
    """
    if x.data.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm2d: input {x.shape} vs {state.channels} channels")
    b, c, h, w = x.shape
    n = b * h * w
    gamma, beta = state.gamma, state.beta
    g4 = gamma.data.reshape(1, c, 1, 1)

    if training:
        if n < 2:
            raise ShapeError("batchnorm2d training needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv_std.reshape(1, c, 1, 1)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
        state.num_batches_tracked += 1

        def bw(g):
            gxhat = g * g4
            s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv_std.reshape(1, c, 1, 1) / n) * (n * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        if state.num_batches_tracked == 0:
            raise RuntimeError("batchnorm2d: running statistics are uninitialized")
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def bw(g):
            gx = g * (g4 * inv_std.reshape(1, c, 1, 1))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)
    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
              seed: int = 0, indices: dict[int, np.ndarray] | None = None,
              scale_floor: float = 1e-3, skip_kinks: bool = False,
              report: dict | None = None) -> list[float]:
    """Compare backward against central differences for every input.

    The scalar under test is ``sum(fn(*inputs) * R)`` with a fixed random
    projection ``R``, so every output element contributes.  ``indices`` may
    restrict the check to a subset of flat positions per input (by position
    in ``inputs``).  Returns the max relative error per input.

    An input whose gradient is structurally tiny (a conv bias feeding a
    batch norm, say) would otherwise be judged on pure round-off, so each
    input's error is taken relative to at least ``scale_floor`` times the
    largest gradient seen across all inputs.

    With ``skip_kinks``, elements whose forward and backward one-sided
    differences disagree are re-measured with a step 100x smaller.  If the
    disagreement persists the element sits on a non-differentiable point
    (relu at 0, pooling tie) and is dropped.  ``report`` receives the counts
    under "refined" and "kinks".
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    backward(tensor_sum(mul(out, Tensor(proj))))
    f0 = scalar()

    def central(flat: np.ndarray, i: int, h: float) -> tuple[float, float]:
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar()
        flat[i] = orig - h
        fm = scalar()
        flat[i] = orig
        return (fp - fm) / (2 * h), abs((fp - f0) - (f0 - fm)) / h

    measured = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        pos = np.arange(flat.size) if indices is None or k not in indices else np.asarray(indices[k])
        est = np.array([central(flat, i, eps) for i in pos]).reshape(-1, 2)
        analytic = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
        measured.append((flat, pos, analytic[pos], est[:, 0].copy(), est[:, 1]))
    scale = max((float(np.abs(np.r_[a, n]).max()) for _, _, a, n, _ in measured if a.size), default=0.0)
    floor = max(1e-6, scale_floor * scale)

    refined = kinks = 0
    errors = []
    for flat, pos, a, n, gap in measured:
        keep = np.ones(len(pos), dtype=bool)
        if skip_kinks:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            for q in np.flatnonzero(gap > 1e-4 * denom):
                n2, gap2 = central(flat, pos[q], eps / 100)
                if gap2 > 1e-3 * max(abs(a[q]), abs(n2), floor):
                    keep[q] = False
                    kinks += 1
                else:
                    n[q] = n2
                    refined += 1
        errors.append(relative_error(a[keep], n[keep], floor=floor))
    if report is not None:
        report.update(refined=refined, kinks=kinks)
    return errors
