"""Dense float64 arrays with reverse-mode differentiation.

Only the handful of operations the segmentation network needs are provided.
Every op takes and returns :class:`Tensor`; when any input requires a
gradient the output records its parents and a closure that maps the output
adjoint to input adjoints.  :func:`backward` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, pseudo-label generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap a forward result, recording the graph edge when gradients are live.

    ``backward_fn`` receives the adjoint of the output and returns one adjoint
    (or ``None``) per parent, in parent order.
    """
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from a root, ordered so inputs precede consumers."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Graph:
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
            for p in reversed(node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def index(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    graph = graph or Graph.from_root(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = pg if key not in adjoints else adjoints[key] + pg
    return graph


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_op(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return make_op(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def elementwise(x: Tensor, kind: str, axis: int = 1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("log_softmax", "log_softmax_channelwise"):
        return log_softmax(x, axis=axis)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def global_average_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    return make_op(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),),
        "gap",
    )


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """Padded NCHW -> (C, k, k, N, oh, ow) patch array."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, oh, ow), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            cols[:, i, j] = xt[:, :, hi : hi + stride * (oh - 1) + 1 : stride, wj : wj + stride * (ow - 1) + 1 : stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns padded NCHW."""
    n, c, hp, wp = padded_shape
    oh, ow = cols.shape[-2:]
    out = np.zeros((c, n, hp, wp), dtype=DTYPE)
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            out[:, :, hi : hi + stride * (oh - 1) + 1 : stride, wj : wj + stride * (ow - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _check_conv(x: Tensor, w: Tensor, bias: Tensor | None, cin_axis: int, name: str):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be NCHW, got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{name}: kernel must be square 4-d, got {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"{name}: input channels {x.shape[1]} != kernel dim {cin_axis} ({w.shape[cin_axis]})")
    out_c = w.shape[1 - cin_axis]
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"{name}: bias shape {bias.shape} != ({out_c},)")


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of NCHW input with an OIKK kernel."""
    _check_conv(x, w, bias, 1, "conv2d")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh = conv_out_size(h, k, stride, padding, dilation)
    ow = conv_out_size(wd, k, stride, padding, dilation)
    if oh < 1:
        raise ShapeError(f"conv2d: height {h} too small for kernel {k} dilation {dilation} padding {padding}")
    if ow < 1:
        raise ShapeError(f"conv2d: width {wd} too small for kernel {k} dilation {dilation} padding {padding}")
    if stride == 1:
        return _conv2d_unit_stride(x, w, bias, padding, dilation, oh, ow)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, dilation, oh, ow).reshape(c * k * k, n * oh * ow)
    wmat = w.data.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    padded_shape = xp.shape

    def bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(c, k, k, n, oh, ow)
            gx = _col2im(gcols, padded_shape, k, stride, dilation)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + wd]
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_op(out, parents, bw, "conv2d")


def _windows(flat: np.ndarray, offsets: Sequence[int], length: int) -> np.ndarray:
    """(C, T, length) stack of the windows of ``flat`` (C, M) starting at each offset."""
    cols = np.empty((flat.shape[0], len(offsets), length), dtype=DTYPE)
    for t, off in enumerate(offsets):
        cols[:, t] = flat[:, off : off + length]
    return cols


def _conv2d_unit_stride(x: Tensor, w: Tensor, bias: Tensor | None, padding: int, dilation: int, oh: int, ow: int) -> Tensor:
    """Stride-1 conv2d on the flattened padded grid.

    Every image is laid out row-major on its padded (hp, wp) grid and the
    images are concatenated, so a kernel tap is a constant shift of the flat
    index and its input is a strided window of one (C, M) array.  Outputs are
    computed at every grid point and cropped.  With no more output than input
    channels the taps are accumulated one matmul at a time and the input
    gradient is the correlation of the zero-filled output gradient with the
    flipped kernel; otherwise the taps are stacked into columns and the input
    gradient is scattered back from them.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    taps = k * k
    hp, wp = h + 2 * padding, wd + 2 * padding
    size = n * hp * wp
    span = (k - 1) * dilation * (wp + 1)
    offsets = [dilation * (i * wp + j) for i in range(k) for j in range(k)]
    flat = np.zeros((c, size + span), dtype=DTYPE)
    flat[:, :size].reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + wd] = x.data.transpose(1, 0, 2, 3)
    narrow = o <= c
    if narrow:
        wtap = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1)).reshape(taps, o, c)
        grid = wtap[0] @ flat[:, :size]
        part = np.empty_like(grid)
        for t in range(1, taps):
            np.matmul(wtap[t], flat[:, offsets[t] : offsets[t] + size], out=part)
            grid += part
        cols = None
    else:
        cols = _windows(flat, offsets, size).reshape(c * taps, size)
        grid = w.data.reshape(o, c * taps) @ cols
    out = grid.reshape(o, n, hp, wp)[:, :, :oh, :ow].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gext = np.zeros((o, span + size), dtype=DTYPE)
        gext[:, span:].reshape(o, n, hp, wp)[:, :, :oh, :ow] = g.transpose(1, 0, 2, 3)
        gout = gext[:, span:]
        gw = None
        if w.requires_grad:
            if narrow:
                gw = np.stack([gout @ flat[:, off : off + size].T for off in offsets], axis=2).reshape(w.shape)
            else:
                gw = (gout @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            if narrow:
                gcols = _windows(gext, [span - off for off in offsets], size).reshape(o * taps, size)
                gflat = w.data.transpose(1, 0, 2, 3).reshape(c, o * taps) @ gcols
            else:
                gcols = (w.data.reshape(o, c * taps).T @ gout).reshape(c, taps, size)
                gflat = np.zeros((c, size + span), dtype=DTYPE)
                for t, off in enumerate(offsets):
                    gflat[:, off : off + size] += gcols[:, t]
                gflat = gflat[:, :size]
            gx = gflat.reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + wd]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_op(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution, kernel laid out (C_in, C_out, K, K).

    This is the adjoint of ``conv2d(., w, stride=stride)``; the output extent
    is ``(H - 1) * stride + K``.
    """
    _check_conv(x, w, bias, 0, "conv_transpose2d")
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    oh, ow = (h - 1) * stride + k, (wd - 1) * stride + k
    wmat = w.data.reshape(ci, co * k * k)
    xt = x.data.transpose(1, 0, 2, 3).reshape(ci, n * h * wd)
    cols = (wmat.T @ xt).reshape(co, k, k, n, h, wd)
    out = _col2im(cols, (n, co, oh, ow), k, stride, 1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gcols = _im2col(g, k, stride, 1, h, wd).reshape(co * k * k, n * h * wd)
        gx = np.ascontiguousarray((wmat @ gcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3)) if x.requires_grad else None
        gw = (xt @ gcols.T).reshape(w.shape) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_op(out, parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# bilinear resampling


def interp_matrix(src: int, dst: int, align_corners: bool = True) -> np.ndarray:
    """(dst, src) matrix of 1-d linear interpolation weights."""
    if src < 1 or dst < 1:
        raise ShapeError(f"interpolation extents must be >= 1 (src={src}, dst={dst})")
    t = np.arange(dst, dtype=DTYPE)
    if align_corners:
        pos = t * ((src - 1) / (dst - 1)) if dst > 1 else np.zeros(1)
    else:
        pos = np.clip((t + 0.5) * (src / dst) - 0.5, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src), dtype=DTYPE)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """Bilinear resize over the last two axes of a plain array."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    ah = interp_matrix(h, out_h, align_corners)
    aw = interp_matrix(w, out_w, align_corners)
    return np.matmul(np.matmul(ah, a), aw.T)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample_bilinear: target extent must be >= 1, got {(out_h, out_w)}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects NCHW, got {x.shape}")
    h, w = x.shape[2:]
    ah = interp_matrix(h, out_h, align_corners)
    aw = interp_matrix(w, out_w, align_corners)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return make_op(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),), "upsample_bilinear")
