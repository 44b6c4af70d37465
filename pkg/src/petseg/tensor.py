"""Dense tensors with reverse-mode gradients for the handful of ops a 3D U-Net needs.

Feature maps use the ``[C, D, H, W]`` layout stored row-major (C order), so
the W index varies fastest. There is no batch axis; batches are handled by
gradient accumulation in the training loop.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_CLAMP = 1e-12

# Columns per im2col block; keeps the gathered patch matrix cache-sized.
_CHUNK = 2048

_sequence = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised for misuse of the gradient graph (non-scalar loss, reuse)."""


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the closure that routes gradients."""

    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_sequence))


class Tensor:
    """N-D array that optionally participates in a gradient graph.

    ``grad`` is populated by :func:`backward` on tensors with
    ``requires_grad=True``; tensors without it never receive contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, validation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(out_data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``.

    Nodes are visited once each in reverse execution order. The graph is
    released afterwards, so calling this twice on the same loss raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            raise GraphError("graph already released by a previous backward call")
        raise GraphError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, tuple[Node, Tensor]] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or id(n) in nodes:
            continue
        nodes[id(n)] = (n, t)
        stack.extend(n.inputs)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n, t in sorted(nodes.values(), key=lambda p: p[0].seq, reverse=True):
        g = grads.pop(id(t), None)
        t.node = None
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _record(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())
    return _record(out, "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


# --------------------------------------------------------------- convolutions


def _as_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{what} expects [C, D, H, W], got shape {x.shape}")


def _flat_offsets(k: int, hp: int, wp: int) -> list[int]:
    return [dz * hp * wp + dy * wp + dx for dz in range(k) for dy in range(k) for dx in range(k)]


def _gather(xf: np.ndarray, offsets: list[int], start: int, stop: int) -> np.ndarray:
    cin = xf.shape[0]
    cols = np.empty((len(offsets), cin, stop - start), dtype=xf.dtype)
    for i, off in enumerate(offsets):
        cols[i] = xf[:, off + start : off + stop]
    return cols.reshape(len(offsets) * cin, stop - start)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 3D convolution (cross-correlation) with an odd cubic kernel.

    ``padding="same"`` zero-pads by ``k // 2`` so spatial extents are kept;
    ``"valid"`` shrinks each extent by ``k - 1``.

    Implementation: the padded input is flattened so every kernel tap is a
    constant shift of the flat index. Output positions are computed on the
    padded row pitch and the wrap-around columns are discarded.
    """
    _as_4d(x, "conv3d")
    w = weight.data
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ValueError(f"conv3d weights must be [Cout, Cin, k, k, k], got {weight.shape}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if x.shape[0] != cin:
        raise ValueError(
            f"conv3d channel mismatch: input {x.shape} has {x.shape[0]} channels, "
            f"weights {weight.shape} expect {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d bias must have shape ({cout},), got {bias.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    _, d, h, wd = x.shape
    p = k // 2 if padding == "same" else 0
    dp, hp, wp = d + 2 * p, h + 2 * p, wd + 2 * p
    do, ho, wo = dp - k + 1, hp - k + 1, wp - k + 1
    if min(do, ho, wo) < 1:
        raise ValueError(f"conv3d input {x.shape} too small for valid {k}^3 kernel")

    dtype = x.dtype
    xp = np.zeros((cin, dp, hp, wp), dtype=dtype)
    xp[:, p : p + d, p : p + h, p : p + wd] = x.data
    xf = xp.reshape(cin, -1)
    offsets = _flat_offsets(k, hp, wp)
    span = (do - 1) * hp * wp + (ho - 1) * wp + wo
    wm = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1).reshape(cout, -1), dtype=dtype)

    full = np.zeros((cout, do * hp * wp), dtype=dtype)
    for s in range(0, span, _CHUNK):
        e = min(span, s + _CHUNK)
        np.matmul(wm, _gather(xf, offsets, s, e), out=full[:, s:e])
    out = full.reshape(cout, do, hp, wp)[:, :, :ho, :wo]
    if bias is not None:
        out = out + bias.data.astype(dtype).reshape(cout, 1, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def _backward(g: np.ndarray):
        gfull = np.zeros((cout, do, hp, wp), dtype=dtype)
        gfull[:, :, :ho, :wo] = g
        gf = gfull.reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xf)
            wmt = np.ascontiguousarray(wm.T)
            for s in range(0, span, _CHUNK):
                e = min(span, s + _CHUNK)
                gcols = (wmt @ gf[:, s:e]).reshape(len(offsets), cin, e - s)
                for i, off in enumerate(offsets):
                    gxp[:, off + s : off + e] += gcols[i]
            gx = gxp.reshape(cin, dp, hp, wp)[:, p : p + d, p : p + h, p : p + wd].copy()
        if weight.requires_grad:
            gwm = np.zeros_like(wm)
            for s in range(0, span, _CHUNK):
                e = min(span, s + _CHUNK)
                gwm += gf[:, s:e] @ _gather(xf, offsets, s, e).T
            gw = gwm.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3).astype(w.dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3)).astype(bias.dtype)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, "conv3d", inputs, _backward)


def conv3d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """2x2x2 transposed convolution at stride 2: every input voxel scatters
    ``value * kernel`` into its own disjoint 2x2x2 output block."""
    _as_4d(x, "conv3d_transposed")
    if stride != 2:
        raise ValueError(f"conv3d_transposed supports stride 2 only, got {stride}")
    w = weight.data
    if w.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ValueError(f"conv3d_transposed weights must be [Cin, Cout, 2, 2, 2], got {weight.shape}")
    cin, cout = w.shape[0], w.shape[1]
    if x.shape[0] != cin:
        raise ValueError(
            f"conv3d_transposed channel mismatch: input {x.shape} vs weights {weight.shape}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d_transposed bias must have shape ({cout},), got {bias.shape}")
    _, d, h, wd = x.shape
    dtype = x.dtype
    wm = w.reshape(cin, cout * 8).astype(dtype, copy=False)
    xm = x.data.reshape(cin, -1)
    y = (wm.T @ xm).reshape(cout, 2, 2, 2, d, h, wd)
    out = y.transpose(0, 4, 1, 5, 2, 6, 3).reshape(cout, 2 * d, 2 * h, 2 * wd)
    if bias is not None:
        out = out + bias.data.astype(dtype).reshape(cout, 1, 1, 1)

    def _backward(g: np.ndarray):
        gm = g.reshape(cout, d, 2, h, 2, wd, 2).transpose(0, 2, 4, 6, 1, 3, 5).reshape(cout * 8, -1)
        gx = (wm @ gm).reshape(x.shape) if x.requires_grad else None
        gw = (xm @ gm.T).reshape(w.shape).astype(w.dtype) if weight.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3)).astype(bias.dtype)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(np.ascontiguousarray(out), "conv3d_transposed", inputs, _backward)


def maxpool3d(x: Tensor, window: int = 2) -> tuple[Tensor, np.ndarray]:
    """Max over disjoint 2x2x2 blocks.

    Returns the pooled tensor and, per output voxel, the within-block
    position (0..7, row-major over dz, dy, dx) of the winner. Ties go to the
    lowest position, which is also the lowest linear index.
    """
    _as_4d(x, "maxpool3d")
    if window != 2:
        raise ValueError(f"maxpool3d supports window 2 only, got {window}")
    c, d, h, wd = x.shape
    if d % 2 or h % 2 or wd % 2:
        raise ValueError(f"maxpool3d needs even spatial extents, got {x.shape[1:]}")
    blocks = (
        x.data.reshape(c, d // 2, 2, h // 2, 2, wd // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d // 2, h // 2, wd // 2, 8)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(c, d // 2, h // 2, wd // 2, 2, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(x.shape)
        )
        return (gx,)

    return _record(np.ascontiguousarray(out), "maxpool3d", (x,), _backward), idx


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s. Spatial extents must match exactly."""
    _as_4d(a, "concat_channels")
    _as_4d(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _record(out, "concat_channels", (a, b), lambda g: (g[:ca], g[ca:]))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-voxel softmax over the channel axis (max-subtracted)."""
    z = x.data - x.data.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    p = z

    def _backward(g: np.ndarray):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return _record(p, "softmax_channels", (x,), _backward)


def cross_entropy_loss(
    probs: Tensor, target: np.ndarray, class_weights: np.ndarray | None = None
) -> Tensor:
    """Mean over voxels of ``-log p[target]``, probabilities clamped at 1e-12.

    With ``class_weights`` the mean becomes ``sum(w[t] * nll) / sum(w[t])``.
    """
    _as_4d(probs, "cross_entropy_loss")
    c = probs.shape[0]
    t = np.asarray(target)
    if t.shape != probs.shape[1:]:
        raise ValueError(f"target shape {t.shape} does not match probabilities {probs.shape}")
    bad = (t < 0) | (t >= c)
    if bad.any():
        coord = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {int(t[coord])} at voxel {coord} outside 0..{c - 1}")
    t = t.astype(np.intp)
    picked = np.take_along_axis(probs.data, t[None], axis=0)[0]
    clamped = np.maximum(picked, LOG_CLAMP)
    nll = -np.log(clamped)
    if class_weights is None:
        vw = None
        norm = float(t.size)
        loss = nll.sum(dtype=np.float64) / norm
    else:
        vw = np.asarray(class_weights, dtype=probs.dtype)[t]
        norm = float(vw.sum(dtype=np.float64))
        loss = (vw * nll).sum(dtype=np.float64) / norm

    def _backward(g: np.ndarray):
        scale = -(g / norm) / clamped * (picked >= LOG_CLAMP)
        if vw is not None:
            scale = scale * vw
        gp = np.zeros_like(probs.data)
        np.put_along_axis(gp, t[None], scale[None].astype(probs.dtype), axis=0)
        return (gp,)

    return _record(np.asarray(loss, dtype=probs.dtype).reshape(()), "cross_entropy", (probs,), _backward)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    """First/second moment buffers and step count, one buffer per parameter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("adam_step: params, grads and state lengths differ")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"adam_step: state shape {m.shape} vs parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= upd.astype(p.dtype)
