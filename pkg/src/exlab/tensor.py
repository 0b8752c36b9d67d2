"""Reverse-mode automatic differentiation over numpy arrays.

Define-by-run: while a Tape is active, every op appends a node holding its
backward closure, and ``backward(loss)`` replays the tape once in reverse.
Outside a tape ops are plain numpy forward passes (no graph, no memory
growth), which is what evaluation uses for long iteration rollouts.

Shape conventions: channel axis 0 for single examples (``(C, H, W)`` or
``(C, L)``); ops that cannot infer the layout from rank take a
``channel_axis`` argument so batched ``(N, C, ...)`` tensors work too.
Convolution kernels always have spatial extent 3 (zero padding, stride 1).

A graph must live inside a single tape: tensors produced under one tape are
not differentiated through when used under another.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "mul",
    "conv1d_same",
    "conv2d_same",
    "layer_norm_channels",
    "pointwise",
    "sigmoid",
    "tanh",
    "relu",
    "global_max_pool",
    "global_avg_pool",
    "softmax_cross_entropy",
    "concat_channels",
    "slice_channels",
    "mean_all",
    "backward",
    "finite_diff_check",
    "set_strict_finite",
]

_TAPES: list["Tape"] = []

# When enabled every public op asserts finite outputs. Off by default (it
# costs a full pass over each result); the test suite switches it on.
_STRICT_FINITE = False


def set_strict_finite(flag: bool) -> None:
    global _STRICT_FINITE
    _STRICT_FINITE = bool(flag)


class Tensor:
    """A numpy array plus optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None  # tape this tensor was recorded on

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Linear record of executed ops; reverse replay computes gradients.

    Append order is a topological order by construction: a node can only be
    recorded after all of its inputs exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False


class _Node:
    __slots__ = ("outs", "inputs", "needs", "backward_fn")

    def __init__(self, outs, inputs, needs, backward_fn):
        self.outs = outs
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced a non-finite value")


def _record(op: str, out_data, inputs: tuple, backward_fn):
    """Wrap forward results; register the backward closure if needed.

    ``backward_fn(gs, needs)`` receives one output gradient per output
    (``None`` where unused) flattened to a single array for single-output
    ops, and returns one gradient (or ``None``) per input.
    """
    multi = isinstance(out_data, tuple)
    datas = out_data if multi else (out_data,)
    for d in datas:
        _check_finite(d, op)
    outs = tuple(Tensor(d) for d in datas)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(t.requires_grad or t._tape is tape for t in inputs)
        if any(needs):
            for o in outs:
                o._tape = tape
            tape.nodes.append(_Node(outs, inputs, needs, backward_fn))
    return outs if multi else outs[0]


# ---------------------------------------------------------------------------
# arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _record("add", out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g, needs):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return _record("mul", out_data, (a, b), bwd)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def bwd(g, needs):
        return (np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=True),)

    return _record("mean_all", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution (kernel extent 3, zero padding, stride 1)


def _conv_same(x: Tensor, w: Tensor, b: Tensor | None, sp: int, op: str) -> Tensor:
    xd, wd = x.data, w.data
    if wd.ndim != 2 + sp or any(k != 3 for k in wd.shape[2:]):
        raise ValueError(f"{op}: kernel must have spatial extent 3, got {wd.shape}")
    batched = xd.ndim == 2 + sp
    if not batched:
        if xd.ndim != 1 + sp:
            raise ValueError(f"{op}: input rank {xd.ndim} invalid")
        xd = xd[None]
    n, cin = xd.shape[0], xd.shape[1]
    cout = wd.shape[0]
    if wd.shape[1] != cin:
        raise ValueError(f"{op}: input has {cin} channels but kernel is {wd.shape}")
    space = xd.shape[2:]
    if any(s < 1 for s in space):
        raise ValueError(f"{op}: empty spatial extent {space}")
    npos = int(np.prod(space))
    kk = 3**sp

    pad = ((0, 0), (0, 0)) + ((1, 1),) * sp
    xp = np.pad(xd, pad)
    win = sliding_window_view(xp, (3,) * sp, axis=tuple(range(2, 2 + sp)))
    # (N, Ci, *space, *k) -> (Ci, *k, N, *space) -> (Ci*kk, N*npos)
    perm = (1,) + tuple(range(2 + sp, 2 + 2 * sp)) + (0,) + tuple(range(2, 2 + sp))
    cols = win.transpose(perm).reshape(cin * kk, n * npos)
    wmat = wd.reshape(cout, cin * kk)
    y = (wmat @ cols).reshape((cout, n) + space)
    y = np.ascontiguousarray(np.moveaxis(y, 1, 0))
    if b is not None:
        y += b.data.reshape((1, cout) + (1,) * sp)
    if not batched:
        y = y[0]

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g, needs):
        gd = g if batched else g[None]
        gmat = np.moveaxis(gd, 1, 0).reshape(cout, n * npos)
        gw = (gmat @ cols.T).reshape(wd.shape) if needs[1] else None
        gx = None
        if needs[0]:
            gcols = (wmat.T @ gmat).reshape((cin,) + (3,) * sp + (n,) + space)
            gxp = np.zeros_like(xp)
            if sp == 1:
                (length,) = space
                for i in range(3):
                    gxp[:, :, i : i + length] += np.moveaxis(gcols[:, i], 1, 0)
            else:
                hh, ww = space
                for i in range(3):
                    for j in range(3):
                        gxp[:, :, i : i + hh, j : j + ww] += np.moveaxis(
                            gcols[:, i, j], 1, 0
                        )
            sl = (slice(None), slice(None)) + (slice(1, -1),) * sp
            gx = np.ascontiguousarray(gxp[sl])
            if not batched:
                gx = gx[0]
        if b is None:
            return gx, gw
        gb = gd.sum(axis=(0,) + tuple(range(2, 2 + sp))) if needs[2] else None
        return gx, gw, gb

    return _record(op, y, inputs, bwd)


def conv2d_same(x, w, b=None) -> Tensor:
    """3x3 convolution, zero padded, stride 1. x: (C,H,W) or (N,C,H,W)."""
    b = _as_tensor(b) if b is not None else None
    return _conv_same(_as_tensor(x), _as_tensor(w), b, 2, "conv2d_same")


def conv1d_same(x, w, b=None) -> Tensor:
    """Length-3 convolution, zero padded, stride 1. x: (C,L) or (N,C,L)."""
    b = _as_tensor(b) if b is not None else None
    return _conv_same(_as_tensor(x), _as_tensor(w), b, 1, "conv1d_same")


# ---------------------------------------------------------------------------
# normalization


def layer_norm_channels(x, gamma, beta, eps: float = 1e-5, channel_axis: int = 0) -> Tensor:
    """Normalize over the channel axis independently at every position.

    Statistics never mix spatial positions, so the op is invariant to the
    grid size the solver runs on.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    ca = channel_axis
    c = xd.shape[ca]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"affine parameters must have shape ({c},)")
    bshape = [1] * xd.ndim
    bshape[ca] = c
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)

    mu = xd.mean(axis=ca, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=ca, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gd * xhat + bd

    def bwd(g, needs):
        gxhat = g * gd
        gx = None
        if needs[0]:
            m1 = gxhat.mean(axis=ca, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=ca, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        red = tuple(i for i in range(xd.ndim) if i != ca)
        ggamma = (g * xhat).sum(axis=red) if needs[1] else None
        gbeta = g.sum(axis=red) if needs[2] else None
        return gx, ggamma, gbeta

    return _record("layer_norm_channels", y, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    t = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bwd(g, needs):
        return (g * (y * (1.0 - y)),)

    return _record("sigmoid", y, (x,), bwd)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bwd(g, needs):
        return (g * (1.0 - y * y),)

    return _record("tanh", y, (x,), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    y = np.maximum(x.data, 0.0)

    def bwd(g, needs):
        # subgradient 0 at the kink
        return (g * (x.data > 0),)

    return _record("relu", y, (x,), bwd)


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def pointwise(x, f: str) -> Tensor:
    try:
        op = _POINTWISE[f]
    except KeyError:
        raise ValueError(f"unknown pointwise function {f!r}") from None
    return op(x)


# ---------------------------------------------------------------------------
# pooling


def global_max_pool(x, channel_axis: int = 0) -> Tensor:
    """Max over every spatial position; output keeps the leading axes only.

    Backward routes the gradient to the first maximal position in row-major
    order, so ties break deterministically.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim <= channel_axis + 1:
        raise ValueError("global_max_pool needs at least one spatial axis")
    lead = xd.shape[: channel_axis + 1]
    flat = xd.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)  # first occurrence on ties
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g, needs):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (gflat.reshape(xd.shape),)

    return _record("global_max_pool", y, (x,), bwd)


def global_avg_pool(x, channel_axis: int = 0) -> Tensor:
    """Mean over every spatial position; output keeps the leading axes only."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim <= channel_axis + 1:
        raise ValueError("global_avg_pool needs at least one spatial axis")
    axes = tuple(range(channel_axis + 1, xd.ndim))
    npos = int(np.prod([xd.shape[a] for a in axes]))
    y = xd.mean(axis=axes)

    def bwd(g, needs):
        gexp = np.expand_dims(g, axes)
        return (np.broadcast_to(gexp / npos, xd.shape).astype(xd.dtype, copy=True),)

    return _record("global_avg_pool", y, (x,), bwd)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, targets, class_axis: int = 0) -> Tensor:
    """Mean cross-entropy with integer class targets.

    ``targets`` has the shape of ``logits`` with the class axis removed; the
    mean runs over every remaining position (batch and spatial alike).
    Log-sum-exp subtracts the per-position maximum, so large logits stay
    finite.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    ca = class_axis
    k = ld.shape[ca]
    tgt = np.asarray(targets)
    expect = ld.shape[:ca] + ld.shape[ca + 1 :]
    if tgt.shape != expect:
        raise ValueError(f"targets shape {tgt.shape} does not match logits {expect}")
    if not np.issubdtype(tgt.dtype, np.integer):
        raise TypeError("targets must be integers")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= k):
        raise ValueError(f"target class out of range [0, {k})")

    mx = ld.max(axis=ca, keepdims=True)
    shifted = ld - mx
    lse = np.log(np.exp(shifted).sum(axis=ca, keepdims=True)) + mx
    logp = ld - lse
    tgt_idx = np.expand_dims(tgt, ca)
    picked = np.take_along_axis(logp, tgt_idx, axis=ca)
    n_terms = max(tgt.size, 1)
    loss = np.asarray(-picked.sum() / n_terms)

    def bwd(g, needs):
        soft = np.exp(logp)
        np.put_along_axis(
            soft, tgt_idx, np.take_along_axis(soft, tgt_idx, axis=ca) - 1.0, axis=ca
        )
        return (soft * (float(g) / n_terms),)

    return _record("softmax_cross_entropy", loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(parts, channel_axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ca = channel_axis
    y = np.concatenate([p.data for p in parts], axis=ca)
    splits = np.cumsum([p.data.shape[ca] for p in parts])[:-1]

    def bwd(g, needs):
        pieces = np.split(g, splits, axis=ca)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record("concat_channels", y, tuple(parts), bwd)


def slice_channels(x, start: int, stop: int, channel_axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[channel_axis] = slice(start, stop)
    sl = tuple(sl)
    y = np.ascontiguousarray(x.data[sl])

    def bwd(g, needs):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record("slice_channels", y, (x,), bwd)


# ---------------------------------------------------------------------------
# backward + gradient checking


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    ``loss`` must be a scalar recorded on the innermost active tape. Each
    node is visited exactly once, in reverse record order; gradients of
    shared subexpressions sum over all use sites.
    """
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    if loss.data.size != 1:
        raise ValueError("backward() expects a scalar loss")
    if loss._tape is not tape:
        raise RuntimeError("loss was not recorded on the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gs = [grads.pop(id(o), None) for o in node.outs]
        if all(g is None for g in gs):
            continue
        g_in = node.backward_fn(gs[0] if len(gs) == 1 else tuple(gs), node.needs)
        for inp, need, gi in zip(node.inputs, node.needs, g_in):
            if gi is None or not need:
                continue
            if inp._tape is tape:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif inp.requires_grad:
                inp.grad = gi if inp.grad is None else inp.grad + gi


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a closure over ``params`` (iterable of Tensors) returning a
    scalar Tensor. Per parameter the relative error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``;
    the overall maximum is returned. Run with 64-bit parameters: the probe
    step interacts with float32 roundoff.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        backward(f())
    analytic = [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True)
        for p in params
    ]

    worst = 0.0
    for p, ga in zip(params, analytic):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        gn = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = gn.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f().item()
            flat[i] = keep - eps
            lo = f().item()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        denom = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0), 1e-8)
        err = float(np.abs(ga - gn).max(initial=0.0)) / denom
        worst = max(worst, err)
    return worst
