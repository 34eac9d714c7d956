"""Reverse-mode autodiff over a small set of array primitives.

A forward pass executed inside a `Tape` context records one backward
closure per primitive; `Tape.backward` replays them once in reverse and
flushes leaf gradients into their `ParamStore`. Outside a tape the same
ops run without any recording, which is the fast inference path.

All arrays are float64. Gradients are never mutated in place, so backward
closures may hand the same array object to several parents.
"""
from __future__ import annotations

import numpy as np

from .special import beta_kl as _beta_kl_fwd
from .special import beta_kl_grad as _beta_kl_grad


class ShapeMismatch(ValueError):
    """Raised when operand shapes disagree with an op's contract."""


class TapeConsumed(RuntimeError):
    """Raised when backward is called twice on the same tape."""


class Var:
    """Array value participating in the recorded computation."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape


def _acc(v: Var, g) -> None:
    v.grad = g if v.grad is None else v.grad + g


class Tape:
    """Recorder for one forward pass; replayed exactly once by backward."""

    current: "Tape | None" = None

    def __init__(self):
        self._nodes: list[tuple[Var, object]] = []
        self._tracked: set[int] = set()
        self._leaves: dict[tuple[int, str], tuple[object, str, Var]] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        if Tape.current is not None:
            raise RuntimeError("a Tape is already active")
        Tape.current = self
        return self

    def __exit__(self, *exc):
        Tape.current = None
        return False

    def is_tracked(self, v: Var) -> bool:
        return id(v) in self._tracked

    def push(self, out: Var, bwd) -> None:
        self._tracked.add(id(out))
        self._nodes.append((out, bwd))

    def leaf(self, store, name: str, data) -> Var:
        key = (id(store), name)
        entry = self._leaves.get(key)
        if entry is None:
            v = Var(data)
            self._tracked.add(id(v))
            self._leaves[key] = (store, name, v)
            return v
        return entry[2]

    def backward(self, loss: Var) -> None:
        """Accumulate gradients of a scalar loss into all touched leaves."""
        if self._consumed:
            raise TapeConsumed("backward already ran on this tape")
        if loss.data.size != 1:
            raise ShapeMismatch("backward expects a scalar loss")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self._nodes):
            if out.grad is not None:
                bwd(out.grad)
        for store, name, v in self._leaves.values():
            if v.grad is not None:
                store.accumulate_grad(name, v.grad)
        self._nodes.clear()


def _maybe(out: Var, parents_flags, bwd_builder) -> None:
    """Record `out` if any parent is tracked; flags is a tuple of bools."""
    t = Tape.current
    if t is None or not any(parents_flags):
        return
    t.push(out, bwd_builder())


def _flags(*vs):
    t = Tape.current
    if t is None:
        return tuple(False for _ in vs)
    return tuple(t.is_tracked(v) for v in vs)


def const(data) -> Var:
    return Var(data)


def _require_same_shape(x: Var, y: Var, op: str) -> None:
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"{op}: {x.data.shape} vs {y.data.shape}")


def add(x: Var, y: Var) -> Var:
    _require_same_shape(x, y, "add")
    out = Var(x.data + y.data)
    tx, ty = _flags(x, y)

    def build():
        def bwd(g):
            if tx:
                _acc(x, g)
            if ty:
                _acc(y, g)
        return bwd

    _maybe(out, (tx, ty), build)
    return out


def sub(x: Var, y: Var) -> Var:
    _require_same_shape(x, y, "sub")
    out = Var(x.data - y.data)
    tx, ty = _flags(x, y)

    def build():
        def bwd(g):
            if tx:
                _acc(x, g)
            if ty:
                _acc(y, -g)
        return bwd

    _maybe(out, (tx, ty), build)
    return out


def mul(x: Var, y: Var) -> Var:
    _require_same_shape(x, y, "mul")
    out = Var(x.data * y.data)
    tx, ty = _flags(x, y)

    def build():
        xd, yd = x.data, y.data

        def bwd(g):
            if tx:
                _acc(x, g * yd)
            if ty:
                _acc(y, g * xd)
        return bwd

    _maybe(out, (tx, ty), build)
    return out


def div(x: Var, y: Var) -> Var:
    _require_same_shape(x, y, "div")
    out = Var(x.data / y.data)
    tx, ty = _flags(x, y)

    def build():
        xd, yd = x.data, y.data

        def bwd(g):
            if tx:
                _acc(x, g / yd)
            if ty:
                _acc(y, -g * xd / (yd * yd))
        return bwd

    _maybe(out, (tx, ty), build)
    return out


def stack_cols(xs: list[Var]) -> Var:
    """Stack (B,) vectors into (B, n) columns."""
    out = Var(np.stack([v.data for v in xs], axis=1))
    flags = _flags(*xs)

    def build():
        def bwd(g):
            for i, (v, f) in enumerate(zip(xs, flags)):
                if f:
                    _acc(v, g[:, i])
        return bwd

    _maybe(out, flags, build)
    return out


def scale(x: Var, c: float) -> Var:
    out = Var(x.data * c)
    (tx,) = _flags(x)

    def build():
        def bwd(g):
            _acc(x, g * c)
        return bwd

    _maybe(out, (tx,), build)
    return out


def add_const(x: Var, c: float) -> Var:
    out = Var(x.data + c)
    (tx,) = _flags(x)

    def build():
        def bwd(g):
            _acc(x, g)
        return bwd

    _maybe(out, (tx,), build)
    return out


def relu(x: Var) -> Var:
    out = Var(np.maximum(x.data, 0.0))
    (tx,) = _flags(x)

    def build():
        mask = x.data > 0.0  # grad at the kink is 0 by convention

        def bwd(g):
            _acc(x, g * mask)
        return bwd

    _maybe(out, (tx,), build)
    return out


def tanh(x: Var) -> Var:
    out = Var(np.tanh(x.data))
    (tx,) = _flags(x)

    def build():
        od = out.data

        def bwd(g):
            _acc(x, g * (1.0 - od * od))
        return bwd

    _maybe(out, (tx,), build)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Var) -> Var:
    out = Var(_sigmoid(x.data))
    (tx,) = _flags(x)

    def build():
        od = out.data

        def bwd(g):
            _acc(x, g * od * (1.0 - od))
        return bwd

    _maybe(out, (tx,), build)
    return out


def softplus(x: Var) -> Var:
    """ln(1 + e^x), computed overflow-safely."""
    out = Var(np.logaddexp(0.0, x.data))
    (tx,) = _flags(x)

    def build():
        sig = _sigmoid(x.data)

        def bwd(g):
            _acc(x, g * sig)
        return bwd

    _maybe(out, (tx,), build)
    return out


def square(x: Var) -> Var:
    out = Var(x.data * x.data)
    (tx,) = _flags(x)

    def build():
        xd = x.data

        def bwd(g):
            _acc(x, g * (2.0 * xd))
        return bwd

    _maybe(out, (tx,), build)
    return out


def abs_(x: Var) -> Var:
    out = Var(np.abs(x.data))
    (tx,) = _flags(x)

    def build():
        sgn = np.sign(x.data)  # sign(0) = 0, matching the relu convention

        def bwd(g):
            _acc(x, g * sgn)
        return bwd

    _maybe(out, (tx,), build)
    return out


def sum_all(x: Var) -> Var:
    out = Var(x.data.sum())
    (tx,) = _flags(x)

    def build():
        shape = x.data.shape

        def bwd(g):
            _acc(x, np.broadcast_to(g, shape))
        return bwd

    _maybe(out, (tx,), build)
    return out


def sum_axis_last(x: Var) -> Var:
    out = Var(x.data.sum(axis=-1))
    (tx,) = _flags(x)

    def build():
        shape = x.data.shape

        def bwd(g):
            _acc(x, np.broadcast_to(g[..., None], shape))
        return bwd

    _maybe(out, (tx,), build)
    return out


def mean_all(x: Var) -> Var:
    out = Var(x.data.mean())
    (tx,) = _flags(x)

    def build():
        shape = x.data.shape
        inv = 1.0 / x.data.size

        def bwd(g):
            _acc(x, np.broadcast_to(g * inv, shape))
        return bwd

    _maybe(out, (tx,), build)
    return out


def concat_last(xs: list[Var]) -> Var:
    out = Var(np.concatenate([v.data for v in xs], axis=-1))
    flags = _flags(*xs)

    def build():
        widths = [v.data.shape[-1] for v in xs]

        def bwd(g):
            off = 0
            for v, w, f in zip(xs, widths, flags):
                if f:
                    _acc(v, g[..., off:off + w])
                off += w
        return bwd

    _maybe(out, flags, build)
    return out


def slice_cols(x: Var, a: int, b: int) -> Var:
    out = Var(x.data[:, a:b])
    (tx,) = _flags(x)

    def build():
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[:, a:b] = g
            _acc(x, gx)
        return bwd

    _maybe(out, (tx,), build)
    return out


def col(x: Var, i: int) -> Var:
    out = Var(x.data[:, i])
    (tx,) = _flags(x)

    def build():
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[:, i] = g
            _acc(x, gx)
        return bwd

    _maybe(out, (tx,), build)
    return out


def linear(x: Var, w: Var, b: Var) -> Var:
    """x @ w.T + b with x: (B, n), w: (m, n), b: (m,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatch("linear expects x:(B,n) w:(m,n) b:(m,)")
    if x.data.shape[1] != w.data.shape[1] or w.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatch(
            f"linear: x{x.data.shape} w{w.data.shape} b{b.data.shape}")
    out = Var(x.data @ w.data.T + b.data)
    tx, tw, tb = _flags(x, w, b)

    def build():
        xd, wd = x.data, w.data

        def bwd(g):
            if tx:
                _acc(x, g @ wd)
            if tw:
                _acc(w, g.T @ xd)
            if tb:
                _acc(b, g.sum(axis=0))
        return bwd

    _maybe(out, (tx, tw, tb), build)
    return out


def softmax_last(x: Var) -> Var:
    """Shift-by-max stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Var(e / e.sum(axis=-1, keepdims=True))
    (tx,) = _flags(x)

    def build():
        od = out.data

        def bwd(g):
            dot = (g * od).sum(axis=-1, keepdims=True)
            _acc(x, od * (g - dot))
        return bwd

    _maybe(out, (tx,), build)
    return out


def conv2d(x: Var, w: Var, b: Var, stride: int = 1, pad: int = 0) -> Var:
    """Strided cross-correlation with zero padding.

    x: (B, Ci, H, W), w: (Co, Ci, k, k), b: (Co,). The im2col buffer is
    built with k*k strided copies, and the input gradient is scattered
    back the same way, so everything reduces to one GEMM per direction.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects x:(B,Ci,H,W) w:(Co,Ci,k,k)")
    bsz, ci, h, wd_ = x.data.shape
    co, ci_w, k, k2 = w.data.shape
    if ci != ci_w or k != k2 or b.data.shape != (co,):
        raise ShapeMismatch(f"conv2d: x{x.data.shape} w{w.data.shape}")
    if stride < 1:
        raise ShapeMismatch("conv2d stride must be >= 1")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd_ + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # layout (B, Ci, k, k, Ho, Wo) keeps every copy slice-aligned (no transposes)
    cols = np.empty((bsz, ci, k, k, ho, wo), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride,
                                    dj:dj + stride * wo:stride]
    cols3 = cols.reshape(bsz, ci * k * k, ho * wo)
    wmat = w.data.reshape(co, ci * k * k)
    out3 = np.matmul(wmat, cols3)  # (B, Co, Ho*Wo)
    out = Var(out3.reshape(bsz, co, ho, wo) + b.data[None, :, None, None])
    tx, tw, tb = _flags(x, w, b)

    def build():
        def bwd(g):
            g3 = g.reshape(bsz, co, ho * wo)
            if tw:
                gw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0)
                _acc(w, gw.reshape(co, ci, k, k))
            if tb:
                _acc(b, g3.sum(axis=(0, 2)))
            if tx:
                gcols = np.matmul(wmat.T, g3).reshape(bsz, ci, k, k, ho, wo)
                gxp = np.zeros((bsz, ci, h + 2 * pad, wd_ + 2 * pad))
                for di in range(k):
                    for dj in range(k):
                        gxp[:, :, di:di + stride * ho:stride,
                            dj:dj + stride * wo:stride] += gcols[:, :, di, dj]
                _acc(x, gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp)
        return bwd

    _maybe(out, (tx, tw, tb), build)
    return out


def avgpool_hw(x: Var) -> Var:
    """Global average pool over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeMismatch("avgpool_hw expects (B,C,H,W)")
    out = Var(x.data.mean(axis=(2, 3)))
    (tx,) = _flags(x)

    def build():
        bsz, c, h, w = x.data.shape
        inv = 1.0 / (h * w)

        def bwd(g):
            _acc(x, np.broadcast_to((g * inv)[:, :, None, None], (bsz, c, h, w)))
        return bwd

    _maybe(out, (tx,), build)
    return out


def attn_aggregate(att: Var, fmap: Var) -> Var:
    """Weighted spatial sum: att (B, H*W) applied to fmap (B, C, H, W)."""
    if att.data.ndim != 2 or fmap.data.ndim != 4:
        raise ShapeMismatch("attn_aggregate expects att:(B,N) fmap:(B,C,H,W)")
    bsz, c, h, w = fmap.data.shape
    if att.data.shape != (bsz, h * w):
        raise ShapeMismatch(f"attn_aggregate: att{att.data.shape} vs N={h*w}")
    fm = fmap.data.reshape(bsz, c, h * w)
    out = Var(np.einsum("bn,bcn->bc", att.data, fm))
    ta, tf = _flags(att, fmap)

    def build():
        ad = att.data

        def bwd(g):
            if ta:
                _acc(att, np.einsum("bc,bcn->bn", g, fm))
            if tf:
                _acc(fmap, (ad[:, None, :] * g[:, :, None]).reshape(bsz, c, h, w))
        return bwd

    _maybe(out, (ta, tf), build)
    return out


def gru_cell(x: Var, h: Var, wz: Var, bz: Var, wr: Var, br: Var,
             wh: Var, bh: Var) -> Var:
    """Single GRU step.

    z = sig(Wz [x;h] + bz); r = sig(Wr [x;h] + br);
    hc = tanh(Wh [x; r*h] + bh); h' = (1-z)*h + z*hc.
    """
    if x.data.ndim != 2 or h.data.ndim != 2 or x.data.shape[0] != h.data.shape[0]:
        raise ShapeMismatch("gru_cell expects batched x, h")
    n, d = x.data.shape[1], h.data.shape[1]
    if wz.data.shape != (d, n + d):
        raise ShapeMismatch(f"gru_cell: wz{wz.data.shape} vs ({d},{n + d})")
    xh = concat_last([x, h])
    z = sigmoid(linear(xh, wz, bz))
    r = sigmoid(linear(xh, wr, br))
    xrh = concat_last([x, mul(r, h)])
    hc = tanh(linear(xrh, wh, bh))
    one = const(np.ones_like(z.data))
    return add(mul(sub(one, z), h), mul(z, hc))


def beta_kl_loss(alpha: Var, beta: Var, target_alpha, target_beta) -> Var:
    """Elementwise KL(Beta(alpha, beta) || Beta(target)) with fixed targets."""
    _require_same_shape(alpha, beta, "beta_kl_loss")
    ta = np.asarray(target_alpha, dtype=np.float64)
    tb = np.asarray(target_beta, dtype=np.float64)
    out = Var(_beta_kl_fwd(alpha.data, beta.data, ta, tb))
    fa, fb = _flags(alpha, beta)

    def build():
        da, db = _beta_kl_grad(alpha.data, beta.data, ta, tb)

        def bwd(g):
            if fa:
                _acc(alpha, g * da)
            if fb:
                _acc(beta, g * db)
        return bwd

    _maybe(out, (fa, fb), build)
    return out
