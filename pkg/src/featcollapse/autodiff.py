"""Reverse-mode automatic differentiation over dense numpy tensors.

Define-by-run: primitives executed while a Tape is active append nodes in
creation order, which is already a topological order, so the backward pass
is a single reversed sweep that accumulates (never overwrites) gradients.
Tapes are rebuilt on every forward pass and are confined to one thread;
frozen parameters may be shared between concurrently running tapes.
"""

from __future__ import annotations

import threading

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class NotScalarError(AutodiffError):
    pass


class UnreachableError(AutodiffError):
    pass


class DegenerateEigenvaluesError(AutodiffError):
    """Raised when an eig2x2 gradient is requested at near-equal eigenvalues."""

    def __init__(self, msg, mask=None):
        super().__init__(msg)
        self.mask = mask


_local = threading.local()

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager switching the default dtype, e.g. precision('float64')."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        self.saved = None

    def __enter__(self):
        self.saved = get_default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self.saved)
        return False


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-d array with an optional same-shape gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "_prod_tape")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else get_default_dtype())
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prod_tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return self.values.item()

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values, dtype=self.values.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype})"

    # operator sugar; all arithmetic routes through the recorded primitives
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_default_dtype()))


class Node:
    __slots__ = ("op", "inputs", "outputs", "needed", "bwd")

    def __init__(self, op, inputs, outputs, needed, bwd):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.needed = needed
        self.bwd = bwd


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.degenerate_mask = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _note_degenerate(self, mask):
        if self.degenerate_mask is None:
            self.degenerate_mask = mask.copy()
        else:
            self.degenerate_mask = self.degenerate_mask | mask

    def backward(self, output, seed=None):
        """Backward sweep from `output`, seeding with `seed` (default ones).

        Visits each node exactly once in reverse creation order and
        accumulates into .grad of every tensor that needs a gradient.
        Forward values are never mutated.
        """
        if output._prod_tape is not self:
            raise UnreachableError("output was not produced on this tape")
        for node in self.nodes:
            for t in node.inputs:
                t.grad = None
            for t in node.outputs:
                t.grad = None
        if seed is None:
            seed = np.ones_like(output.values)
        else:
            seed = np.asarray(seed, dtype=output.values.dtype)
            if seed.shape != output.values.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} != output shape {output.values.shape}")
        output.grad = seed
        for node in reversed(self.nodes):
            grads_out = [o.grad for o in node.outputs]
            if all(g is None for g in grads_out):
                continue
            grads_in = node.bwd(*grads_out)
            for t, need, g in zip(node.inputs, node.needed, grads_in):
                if not need or g is None:
                    continue
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad = t.grad + g


def _needs_grad(t, tape):
    return t.requires_grad or t._prod_tape is tape


def _ensure_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _record(op, inputs, out_values, bwd_builder):
    """Commit one primitive: finite-check, wrap outputs, maybe record a node.

    bwd_builder(needed) -> bwd(*grads_out) -> tuple of input gradients,
    entries may be None. `needed` lets the closure skip dead branches
    (e.g. weight gradients of frozen parameters).
    """
    single = not isinstance(out_values, tuple)
    if single:
        out_values = (out_values,)
    for v in out_values:
        _ensure_finite(op, v)
    outs = tuple(Tensor(v, dtype=v.dtype) for v in out_values)
    tape = active_tape()
    if tape is not None:
        needed = [_needs_grad(t, tape) for t in inputs]
        if any(needed):
            for o in outs:
                o._prod_tape = tape
            tape.nodes.append(Node(op, list(inputs), list(outs), needed, bwd_builder(needed)))
    return outs[0] if single else outs


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values + b.values

    def build(needed):
        def bwd(g):
            ga = _unbroadcast(g, a.values.shape) if needed[0] else None
            gb = _unbroadcast(g, b.values.shape) if needed[1] else None
            return ga, gb
        return bwd

    return _record("add", (a, b), out, build)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values - b.values

    def build(needed):
        def bwd(g):
            ga = _unbroadcast(g, a.values.shape) if needed[0] else None
            gb = _unbroadcast(-g, b.values.shape) if needed[1] else None
            return ga, gb
        return bwd

    return _record("sub", (a, b), out, build)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values * b.values

    def build(needed):
        def bwd(g):
            ga = _unbroadcast(g * b.values, a.values.shape) if needed[0] else None
            gb = _unbroadcast(g * a.values, b.values.shape) if needed[1] else None
            return ga, gb
        return bwd

    return _record("mul", (a, b), out, build)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values / b.values

    def build(needed):
        def bwd(g):
            ga = _unbroadcast(g / b.values, a.values.shape) if needed[0] else None
            gb = None
            if needed[1]:
                gb = _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape)
            return ga, gb
        return bwd

    return _record("div", (a, b), out, build)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    out = a.values @ b.values

    def build(needed):
        def bwd(g):
            ga = g @ b.values.T if needed[0] else None
            gb = a.values.T @ g if needed[1] else None
            return ga, gb
        return bwd

    return _record("matmul", (a, b), out, build)


def _elementwise(name, a, fwd, dfwd):
    """dfwd(x, y) -> local derivative, where y is the forward output."""
    a = _as_tensor(a)
    out = fwd(a.values)

    def build(needed):
        def bwd(g):
            return (g * dfwd(a.values, out),)
        return bwd

    return _record(name, (a,), out, build)


def exp(a):
    return _elementwise("exp", a, np.exp, lambda x, y: y)


def log(a):
    return _elementwise("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    return _elementwise("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def tanh(a):
    return _elementwise("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a):
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _elementwise("sigmoid", a, fwd, lambda x, y: y * (1.0 - y))


def relu(a):
    return _elementwise("relu", a, lambda x: np.maximum(x, 0.0),
                        lambda x, y: (x > 0).astype(x.dtype))


def softplus(a):
    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def dfwd(x, y):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _elementwise("softplus", a, fwd, dfwd)


def sin(a):
    return _elementwise("sin", a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _elementwise("cos", a, np.cos, lambda x, y: -np.sin(x))


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.values.reshape(shape)

    def build(needed):
        def bwd(g):
            return (g.reshape(a.values.shape),)
        return bwd

    return _record("reshape", (a,), out, build)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def build(needed):
        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, a.values.shape).astype(a.values.dtype, copy=True),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.values.shape).astype(a.values.dtype, copy=True),)
        return bwd

    return _record("sum", (a,), np.asarray(out), build)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.values.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.values.shape[i] for i in axis]))
    else:
        n = a.values.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n, a.dtype))


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def build(needed):
        def bwd(g):
            grads = []
            for i, t in enumerate(tensors):
                if not needed[i]:
                    grads.append(None)
                    continue
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(g[tuple(sl)])
            return tuple(grads)
        return bwd

    return _record("concat", tensors, out, build)


# ---------------------------------------------------------------------------
# 2-D convolution (NCHW) via im2col; the transpose op is its exact adjoint


def _im2col(xp, kh, kw, s):
    n, c, _, _ = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_fwd(x, w, s, p):
    n = x.shape[0]
    o = w.shape[0]
    xp = _pad_hw(x, p)
    cols, oh, ow = _im2col(xp, w.shape[2], w.shape[3], s)
    out = cols @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def _conv_grad_x(gy, w, s, p, hw):
    n, o, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    h, w_ = hw
    oph = h + 2 * p - kh - (oh - 1) * s
    opw = w_ + 2 * p - kw - (ow - 1) * s
    if not (0 <= oph < max(s, 2) and 0 <= opw < max(s, 2)):
        raise ShapeError(f"inconsistent conv geometry: grad {gy.shape} for input hw {hw}")
    gs = np.zeros((n, o, (oh - 1) * s + 1, (ow - 1) * s + 1), dtype=gy.dtype)
    gs[:, :, ::s, ::s] = gy
    gp = np.pad(gs, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p + oph),
                     (kw - 1 - p, kw - 1 - p + opw)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = _conv_fwd(gp, wf, 1, 0)
    if gx.shape[2:] != (h, w_):
        raise ShapeError(f"conv input-gradient shape {gx.shape[2:]} != {hw}")
    return gx


def _conv_grad_w(x, gy, s, p, kh, kw):
    n, o, oh, ow = gy.shape
    c = x.shape[1]
    xp = _pad_hw(x, p)
    cols, oh2, ow2 = _im2col(xp, kh, kw, s)
    assert (oh2, ow2) == (oh, ow)
    g2 = gy.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    return (g2.T @ cols).reshape(o, c, kh, kw)


def conv2d(x, w, stride=1, padding=0):
    """Strided cross-correlation, x (N,C,H,W) with w (O,C,kh,kw) -> (N,O,OH,OW)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} with {w.shape}")
    out = _conv_fwd(x.values, w.values, stride, padding)

    def build(needed):
        def bwd(g):
            gx = gw = None
            if needed[0]:
                gx = _conv_grad_x(g, w.values, stride, padding, x.shape[2:])
            if needed[1]:
                gw = _conv_grad_w(x.values, g, stride, padding, w.shape[2], w.shape[3])
            return gx, gw
        return bwd

    return _record("conv2d", (x, w), out, build)


def conv2d_transpose(x, w, stride=1, padding=0, out_hw=None):
    """Adjoint of conv2d, x (N,Cin,H,W) with w (Cin,Cout,kh,kw) -> (N,Cout,OH,OW)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_transpose shapes {x.shape} with {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if out_hw is None:
        out_hw = ((x.shape[2] - 1) * stride + kh - 2 * padding,
                  (x.shape[3] - 1) * stride + kw - 2 * padding)
    # (Cin,Cout,kh,kw) is already the (O,C) layout of the conv being adjointed
    out = _conv_grad_x(x.values, w.values, stride, padding, out_hw)

    def build(needed):
        def bwd(g):
            gx = gw = None
            if needed[0]:
                gx = _conv_fwd(g, w.values, stride, padding)
            if needed[1]:
                gw = _conv_grad_w(g, x.values, stride, padding, kh, kw)
            return gx, gw
        return bwd

    return _record("conv2d_transpose", (x, w), out, build)


# ---------------------------------------------------------------------------
# closed-form eigenvalues of a symmetric 2x2 matrix [[a, c], [c, b]]

EIG_DEGENERACY_RTOL = 1e-9


def eig2x2(a, b, c):
    """Eigenvalues (lmax, lmin) of [[a, c], [c, b]], elementwise over the inputs.

    The value is defined everywhere; the gradient is flagged as degenerate
    where lmax - lmin < EIG_DEGENERACY_RTOL * trace, since it blows up as the
    eigenvalues meet. gradient()/vjp() raise DegenerateEigenvaluesError there.
    """
    a, b, c = _as_tensor(a), _as_tensor(b), _as_tensor(c)
    av, bv, cv = a.values, b.values, c.values
    half_diff = 0.5 * (av - bv)
    r = np.sqrt(half_diff * half_diff + cv * cv)
    half_tr = 0.5 * (av + bv)
    lmax = half_tr + r
    lmin = half_tr - r

    def build(needed):
        def bwd(g1, g2):
            trace = av + bv
            mask = ((2.0 * r) < (EIG_DEGENERACY_RTOL * np.abs(trace))) | (r == 0.0)
            if mask.any():
                for t in (lmax_t, lmin_t):
                    if t._prod_tape is not None:
                        t._prod_tape._note_degenerate(mask)
                        break
            r_safe = np.where(r == 0.0, 1.0, r)
            dr_da = half_diff / (2.0 * r_safe)
            dr_dc = cv / r_safe
            z = np.zeros_like(av)
            g1 = g1 if g1 is not None else z
            g2 = g2 if g2 is not None else z
            ga = g1 * (0.5 + dr_da) + g2 * (0.5 - dr_da)
            gb = g1 * (0.5 - dr_da) + g2 * (0.5 + dr_da)
            gc = (g1 - g2) * dr_dc
            if mask.any():
                ga = np.where(mask, 0.0, ga)
                gb = np.where(mask, 0.0, gb)
                gc = np.where(mask, 0.0, gc)
            return (ga if needed[0] else None,
                    gb if needed[1] else None,
                    gc if needed[2] else None)
        return bwd

    out = _record("eig2x2", (a, b, c), (lmax, lmin), build)
    lmax_t, lmin_t = out
    return lmax_t, lmin_t


# ---------------------------------------------------------------------------
# composites


def logsumexp(a, axis=1):
    """Stable log-sum-exp along `axis` (keepdims); the max shift is detached."""
    a = _as_tensor(a)
    m = np.max(a.values, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(m, dtype=a.dtype))
    return add(log(tsum(exp(shifted), axis=axis, keepdims=True)), Tensor(m, dtype=a.dtype))


def log_softmax(a, axis=1):
    return sub(a, logsumexp(a, axis=axis))


# ---------------------------------------------------------------------------
# spec-level entry points


def forward(graph, inputs, tape=None):
    """Run `graph` (a callable composing primitives) on `inputs` under a tape.

    Returns (output, tape); the tape records every primitive applied.
    """
    if tape is None:
        tape = Tape()
    with tape:
        out = graph(*inputs)
    return out, tape


def _check_degenerate(tape):
    if tape.degenerate_mask is not None and tape.degenerate_mask.any():
        raise DegenerateEigenvaluesError(
            "gradient requested at (near-)degenerate 2x2 eigenvalues",
            mask=tape.degenerate_mask)


def gradient(scalar_output, wrt):
    """d(scalar_output)/d(wrt) via one backward sweep over the recording tape.

    `wrt` may be a Tensor or a list of Tensors; each must have been marked
    requires_grad before the forward pass (or be tape-produced).
    """
    if scalar_output.size != 1:
        raise NotScalarError(f"gradient needs a scalar output, got shape {scalar_output.shape}")
    tape = scalar_output._prod_tape
    if tape is None:
        raise UnreachableError("output is not attached to any tape")
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    tape.backward(scalar_output)
    _check_degenerate(tape)
    grads = []
    for t in targets:
        if t.grad is None:
            raise UnreachableError("wrt tensor is not reachable from the output on this tape")
        grads.append(Tensor(t.grad.copy(), dtype=t.grad.dtype))
    return grads[0] if single else grads


def vjp(decoder_output, z, cotangent):
    """Jacobian-transpose product D(decoder)(z)^T @ cotangent, one backward pass."""
    cot = cotangent.values if isinstance(cotangent, Tensor) else np.asarray(cotangent)
    if cot.shape != decoder_output.shape:
        raise ShapeError(
            f"cotangent shape {cot.shape} != output shape {decoder_output.shape}")
    tape = decoder_output._prod_tape
    if tape is None:
        raise UnreachableError("decoder output is not attached to any tape")
    tape.backward(decoder_output, seed=cot)
    _check_degenerate(tape)
    if z.grad is None:
        raise UnreachableError("z is not reachable from the decoder output on this tape")
    return Tensor(z.grad.copy(), dtype=z.grad.dtype)
