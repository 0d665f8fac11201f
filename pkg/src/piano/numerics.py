"""Dense float64 tensors with a tape-based reverse-mode differentiation engine.

Only the handful of primitives the autoregressive model and its finite
difference loss need are provided. Every primitive whose inputs require
gradients is appended to the active :class:`Tape`; :func:`backward` walks the
tape in reverse creation order, which is a valid topological order.

Example
-------
>>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = tsum(w * w) * 0.5
>>> grads = backward(tape, loss)
>>> grads[w].tolist()
[1.0, 2.0, 3.0]
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array that may take part in differentiation.

    Leaves created with ``requires_grad=True`` are parameters. Results of
    primitives inherit ``requires_grad`` from their inputs and remember how to
    push an adjoint back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make numpy defer to our operators in mixed expressions
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of the differentiable operations of one forward pass.

    Use as a context manager; nested tapes are not supported and the inner
    one simply takes over recording until it exits.
    """

    def __init__(self):
        self.nodes = []
        self._previous = None

    def __enter__(self):
        global _ACTIVE
        self._previous = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._previous
        self._previous = None
        return False

    def __len__(self):
        return len(self.nodes)


_ACTIVE: Tape | None = None


def active_tape():
    return _ACTIVE


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data, parents, backward_fn):
    """Wrap ``data`` as the result of a primitive, registering it if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = False
    for p in parents:
        if p.requires_grad:
            needs = True
            break
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
        if _ACTIVE is not None:
            _ACTIVE.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ----------------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), back)


def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), back)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` fused into one tape node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    need_x, need_w = x.requires_grad, weight.requires_grad
    if bias is None:
        def back(g):
            return (g @ wd.T if need_x else None, xd.T @ g if need_w else None)

        return _record(out, (x, weight), back)

    bias = as_tensor(bias)
    if bias.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match width {wd.shape[1]}")
    out += bias.data

    def back_b(g):
        return (g @ wd.T if need_x else None, xd.T @ g if need_w else None,
                g.sum(axis=0))

    return _record(out, (x, weight, bias), back_b)


def _sigmoid(z):
    # tanh form is overflow-free and cheaper than masking on sign
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def back(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), back)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - t * t),)

    return _record(t, (x,), back)


def silu(x):
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)

    def back(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _record(xd * s, (x,), back)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalise over the last axis with population variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    k = x.shape[-1]
    if k < 2:
        raise ShapeError("layer_norm needs at least two features")
    if gain.shape != (k,) or bias.shape != (k,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({k},)")
    xd = x.data
    rk = 1.0 / k
    xc = xd - xd.sum(axis=-1, keepdims=True) * rk
    var = (xc * xc).sum(axis=-1, keepdims=True) * rk
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        # d/dx of (x - mean) / sqrt(var + eps), applied row-wise
        dx = inv * (gx - gx.sum(axis=-1, keepdims=True) * rk
                    - xhat * ((gx * xhat).sum(axis=-1, keepdims=True) * rk))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(xhat * gd + bias.data, (x, gain, bias), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), back)


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(out, tuple(tensors), back)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _record(x.data.reshape(shape), (x,), back)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape
    basic = _is_basic(index)

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            # fancy indices may repeat
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(x.data[index], dtype=DTYPE), (x,), back)


def tsum(x):
    """Sum of all entries, as a scalar tensor."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.array(x.data.sum()), (x,), back)


def mean(x, axis=None):
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.size

        def back(g):
            return (np.full(shape, g / n),)

        return _record(np.array(x.data.mean()), (x,), back)
    n = shape[axis]

    def back_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record(x.data.mean(axis=axis), (x,), back_axis)


def square(x):
    x = as_tensor(x)
    xd = x.data

    def back(g):
        return (2.0 * g * xd,)

    return _record(xd * xd, (x,), back)


def apply_left(op, x):
    """``op @ x`` for a constant matrix ``op`` (e.g. a stencil along axis 0)."""
    x = as_tensor(x)
    op = np.asarray(op, dtype=DTYPE)
    if op.shape[1] != x.shape[0]:
        raise ShapeError(f"operator {op.shape} cannot act on {x.shape}")

    def back(g):
        return (op.T @ g,)

    return _record(op @ x.data, (x,), back)


def apply_right(x, op):
    """``x @ op.T`` for a constant matrix ``op`` acting along the last axis."""
    x = as_tensor(x)
    op = np.asarray(op, dtype=DTYPE)
    if op.shape[1] != x.shape[-1]:
        raise ShapeError(f"operator {op.shape} cannot act on {x.shape}")

    def back(g):
        return (g @ op,)

    return _record(x.data @ op.T, (x,), back)


# ----------------------------------------------------------------------------
# Fused recurrent cells
#
# Each is numerically identical to composing the primitives above but records
# a single tape node, which keeps the per-time-step overhead of long rollouts
# low. The adjoints are written out by hand and checked against the composed
# versions in the test-suite.
# ----------------------------------------------------------------------------

def _silu_parts(z):
    s = _sigmoid(z)
    return z * s, s * (1.0 + z * (1.0 - s))


def dense_silu(x, weight, bias):
    """silu(x @ weight + bias) as one node."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense_silu: {x.shape} @ {weight.shape} + {bias.shape}")
    xd, wd = x.data, weight.data
    pre = xd @ wd
    pre += bias.data
    out, dsilu = _silu_parts(pre)
    need_x = x.requires_grad

    def back(g):
        gp = g * dsilu
        return (gp @ wd.T if need_x else None, xd.T @ gp, gp.sum(axis=0))

    return _record(out, (x, weight, bias), back)


def ssm_cell(h_prev, m, A, BD, C, gain, bias, eps=LN_EPS):
    """State-space step; returns ``[h | o]`` of shape ``(n, 2k)``.

    h = silu(LN(h_prev @ A + m @ B)),  o = h @ C + m @ D + m,
    with ``BD = [B | D]`` of shape ``(k, 2k)``.
    """
    h_prev, m = as_tensor(h_prev), as_tensor(m)
    k = A.shape[0]
    if m.shape[-1] != k or h_prev.shape != m.shape or BD.shape != (k, 2 * k):
        raise ShapeError("ssm_cell: inconsistent shapes")
    hp, md = h_prev.data, m.data
    Ad, BDd, Cd, gd = A.data, BD.data, C.data, gain.data
    mbd = md @ BDd
    pre = hp @ Ad
    pre += mbd[:, :k]
    rk = 1.0 / k
    xc = pre - pre.sum(axis=1, keepdims=True) * rk
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=1, keepdims=True) * rk + eps)
    xhat = xc * inv
    y = xhat * gd + bias.data
    h, dsilu = _silu_parts(y)
    out = np.empty((md.shape[0], 2 * k))
    out[:, :k] = h
    np.matmul(h, Cd, out=out[:, k:])
    out[:, k:] += mbd[:, k:]
    out[:, k:] += md
    need_h = h_prev.requires_grad

    def back(g):
        gh, go = g[:, :k], g[:, k:]
        dC = h.T @ go
        dy = (gh + go @ Cd.T) * dsilu
        dgain = (dy * xhat).sum(axis=0)
        dbias = dy.sum(axis=0)
        gx = dy * gd
        dpre = inv * (gx - gx.sum(axis=1, keepdims=True) * rk
                      - xhat * ((gx * xhat).sum(axis=1, keepdims=True) * rk))
        gcat = np.concatenate([dpre, go], axis=1)
        dm = gcat @ BDd.T
        dm += go
        dBD = md.T @ gcat
        if need_h:
            return dpre @ Ad.T, dm, hp.T @ dpre, dBD, dC, dgain, dbias
        return None, dm, None, dBD, dC, dgain, dbias

    return _record(out, (h_prev, m, A, BD, C, gain, bias), back)


def gru_cell(h_prev, m, W, U_zr, U_n, b):
    """Gated recurrent step with gates ordered [update, reset, candidate].

    z, r = sigmoid(m W_zr + h U_zr + b_zr); n = tanh(m W_n + (r*h) U_n + b_n);
    h_new = z*h + (1-z)*n.
    """
    h_prev, m = as_tensor(h_prev), as_tensor(m)
    k = U_n.shape[0]
    if W.shape != (m.shape[-1], 3 * k) or U_zr.shape != (k, 2 * k) or h_prev.shape[-1] != k:
        raise ShapeError("gru_cell: inconsistent shapes")
    hp, md = h_prev.data, m.data
    Wd, Uzr, Un = W.data, U_zr.data, U_n.data
    gx = md @ Wd
    gx += b.data
    zr = _sigmoid(gx[:, :2 * k] + hp @ Uzr)
    z, r = zr[:, :k], zr[:, k:]
    rh = r * hp
    n = np.tanh(gx[:, 2 * k:] + rh @ Un)
    out = n + z * (hp - n)
    need_h = h_prev.requires_grad

    def back(g):
        da = g * (1.0 - z) * (1.0 - n * n)
        dUn = rh.T @ da
        drh = da @ Un.T
        dzr = np.concatenate([g * (hp - n), drh * hp], axis=1) * (zr * (1.0 - zr))
        dgx = np.concatenate([dzr, da], axis=1)
        dW = md.T @ dgx
        dm = dgx @ Wd.T
        if need_h:
            dh = g * z + drh * r + dzr @ Uzr.T
            return dh, dm, dW, hp.T @ dzr, dUn, dgx.sum(axis=0)
        return None, dm, dW, None, dUn, dgx.sum(axis=0)

    return _record(out, (h_prev, m, W, U_zr, U_n, b), back)


# ----------------------------------------------------------------------------
# Reverse pass
# ----------------------------------------------------------------------------

def backward(tape, loss, params=()):
    """Propagate d(loss)/d(node) through ``tape``.

    Returns a dict mapping every leaf reached (and every tensor in
    ``params``) to its gradient array. Parameters the loss does not depend on
    get a zero gradient. Gradients left over from an earlier call are reset.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
        for p in node._parents:
            p.grad = None
    for p in params:
        p.grad = None

    leaves = {}
    if not loss.requires_grad:
        return {p: np.zeros_like(p.data) for p in params}
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
            if parent._backward is None:
                leaves[parent] = None

    out = {leaf: leaf.grad for leaf in leaves}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p] = p.grad
    return out
