"""A small reverse-mode autodiff core over numpy arrays.

Only the operations the match-mismatch models need are provided: valid
dilated 1-D convolution, ReLU, row-wise cosine similarity, concatenation,
flatten, a dense layer, sigmoid and binary cross entropy, plus Adam.

Tensors carry at most three axes (batch x channels x time). A node records
its parents and a closure that pushes its gradient back to them; graphs are
built only when some input requires a gradient.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError

COS_EPS = 1e-12
PROB_CLAMP = 1e-7
COL_BLOCK = 1024  # im2col columns per block


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A trainable tensor with Adam moment slots."""

    __slots__ = ("m", "v")

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def _col_blocks(n_b: int, t_out: int, width: int):
    """Split the (batch, time) output grid into blocks of about ``width`` columns."""
    if t_out >= width:
        for b in range(n_b):
            for s in range(0, t_out, width):
                yield b, b + 1, s, min(t_out, s + width)
    else:
        step = max(1, width // t_out)
        for b in range(0, n_b, step):
            yield b, min(n_b, b + step), 0, t_out


def _im2col_blocks(xt, k_size: int, dilation: int, t_out: int):
    """Yield ``(b0, b1, s, e, cols)`` with ``cols[(k, c), (b, t)] = xt[c, b, t + k*d]``.

    ``xt`` is channel-major ``(C, B, T)``. Columns are built one cache-sized
    block at a time into a reused buffer, so a block is only valid until the
    next one is requested.
    """
    c_in, n_b, _ = xt.shape
    blocks = list(_col_blocks(n_b, t_out, COL_BLOCK))
    b_max = max(b1 - b0 for b0, b1, _, _ in blocks)
    t_max = max(e - s for _, _, s, e in blocks)
    buf = np.empty((k_size, c_in, b_max, t_max), dtype=xt.dtype)
    for b0, b1, s, e in blocks:
        cols = buf[:, :, : b1 - b0, : e - s]
        for k in range(k_size):
            off = k * dilation
            cols[k] = xt[:, b0:b1, s + off : e + off]
        yield b0, b1, s, e, cols.reshape(k_size * c_in, -1)


def _valid_conv(xt, w_mat, k_size: int, dilation: int, t_out: int, bias=None, relu=False):
    """Channel-major valid convolution ``(C, B, T) -> (O, B, t_out)``."""
    c_out = w_mat.shape[0]
    out = np.empty((c_out, xt.shape[1], t_out), dtype=xt.dtype)
    for b0, b1, s, e, cols in _im2col_blocks(xt, k_size, dilation, t_out):
        blk = w_mat @ cols
        if bias is not None:
            blk += bias[:, None]
        if relu:
            np.maximum(blk, 0, out=blk)
        out[:, b0:b1, s:e] = blk.reshape(c_out, b1 - b0, e - s)
    return out


def conv1d(x, w, bias=None, dilation: int = 1, relu: bool = False, name: str = "conv1d") -> Tensor:
    """Valid dilated convolution: ``out[b,o,t] = bias[o] + sum_{c,k} w[o,c,k] x[b,c,t+k*d]``.

    ``x`` is ``[B, C_in, T]``, ``w`` is ``[C_out, C_in, K]`` and the output
    has ``T - (K - 1) * dilation`` time steps. ``relu=True`` applies a ReLU
    inside the same pass (same result as ``relu(conv1d(...))``).
    """
    x, w = as_tensor(x), as_tensor(w)
    bias = None if bias is None else as_tensor(bias)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"{name}: expected x[B,C,T] and w[O,C,K], got {x.shape} and {w.shape}")
    n_b, c_in, t_in = x.shape
    c_out, c_w, k_size = w.shape
    if c_w != c_in:
        raise ShapeError(f"{name}: input has {c_in} channels, kernel expects {c_w}")
    span = (k_size - 1) * dilation
    t_out = t_in - span
    if t_out <= 0:
        raise ShapeError(
            f"{name}: input of {t_in} samples is too short for a receptive field of "
            f"{span + 1} samples (K={k_size}, dilation={dilation})"
        )
    dtype = np.result_type(x.data, w.data)
    # Work channel-major: (C, B, T). The returned tensor is a [B, O, T] view.
    xt = x.data.transpose(1, 0, 2).astype(dtype, copy=False)
    wd = w.data.astype(dtype, copy=False)
    w_mat = wd.transpose(0, 2, 1).reshape(c_out, k_size * c_in)
    b_vec = None if bias is None else bias.data.astype(dtype, copy=False)
    out = _valid_conv(xt, w_mat, k_size, dilation, t_out, b_vec, relu)

    def backward(g):
        gt = g.transpose(1, 0, 2)
        if relu:
            gt = gt * (out > 0)
        if w.requires_grad:
            gw = np.zeros((c_out, k_size * c_in), dtype=dtype)
            for b0, b1, s, e, cols in _im2col_blocks(xt, k_size, dilation, t_out):
                g_blk = np.ascontiguousarray(gt[:, b0:b1, s:e]).reshape(c_out, -1)
                gw += g_blk @ cols.T
            _accumulate(w, np.ascontiguousarray(gw.reshape(c_out, k_size, c_in).transpose(0, 2, 1)))
        if x.requires_grad:
            # Input gradient = valid convolution of the zero-padded output
            # gradient with the time-reversed, transposed kernel.
            gpad = np.zeros((c_out, n_b, t_in + span), dtype=dtype)
            gpad[:, :, span : span + t_out] = gt
            w_flip = wd[:, :, ::-1].transpose(2, 0, 1).reshape(k_size * c_out, c_in).T
            gx = _valid_conv(gpad, np.ascontiguousarray(w_flip), k_size, dilation, t_in)
            _accumulate(x, gx.transpose(1, 0, 2))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gt.sum(axis=(1, 2)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out.transpose(1, 0, 2), parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * mask)

    return _node(out, (x,), backward)


def cosine_rows(a, b, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``.

    ``a`` is ``[B, Ca, T]``, ``b`` is ``[B, Cb, T]``; the result is
    ``[B, Ca, Cb]``. ``eps`` in the denominator maps zero rows to ~0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"cosine_rows: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt(np.einsum("bct,bct->bc", ad, ad))
    nb = np.sqrt(np.einsum("bct,bct->bc", bd, bd))
    dots = np.matmul(ad, bd.transpose(0, 2, 1))
    denom = na[:, :, None] * nb[:, None, :] + eps
    out = dots / denom

    def backward(g):
        g_dots = g / denom
        g_denom = -(g * dots) / denom**2
        g_na = np.einsum("bij,bj->bi", g_denom, nb)
        g_nb = np.einsum("bij,bi->bj", g_denom, na)
        if a.requires_grad:
            safe = np.where(na > 0, na, 1.0)
            ga = np.matmul(g_dots, bd) + (g_na / safe)[:, :, None] * ad
            _accumulate(a, ga)
        if b.requires_grad:
            safe = np.where(nb > 0, nb, 1.0)
            gb = np.matmul(g_dots.transpose(0, 2, 1), ad) + (g_nb / safe)[:, :, None] * bd
            _accumulate(b, gb)

    return _node(out, (a, b), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _node(out, tensors, backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        _accumulate(x, g.reshape(shape))

    return _node(out, (x,), backward)


def dense(x, w, bias=None) -> Tensor:
    """``x[B, N] @ w[N, M] + bias[M]``."""
    x, w = as_tensor(x), as_tensor(w)
    bias = None if bias is None else as_tensor(bias)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        _accumulate(w, x.data.T @ g)
        _accumulate(x, g @ w.data.T)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    # Branch on sign so exp never overflows.
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _node(out, (x,), backward)


def bce_loss(p, y) -> Tensor:
    """Mean binary cross entropy; ``p`` is clamped to ``[1e-7, 1 - 1e-7]``."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=p.data.dtype).reshape(p.shape)
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.data.size
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))

    def backward(g):
        inside = (p.data > PROB_CLAMP) & (p.data < 1.0 - PROB_CLAMP)
        gp = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        _accumulate(p, g * gp * inside)

    return _node(np.asarray(loss, dtype=p.data.dtype), (p,), backward)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def adam_step(
    params,
    grads=None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-7,
    t: int = 1,
):
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are left untouched. Returns ``params``.
    """
    if t < 1:
        raise ArgumentError(f"Adam step counter must be >= 1, got {t}")
    if grads is None:
        grads = [p.grad for p in params]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.data -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
    return params
