"""Dense-tensor arithmetic with reverse-mode differentiation.

Feature maps use the N x C x H x W layout throughout.  Each op records a
backward closure on the output tensor; ``Tensor.backward`` walks the graph
in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad``.

Precision: pass float64 arrays for gradient-check work, float32 for
training.  Ops preserve the input dtype.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense n-d array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Populate grads of every reachable tensor; loss must be scalar."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Scalar-only convenience accessor.
    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; accepts Tensors, arrays, and python scalars.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), _const(-1.0, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, _const(-1.0, self.dtype)))

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _const(-1.0, self.dtype))


class Parameter(Tensor):
    """Trainable tensor; optimizer state lives in the optimizer."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _const(v, dtype):
    return Tensor(np.asarray(v, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (broadcast-source) shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


# Attention maps (N,1,H,W) scale feature stacks (N,C,H,W) by broadcasting.
broadcast_mul = mul


def div(a, b):
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def sigmoid(x):
    # exp overflow for very negative inputs just saturates to 0; silence it.
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def log_sigmoid(x):
    """log(sigmoid(x)), computed stably so it never underflows to log(0)."""
    z = x.data
    out_data = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    with np.errstate(over="ignore"):
        sig_neg = 1.0 / (1.0 + np.exp(z))  # sigmoid(-x) = d log_sigmoid / dx

    def backward(g):
        x._accumulate(g * sig_neg)

    return _make(out_data, (x,), backward)


def relu(x):
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _make(out_data, (x,), backward)


def exp(x):
    out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), backward)


def log(x):
    out_data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _make(out_data, (x,), backward)


def pow(x, p):
    p = float(p)
    out_data = x.data ** p

    def backward(g):
        x._accumulate(g * p * x.data ** (p - 1.0))

    return _make(out_data, (x,), backward)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient is zero outside the band."""
    out_data = np.clip(x.data, lo, hi)

    def backward(g):
        x._accumulate(g * ((x.data >= lo) & (x.data <= hi)))

    return _make(out_data, (x,), backward)


def smooth_l1(x):
    """Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = np.abs(x.data)
    out_data = np.where(a < 1.0, 0.5 * x.data * x.data, a - 0.5)

    def backward(g):
        x._accumulate(g * np.clip(x.data, -1.0, 1.0))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x):
    out_data = x.data.sum()

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward)


def mean(x):
    n = x.data.size
    out_data = x.data.mean()

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.data.shape))

    return _make(out_data, (x,), backward)


def sum_axis(x, axis, keepdims=True):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_channels(a, b):
    """Concatenate along C; N, H, W must match (size-1 N broadcasts)."""
    da, db = a.data, b.data
    if da.ndim != 4 or db.ndim != 4:
        raise ValueError("concat_channels expects N x C x H x W tensors")
    n = max(da.shape[0], db.shape[0])
    if da.shape[0] not in (1, n) or db.shape[0] not in (1, n):
        raise ValueError(f"batch mismatch: {da.shape} vs {db.shape}")
    if da.shape[2:] != db.shape[2:]:
        raise ValueError(f"spatial mismatch: {da.shape} vs {db.shape}")
    da_b = np.broadcast_to(da, (n,) + da.shape[1:])
    db_b = np.broadcast_to(db, (n,) + db.shape[1:])
    out_data = np.concatenate([da_b, db_b], axis=1)
    ca = da.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g[:, :ca], a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g[:, ca:], b.data.shape))

    return _make(out_data, (a, b), backward)


def channel_max(x):
    """Max over C -> N x 1 x H x W; gradient flows to the first argmax."""
    idx = np.argmax(x.data, axis=1)[:, None]
    out_data = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        x._accumulate(gx)

    return _make(out_data, (x,), backward)


def concat_rows(a, b):
    """Concatenate two tensors along axis 0 (used to stack conv kernels)."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(
            f"concat_rows shape mismatch: {a.data.shape} vs {b.data.shape}"
        )
    out_data = np.concatenate([a.data, b.data], axis=0)
    na = a.data.shape[0]

    def backward(g):
        a._accumulate(g[:na])
        b._accumulate(g[na:])

    return _make(out_data, (a, b), backward)


def slice_channels(x, start, stop):
    """View of channels [start, stop) of an N x C x H x W tensor."""
    if not (0 <= start < stop <= x.data.shape[1]):
        raise ValueError(
            f"bad channel slice [{start}, {stop}) for shape {x.data.shape}"
        )
    out_data = x.data[:, start:stop]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        x._accumulate(gx)

    return _make(out_data, (x,), backward)


def channel_mean(x):
    c = x.data.shape[1]
    out_data = x.data.mean(axis=1, keepdims=True)

    def backward(g):
        x._accumulate(np.broadcast_to(g / c, x.data.shape))

    return _make(out_data, (x,), backward)


def upsample_nearest(x, factor):
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    f = int(factor)
    out_data = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def backward(g):
        n, c, ho, wo = x.data.shape
        x._accumulate(g.reshape(n, c, ho, f, wo, f).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def gather_cells(x, batch_idx, rows, cols):
    """Gather per-cell channel vectors from N x C x H x W -> M x C."""
    b = np.asarray(batch_idx, dtype=np.int64)
    i = np.asarray(rows, dtype=np.int64)
    j = np.asarray(cols, dtype=np.int64)
    out_data = x.data[b, :, i, j]
    c = x.data.shape[1]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(
            gx,
            (b[:, None], np.arange(c)[None, :], i[:, None], j[:, None]),
            g,
        )
        x._accumulate(gx)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
    )
    return np.ascontiguousarray(cols).reshape(n, c * k * k, ho * wo)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of N x C_in x H x W with C_out x C_in x k x k."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and "
            f"{kernel.data.shape}"
        )
    n, cin, h, w = x.data.shape
    cout, ckin, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if ckin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {ckin}")
    if padding < 0 or stride < 1:
        raise ValueError(f"invalid stride/padding: {stride}, {padding}")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"zero-sized conv output for input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    if k == 1 and stride == 1 and padding == 0:
        # 1x1 fast path: the im2col matrix is just a reshape.
        xp = x.data
        cols = xp.reshape(n, cin, ho * wo)
    elif cout * cin * k * k <= 64:
        # Tiny kernels (attention squeeze maps): shift-and-add over views is
        # cheaper than building the im2col matrix.
        if padding:
            xp = np.pad(
                x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
            )
        else:
            xp = x.data
        out_data = np.zeros((n, cout, ho, wo), dtype=x.data.dtype)
        for co in range(cout):
            acc = out_data[:, co]
            for ci in range(cin):
                for a in range(k):
                    for b in range(k):
                        acc += kernel.data[co, ci, a, b] * xp[
                            :, ci, a : a + stride * ho : stride,
                            b : b + stride * wo : stride,
                        ]
        if bias is not None:
            out_data += bias.data.reshape(1, cout, 1, 1)

        def backward_small(g):
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if kernel.requires_grad:
                gw = np.zeros_like(kernel.data)
                for co in range(cout):
                    gco = g[:, co]
                    for ci in range(cin):
                        for a in range(k):
                            for b in range(k):
                                gw[co, ci, a, b] = np.sum(
                                    gco
                                    * xp[:, ci, a : a + stride * ho : stride,
                                         b : b + stride * wo : stride]
                                )
                kernel._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for co in range(cout):
                    gco = g[:, co]
                    for ci in range(cin):
                        for a in range(k):
                            for b in range(k):
                                gxp[:, ci, a : a + stride * ho : stride,
                                    b : b + stride * wo : stride] += (
                                    kernel.data[co, ci, a, b] * gco
                                )
                if padding:
                    gx = gxp[:, :, padding:-padding, padding:-padding]
                else:
                    gx = gxp
                x._accumulate(gx)

        parents = (x, kernel) if bias is None else (x, kernel, bias)
        return _make(out_data, parents, backward_small)
    else:
        if padding:
            xp = np.pad(
                x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
            )
        else:
            xp = x.data
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(cout, cin * k * k)
    out_data = np.matmul(wmat, cols)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1)
    out_data = out_data.reshape(n, cout, ho, wo)

    def backward(g):
        go = g.reshape(n, cout, ho * wo)
        if bias is not None and bias.requires_grad:
            bias._accumulate(go.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(gw.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, go)
            if k == 1 and stride == 1 and padding == 0:
                x._accumulate(gcols.reshape(n, cin, ho, wo))
                return
            gcols = gcols.reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, :, a : a + stride * ho : stride,
                        b : b + stride * wo : stride] += gcols[:, :, a, b]
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding]
            else:
                gx = gxp
            x._accumulate(gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, parents, backward)


def conv2d_pair(x, kernel_a, bias_a, kernel_b, bias_b, stride=1, padding=1):
    """Two same-shape convolutions of one input, sharing the im2col matrix.

    Each output is bitwise identical to the corresponding standalone
    ``conv2d`` call (the per-kernel GEMMs are unchanged); only the column
    matrix construction and the backward input scatter are shared.
    """
    if kernel_a.data.shape != kernel_b.data.shape:
        raise ValueError(
            f"paired kernels must share a shape, got {kernel_a.data.shape} "
            f"and {kernel_b.data.shape}"
        )
    n, cin, h, w = x.data.shape
    cout, ckin, k, _ = kernel_a.data.shape
    if ckin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {ckin}")
    if cout * cin * k * k <= 64 and not (k == 1 and stride == 1 and padding == 0):
        # Tiny kernels go through conv2d's shift-and-add path; run them
        # separately so each half stays bitwise equal to a standalone call.
        return concat_channels(
            conv2d(x, kernel_a, bias_a, stride, padding),
            conv2d(x, kernel_b, bias_b, stride, padding),
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if k == 1 and stride == 1 and padding == 0:
        xp = x.data
        cols = xp.reshape(n, cin, ho * wo)
    else:
        if padding:
            xp = np.pad(
                x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
            )
        else:
            xp = x.data
        cols = _im2col(xp, k, stride, ho, wo)
    wmat_a = kernel_a.data.reshape(cout, cin * k * k)
    wmat_b = kernel_b.data.reshape(cout, cin * k * k)
    out_a = (np.matmul(wmat_a, cols) + bias_a.data.reshape(1, cout, 1)) \
        .reshape(n, cout, ho, wo)
    out_b = (np.matmul(wmat_b, cols) + bias_b.data.reshape(1, cout, 1)) \
        .reshape(n, cout, ho, wo)
    out_data = np.concatenate([out_a, out_b], axis=1)

    def backward(g):
        # Bit-identity only constrains the forward; the backward fuses both
        # halves into single GEMMs over the stacked output channels.
        go = g.reshape(n, 2 * cout, ho * wo)
        gb = go.sum(axis=(0, 2))
        if bias_a.requires_grad:
            bias_a._accumulate(gb[:cout])
        if bias_b.requires_grad:
            bias_b._accumulate(gb[cout:])
        if kernel_a.requires_grad or kernel_b.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
            if kernel_a.requires_grad:
                kernel_a._accumulate(gw[:cout].reshape(kernel_a.data.shape))
            if kernel_b.requires_grad:
                kernel_b._accumulate(gw[cout:].reshape(kernel_b.data.shape))
        if x.requires_grad:
            wmat = np.concatenate([wmat_a, wmat_b], axis=0)
            gcols = np.matmul(wmat.T, go)
            if k == 1 and stride == 1 and padding == 0:
                x._accumulate(gcols.reshape(n, cin, ho, wo))
                return
            gcols = gcols.reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, :, a : a + stride * ho : stride,
                        b : b + stride * wo : stride] += gcols[:, :, a, b]
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding]
            else:
                gx = gxp
            x._accumulate(gx)

    return _make(out_data, (x, kernel_a, bias_a, kernel_b, bias_b), backward)


def conv2d_reference(x, kernel, bias=None, stride=1, padding=0):
    """Naive six-nested-loop cross-correlation used as the conv oracle."""
    n, cin, h, w = x.shape
    cout, _, k, _ = kernel.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for io in range(ho):
                for jo in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for a in range(k):
                            for b in range(k):
                                acc += (
                                    xp[ni, ci, io * stride + a, jo * stride + b]
                                    * kernel[co, ci, a, b]
                                )
                    out[ni, co, io, jo] = acc
            if bias is not None:
                out[ni, co] += bias[co]
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mh = m / bc1
            vh = v / bc2
            p.data = p.data - (self.lr * mh / (np.sqrt(vh) + self.eps)).astype(
                p.data.dtype
            )
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(fn, tensors, step=1e-5):
    """Max relative error between analytic grads and central differences.

    ``fn`` must rebuild its forward pass from the given tensors on every
    call and return a scalar Tensor.  Tensors should hold float64 data.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors
    ]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gn = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            dn = fn().item()
            flat[i] = orig
            gn[i] = (up - dn) / (2.0 * step)
        gn = gn.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1.0)
        err = np.abs(ga - gn) / denom
        if err.size:
            worst = max(worst, float(err.max()))
        t.zero_grad()
    return worst
