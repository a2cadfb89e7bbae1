"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation builds the output eagerly and, when gradients are enabled
and some input requires them, attaches a pullback closure. backward() on a
scalar output topologically orders the reachable records and replays them
in reverse. Reductions use numpy's fixed-order sums, so repeated runs on
identical inputs are bit-identical.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf (signals blow-up)."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends pullback recording (rollouts, eval)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "lr_scale", "_parents", "_pullback")

    def __init__(self, data, requires_grad=False):
        self.data = _finite(np.asarray(data, dtype=np.float64))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.lr_scale = None  # optional per-coordinate optimizer step scaling
        self._parents = ()
        self._pullback = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, pullback):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._pullback = pullback
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Topologically ordered record of the ops that reach one output."""

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.order = order

    def backward(self, root):
        root.grad = np.ones_like(root.data)
        for node in reversed(self.order):
            if node._pullback is not None and node.grad is not None:
                node._pullback(node.grad)


def backward(out):
    """Accumulate gradients of a scalar output into every reachable .grad."""
    if out.data.size != 1:
        raise ValueError("backward requires a scalar output")
    if not out.requires_grad:
        raise ValueError("output does not require gradients")
    Tape(out).backward(out)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def pull(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), pull)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def pull(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), pull)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def pull(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), pull)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def pull(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), pull)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0  # relu'(0) := 0

    def pull(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), pull)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def pull(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), pull)


def sin(a):
    a = as_tensor(a)

    def pull(g):
        _accum(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), pull)


def cos(a):
    a = as_tensor(a)

    def pull(g):
        _accum(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), pull)


def pow3(a):
    a = as_tensor(a)

    def pull(g):
        _accum(a, g * 3.0 * a.data * a.data)

    return _make(a.data ** 3, (a,), pull)


# ----------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), pull)


def mean(a):
    a = as_tensor(a)
    n = a.data.size

    def pull(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _make(a.data.mean(), (a,), pull)


def l1_norm(a):
    """Sum of absolute values; subgradient 0 at exact zeros."""
    a = as_tensor(a)

    def pull(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data).sum(), (a,), pull)


def l2_norm(a, axis=None, keepdims=False):
    """Euclidean norm over the given axes; subgradient 0 where the norm is 0."""
    a = as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    out_data = np.sqrt(sq)

    def pull(g):
        g = np.asarray(g)
        denom = out_data
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            denom = np.expand_dims(denom, axis)
        safe = np.where(denom > 0.0, denom, 1.0)
        _accum(a, g * a.data / safe)

    return _make(out_data, (a,), pull)


# ----------------------------------------------------------------- structural


def reshape(a, shape):
    a = as_tensor(a)

    def pull(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), pull)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def pull(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(a.data[idx].copy(), (a,), pull)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def pull(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(idx)])
            offset += n

    return _make(out_data, tuple(parts), pull)


# ---------------------------------------------------------------- convolution


def conv2d_periodic(x, kernels):
    """Periodic 2-d cross-correlation.

    x: (..., C, H, W), kernels: (O, C, k, k) with k odd and H, W >= k.
    output(o, i, j) = sum_{c,s,t} kernels(o, c, s+L, t+L) * x(c, i+s mod H, j+t mod W).
    Differentiable in both arguments.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3]:
        raise ValueError("kernels must have shape (O, C, k, k)")
    O, C, k, _ = kd.shape
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    if x.data.ndim < 3 or x.data.shape[-3] != C:
        raise ValueError("input channels do not match kernels")
    H, W = x.data.shape[-2:]
    if H < k or W < k:
        raise ValueError("field smaller than kernel")
    L = k // 2
    lead = x.data.shape[:-3]
    xf = x.data.reshape((-1, C, H, W))
    B = xf.shape[0]

    acc = np.zeros((O, B, H, W))
    for i, s in enumerate(range(-L, L + 1)):
        for j, t in enumerate(range(-L, L + 1)):
            shifted = np.roll(xf, (-s, -t), axis=(2, 3))
            acc += np.tensordot(kd[:, :, i, j], shifted, axes=([1], [1]))
    out_data = np.ascontiguousarray(np.moveaxis(acc, 0, 1)).reshape(lead + (O, H, W))

    def pull(g):
        gf = g.reshape((B, O, H, W))
        if x.requires_grad:
            gx = np.zeros((C, B, H, W))
            for i, s in enumerate(range(-L, L + 1)):
                for j, t in enumerate(range(-L, L + 1)):
                    contrib = np.tensordot(kd[:, :, i, j], gf, axes=([0], [1]))
                    gx += np.roll(contrib, (s, t), axis=(2, 3))
            _accum(x, np.moveaxis(gx, 0, 1).reshape(x.data.shape))
        if kernels.requires_grad:
            gk = np.zeros_like(kd)
            for i, s in enumerate(range(-L, L + 1)):
                for j, t in enumerate(range(-L, L + 1)):
                    shifted = np.roll(xf, (-s, -t), axis=(2, 3))
                    gk[:, :, i, j] = np.tensordot(gf, shifted, axes=([0, 2, 3], [0, 2, 3]))
            _accum(kernels, gk)

    return _make(out_data, (x, kernels), pull)


# -------------------------------------------------------------------- Fourier


class ComplexField:
    """Fourier coefficients as a pair of real tensors (re, im)."""

    def __init__(self, re, im):
        if re.data.shape != im.data.shape:
            raise ValueError("re/im shape mismatch")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.data.shape

    def complex_data(self):
        return self.re.data + 1j * self.im.data

    def scale_by(self, w):
        """Multiply by a constant complex array (elementwise, broadcastable)."""
        w = np.asarray(w, dtype=np.complex128)
        wr, wi = w.real, w.imag
        re = sub(mul(self.re, wr), mul(self.im, wi))
        im = add(mul(self.re, wi), mul(self.im, wr))
        return ComplexField(re, im)

    def __add__(self, other):
        return ComplexField(add(self.re, other.re), add(self.im, other.im))


def dft2(x):
    """Unnormalized forward DFT over the last two axes."""
    x = as_tensor(x)
    F = np.fft.fft2(x.data)
    n = x.data.shape[-2] * x.data.shape[-1]

    def pull_re(g):
        _accum(x, (n * np.fft.ifft2(g)).real)

    def pull_im(g):
        _accum(x, -(n * np.fft.ifft2(g)).imag)

    re = _make(F.real, (x,), pull_re)
    im = _make(F.imag, (x,), pull_im)
    return ComplexField(re, im)


def idft2(F):
    """Inverse DFT (1/(H*W) normalization); returns the real part."""
    n = F.shape[-2] * F.shape[-1]
    out_data = np.fft.ifft2(F.complex_data()).real
    re, im = F.re, F.im

    def pull(g):
        G = np.fft.fft2(g)
        _accum(re, G.real / n)
        _accum(im, G.imag / n)

    return _make(out_data, (re, im), pull)


def spectral_mix(x, w_re, w_im, modes):
    """Mix retained Fourier modes by trainable complex weights per channel pair.

    x: (..., C, H, W); w_re/w_im: (O, C, 2m-1, 2m-1) indexed by integer
    wavenumbers in [-(m-1), m-1] per axis. Equivalent to dft2 -> per-mode
    complex channel mixing on the retained block (zero elsewhere) -> idft2,
    fused into one differentiable op.
    """
    x, w_re, w_im = as_tensor(x), as_tensor(w_re), as_tensor(w_im)
    O, C, mh, mw = w_re.data.shape
    if w_im.data.shape != w_re.data.shape:
        raise ValueError("w_re/w_im shape mismatch")
    if mh != 2 * modes - 1 or mw != 2 * modes - 1:
        raise ValueError("weight block does not match mode count")
    H, W = x.data.shape[-2:]
    if x.data.shape[-3] != C:
        raise ValueError("input channels do not match weights")
    if 2 * modes - 1 > min(H, W):
        raise ValueError("mode count too large for the grid")
    freqs = np.arange(-(modes - 1), modes)
    rows = freqs % H
    cols = freqs % W
    Wc = w_re.data + 1j * w_im.data

    X = np.fft.fft2(x.data)
    Xm = X[..., rows[:, None], cols[None, :]]
    Ym = np.einsum("ocuv,...cuv->...ouv", Wc, Xm)
    Yhat = np.zeros(x.data.shape[:-3] + (O, H, W), dtype=np.complex128)
    Yhat[..., rows[:, None], cols[None, :]] = Ym
    out_data = np.fft.ifft2(Yhat).real

    def pull(g):
        Gm = (np.fft.fft2(g) / (H * W))[..., rows[:, None], cols[None, :]]
        if w_re.requires_grad or w_im.requires_grad:
            Gf = Gm.reshape((-1,) + Gm.shape[-3:])
            Xf = Xm.reshape((-1,) + Xm.shape[-3:])
            gw = np.einsum("bouv,bcuv->ocuv", Gf, np.conj(Xf))
            _accum(w_re, gw.real)
            _accum(w_im, gw.imag)
        if x.requires_grad:
            Gx = np.einsum("ocuv,...ouv->...cuv", np.conj(Wc), Gm)
            full = np.zeros(x.data.shape, dtype=np.complex128)
            full[..., rows[:, None], cols[None, :]] = Gx
            _accum(x, (H * W) * np.fft.ifft2(full).real)

    return _make(out_data, (x, w_re, w_im), pull)


# -------------------------------------------------------------- verification


def gradient_check(f, params, step=1e-5):
    """Compare tape gradients of f() against central finite differences.

    f rebuilds the scalar loss from the given parameter tensors. Returns the
    worst relative error max(|ad - fd|) / max(|fd|, 1e-12) over all entries.
    """
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError("parameter received no gradient")
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        with no_grad():
            for idx in range(flat.size):
                saved = flat[idx]
                flat[idx] = saved + step
                hi = f().item()
                flat[idx] = saved - step
                lo = f().item()
                flat[idx] = saved
                fd = (hi - lo) / (2.0 * step)
                err = abs(gflat[idx] - fd) / max(abs(fd), 1e-12)
                worst = max(worst, err)
    return worst


sum = tsum  # spec-facing name for the reduction
