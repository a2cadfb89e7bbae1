"""Difference layers: fixed stencils, moment-constrained trainable kernels,
flipping kernels, and hypernetwork-driven per-pixel kernels.

Fields are (..., C, H, W) with x along the H axis and y along the W axis;
an optional leading batch axis passes through untouched. Every trainable
path runs on autodiff tensors.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import moments as mk


def coordinate_channels(H, W):
    """Normalized grid coordinates in [0,1): channel 0 is x, channel 1 is y."""
    x = np.arange(H) / H
    y = np.arange(W) / W
    X, Y = np.meshgrid(x, y, indexing="ij")
    return np.stack([X, Y])


def append_coords(state):
    """Concatenate the two coordinate channels onto (..., C, H, W)."""
    H, W = state.shape[-2:]
    coords = coordinate_channels(H, W)
    coords = np.broadcast_to(coords, state.shape[:-3] + (2, H, W))
    return ad.concat([state, ad.Tensor(coords)], axis=-3)


def _depthwise(state, kernel):
    """Convolve every channel (and batch entry) with one (k,k) kernel tensor."""
    H, W = state.shape[-2:]
    k = kernel.shape[-1]
    flat = ad.reshape(state, (-1, 1, H, W))
    out = ad.conv2d_periodic(flat, ad.reshape(kernel, (1, 1, k, k)))
    return ad.reshape(out, state.shape)


def fixed_stencil(spec):
    """Classical second-order central stencil embedded in a (2L+1)^2 kernel."""
    L = spec.L
    K = np.zeros((spec.ksize, spec.ksize))
    if (spec.p, spec.q) == (1, 0):
        K[L - 1, L] = -1.0 / (2 * spec.dx)
        K[L + 1, L] = 1.0 / (2 * spec.dx)
    elif (spec.p, spec.q) == (0, 1):
        K[L, L - 1] = -1.0 / (2 * spec.dy)
        K[L, L + 1] = 1.0 / (2 * spec.dy)
    elif (spec.p, spec.q) == (2, 0):
        K[L - 1:L + 2, L] = np.array([1.0, -2.0, 1.0]) / spec.dx ** 2
    elif (spec.p, spec.q) == (0, 2):
        K[L, L - 1:L + 2] = np.array([1.0, -2.0, 1.0]) / spec.dy ** 2
    else:
        raise ValueError(f"unsupported derivative ({spec.p},{spec.q}) for fixed stencils")
    return K


def apply_fixed_fdm(field, spec):
    """Second-order central difference of a (..., H, W) or (..., C, H, W) field."""
    K = fixed_stencil(spec)
    squeeze = field.data.ndim == 2 if isinstance(field, ad.Tensor) else np.ndim(field) == 2
    t = ad.as_tensor(field)
    if squeeze:
        t = ad.reshape(t, (1,) + t.shape)
    out = _depthwise(t, ad.Tensor(K))
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


class DifferenceLayer:
    """Base: a derivative approximation D such that D(U) ~ d^{p+q}U/dx^p dy^q."""

    kind = "fixed_fdm"

    def __init__(self, spec):
        self.spec = spec

    def parameters(self):
        return []

    def reg_terms(self):
        """Tensors whose L1 norm the training loss penalizes."""
        return []

    def apply_channels(self, state, coeff=None):
        raise NotImplementedError


class FixedFdm(DifferenceLayer):
    def apply_channels(self, state, coeff=None):
        return _depthwise(state, ad.Tensor(fixed_stencil(self.spec)))


class MomentLayer(DifferenceLayer):
    """Trainable kernel constrained to the (p,q) derivative at order r+1."""

    kind = "moment"

    def __init__(self, spec):
        super().__init__(spec)
        base, basis = mk.constrained_basis(spec)
        self._base = base
        self._basis = basis
        self.m = basis.shape[0]
        self.theta = ad.Tensor(np.zeros(self.m), requires_grad=True)
        # Free-direction kernels have norms growing like u! v! / (dx^u dy^v),
        # so raw theta coordinates are wildly ill-conditioned on fine grids;
        # the optimizer reads lr_scale to take steps of uniform kernel size.
        self.theta.lr_scale = 1.0 / np.sqrt((basis * basis).sum(axis=(1, 2)))

    def parameters(self):
        return [self.theta]

    def reg_terms(self):
        return [self.theta]

    def kernel(self):
        mix = ad.tsum(ad.mul(ad.reshape(self.theta, (self.m, 1, 1)), ad.Tensor(self._basis)), axis=0)
        return ad.add(ad.Tensor(self._base), mix)

    def apply_channels(self, state, coeff=None):
        return _depthwise(state, self.kernel())


def apply_moment(field, layer):
    return layer.apply_channels(field)


class TfdlLayer(MomentLayer):
    """Moment kernel with a per-pixel flip chosen by the sign of a coefficient.

    Where the coefficient is positive (or zero) the plain kernel applies;
    where negative, the flipped kernel K'(s,t) = -K(-s,t) (flip along x for
    (1,0), along y for (0,1)), which approximates the same derivative from
    the opposite side.
    """

    kind = "tfdl"

    def __init__(self, spec):
        if (spec.p, spec.q) not in ((1, 0), (0, 1)):
            raise ValueError("flipping kernels are defined for first derivatives only")
        super().__init__(spec)
        flip = mk.flip_x if spec.p == 1 else mk.flip_y
        self._base_flip = flip(self._base)
        self._basis_flip = np.stack([flip(b) for b in self._basis])

    def flipped_kernel(self):
        mix = ad.tsum(ad.mul(ad.reshape(self.theta, (self.m, 1, 1)), ad.Tensor(self._basis_flip)), axis=0)
        return ad.add(ad.Tensor(self._base_flip), mix)

    def apply_channels(self, state, coeff=None):
        if coeff is None:
            raise ValueError("TFDL needs the coefficient field that multiplies this derivative")
        cdata = coeff.data if isinstance(coeff, ad.Tensor) else np.asarray(coeff)
        mask = (cdata >= 0.0).astype(np.float64)  # ties use the unflipped kernel
        if mask.ndim == state.data.ndim - 1:
            mask = mask[..., None, :, :]  # broadcast over channels
        plain = _depthwise(state, self.kernel())
        flipped = _depthwise(state, self.flipped_kernel())
        return ad.add(ad.mul(plain, mask), ad.mul(flipped, 1.0 - mask))


def apply_tfdl(field, coeff_field, layer):
    return layer.apply_channels(field, coeff_field)


class Hypernetwork:
    """Three periodic conv layers (ReLU after the first two) predicting the
    per-pixel free moment entries; the final layer starts at zero so the
    layer begins as the classical constrained stencil."""

    def __init__(self, in_channels, out_channels, hidden=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels

        def conv_init(n_out, n_in):
            std = np.sqrt(2.0 / (n_in * 9))
            return ad.Tensor(rng.standard_normal((n_out, n_in, 3, 3)) * std, requires_grad=True)

        self.w1 = conv_init(hidden, in_channels)
        self.b1 = ad.Tensor(np.zeros((hidden, 1, 1)), requires_grad=True)
        self.w2 = conv_init(hidden, hidden)
        self.b2 = ad.Tensor(np.zeros((hidden, 1, 1)), requires_grad=True)
        self.w3 = ad.Tensor(np.zeros((out_channels, hidden, 3, 3)), requires_grad=True)
        self.b3 = ad.Tensor(np.zeros((out_channels, 1, 1)), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def forward(self, x):
        h = ad.relu(ad.add(ad.conv2d_periodic(x, self.w1), self.b1))
        h = ad.relu(ad.add(ad.conv2d_periodic(h, self.w2), self.b2))
        return ad.add(ad.conv2d_periodic(h, self.w3), self.b3)


def hypernet_forward(state, net):
    if state.shape[-3] != net.in_channels:
        raise ValueError("hypernetwork input channels mismatch")
    return net.forward(state)


class TddlLayer(DifferenceLayer):
    """Per-pixel kernels: constrained moment entries hard-coded, free entries
    predicted by a hypernetwork from the full state.

    The per-pixel moment-to-kernel map is linear, so the output decomposes as
    conv(base) + sum_i W_i * conv(basis_i); that is exactly the pixelwise
    assembly of Q_x^{-1} M Q_y^{-T} kernels, computed without materializing
    them.
    """

    kind = "tddl"

    def __init__(self, spec, state_channels, hidden=16, rng=None):
        super().__init__(spec)
        base, basis = mk.constrained_basis(spec)
        self.m = basis.shape[0]
        k = spec.ksize
        self._bank = ad.Tensor(np.concatenate([base[None], basis]).reshape(self.m + 1, 1, k, k))
        self.state_channels = state_channels
        self.hyper = Hypernetwork(state_channels + 2, self.m, hidden=hidden, rng=rng)
        # Scale the final-layer steps per output channel like MomentLayer
        # scales theta: channel i multiplies a basis kernel of that norm.
        scale = 1.0 / np.sqrt((basis * basis).sum(axis=(1, 2)))
        self.hyper.w3.lr_scale = scale[:, None, None, None]
        self.hyper.b3.lr_scale = scale[:, None, None]
        self._last_w = None

    def parameters(self):
        return self.hyper.parameters()

    def reg_terms(self):
        if self._last_w is None:
            return []
        return [self._last_w]

    def free_fields(self, state):
        """Per-pixel free moment entries W with shape (..., m, H, W)."""
        return hypernet_forward(append_coords(state), self.hyper)

    def apply_channels(self, state, coeff=None):
        lead = state.shape[:-3]
        C = state.shape[-3]
        H, W = state.shape[-2:]
        w = self.free_fields(state)
        self._last_w = w

        flat = ad.reshape(state, (-1, 1, H, W))
        bank = ad.conv2d_periodic(flat, self._bank)  # (..., m+1, H, W) per channel
        bank = ad.reshape(bank, lead + (C, self.m + 1, H, W))
        base_part = ad.reshape(ad.narrow(bank, -3, 0, 1), lead + (C, H, W))
        rest = ad.narrow(bank, -3, 1, self.m)
        w_exp = ad.reshape(w, lead + (1, self.m, H, W))
        return ad.add(base_part, ad.tsum(ad.mul(rest, w_exp), axis=-3))


def apply_tddl(state, target_channel, layer):
    if target_channel >= state.shape[-3]:
        raise ValueError("target channel out of range")
    out = layer.apply_channels(state)
    picked = ad.narrow(out, -3, target_channel, 1)
    return ad.reshape(picked, out.shape[:-3] + out.shape[-2:])
