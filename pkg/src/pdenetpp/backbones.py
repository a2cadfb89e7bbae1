"""Trainable residual backbones mapping coordinate-augmented fields to closures.

Both networks read a field of shape (..., C_in, H, W) whose last two channels
are usually the normalized grid coordinates, and emit (..., C_out, H, W). The
final projection starts at zero so an untrained hybrid step reduces to the
pure difference-operator integrator.
"""

import numpy as np

from .autodiff import Tensor, add, conv2d_periodic, spectral_mix, tanh


def _normal(rng, shape, scale):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _pointwise(x, weight, bias):
    # 1x1 convolution; kernel shape (out, in, 1, 1), bias shape (out, 1, 1).
    return add(conv2d_periodic(x, weight), bias)


class ConvResNet:
    """Lift, a stack of residual 3x3 conv blocks, zero-initialized projection."""

    def __init__(self, in_channels, out_channels, width=32, blocks=4, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.lift_w = _normal(rng, (width, in_channels, 1, 1), (1.0 / in_channels) ** 0.5)
        self.lift_b = _zeros((width, 1, 1))
        self.blocks = []
        fan = width * 9
        for _ in range(blocks):
            self.blocks.append(
                {
                    "w1": _normal(rng, (width, width, 3, 3), (1.0 / fan) ** 0.5),
                    "b1": _zeros((width, 1, 1)),
                    "w2": _normal(rng, (width, width, 3, 3), (1.0 / fan) ** 0.5),
                    "b2": _zeros((width, 1, 1)),
                }
            )
        self.project_w = _zeros((out_channels, width, 1, 1))
        self.project_b = _zeros((out_channels, 1, 1))

    def forward(self, x):
        if x.data.shape[-3] != self.in_channels:
            raise ValueError("input channels do not match the network")
        h = _pointwise(x, self.lift_w, self.lift_b)
        for blk in self.blocks:
            inner = tanh(add(conv2d_periodic(h, blk["w1"]), blk["b1"]))
            h = add(h, add(conv2d_periodic(inner, blk["w2"]), blk["b2"]))
        return _pointwise(h, self.project_w, self.project_b)

    def param_items(self):
        items = [("lift.w", self.lift_w), ("lift.b", self.lift_b)]
        for i, blk in enumerate(self.blocks):
            for key in ("w1", "b1", "w2", "b2"):
                items.append((f"block{i}.{key}", blk[key]))
        items += [("project.w", self.project_w), ("project.b", self.project_b)]
        return items

    def parameters(self):
        return [p for _, p in self.param_items()]


class SpectralOperator:
    """Reduced Fourier operator: low-mode complex mixing plus a pointwise path."""

    def __init__(self, in_channels, out_channels, width=16, layers=4, modes=8, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.modes = modes
        self.lift_w = _normal(rng, (width, in_channels, 1, 1), (1.0 / in_channels) ** 0.5)
        self.lift_b = _zeros((width, 1, 1))
        self.layers = []
        block = 2 * modes - 1
        wscale = 1.0 / (width * block)
        for _ in range(layers):
            self.layers.append(
                {
                    "w_re": _normal(rng, (width, width, block, block), wscale),
                    "w_im": _normal(rng, (width, width, block, block), wscale),
                    "pw": _normal(rng, (width, width, 1, 1), (1.0 / width) ** 0.5),
                    "b": _zeros((width, 1, 1)),
                }
            )
        self.project_w = _zeros((out_channels, width, 1, 1))
        self.project_b = _zeros((out_channels, 1, 1))

    def forward(self, x):
        if x.data.shape[-3] != self.in_channels:
            raise ValueError("input channels do not match the network")
        h = _pointwise(x, self.lift_w, self.lift_b)
        last = len(self.layers) - 1
        for i, lay in enumerate(self.layers):
            mixed = spectral_mix(h, lay["w_re"], lay["w_im"], self.modes)
            h = add(mixed, _pointwise(h, lay["pw"], lay["b"]))
            if i < last:
                h = tanh(h)
        return _pointwise(h, self.project_w, self.project_b)

    def param_items(self):
        items = [("lift.w", self.lift_w), ("lift.b", self.lift_b)]
        for i, lay in enumerate(self.layers):
            for key in ("w_re", "w_im", "pw", "b"):
                items.append((f"layer{i}.{key}", lay[key]))
        items += [("project.w", self.project_w), ("project.b", self.project_b)]
        return items

    def parameters(self):
        return [p for _, p in self.param_items()]
