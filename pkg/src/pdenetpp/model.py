"""Hybrid steppers: known physics terms from difference layers plus a
trainable closure, advanced by forward Euler.

State fields are (..., C, H, W) with x along the second-to-last axis. The
known part of each equation is assembled from one DifferenceLayer per
derivative; everything the layers cannot express is left to the backbone.
"""

import numpy as np

from . import autodiff as ad
from .backbones import ConvResNet, SpectralOperator
from .layers import FixedFdm, MomentLayer, TddlLayer, TfdlLayer, append_coords
from .moments import MomentSpec

CHANNELS = {"burgers": 2, "fn": 2, "ns": 1}

_REQUIRED = {
    "burgers": ((1, 0), (0, 1), (2, 0), (0, 2)),
    "fn": ((2, 0), (0, 2)),
    "ns": ((1, 0), (0, 1), (2, 0), (0, 2)),
}


def _wavenumbers(H, W, dx, dy):
    kx = 2.0 * np.pi * np.fft.fftfreq(H, d=dx)
    ky = 2.0 * np.pi * np.fft.fftfreq(W, d=dy)
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    return KX, KY


def velocity_from_vorticity(w, dx, dy):
    """Spectral velocity recovery on a periodic grid.

    Solves the stream function from the vorticity (DC gauge: mean psi = 0,
    any mean vorticity is dropped) and differentiates it spectrally:
    u_hat = i k_y w_hat / |k|^2, v_hat = -i k_x w_hat / |k|^2. Differentiable.
    """
    w = ad.as_tensor(w)
    H, Wd = w.data.shape[-2:]
    KX, KY = _wavenumbers(H, Wd, dx, dy)
    k2 = KX ** 2 + KY ** 2
    inv = np.zeros_like(k2)
    nz = k2 > 0
    inv[nz] = 1.0 / k2[nz]
    F = ad.dft2(w)
    u = ad.idft2(F.scale_by(1j * KY * inv))
    v = ad.idft2(F.scale_by(-1j * KX * inv))
    return u, v


class KnownPart:
    """The explicitly modeled terms of one PDE, one DifferenceLayer per
    derivative.

    pde 'burgers': channels (u, v), Phi = -(u D10 + v D01)U + nu (D20 + D02)U.
    pde 'fn':      channels (u, v), Phi = gamma (D20 + D02)U.
    pde 'ns':      single vorticity channel w, velocity recovered spectrally,
                   Phi = -(u D10 + v D01)w + nu (D20 + D02)w.
    """

    def __init__(self, pde, coefficient, layers):
        if pde not in _REQUIRED:
            raise ValueError(f"unknown pde kind {pde!r}")
        missing = [d for d in _REQUIRED[pde] if d not in layers]
        if missing:
            raise ValueError(f"{pde} needs derivative layers {missing}")
        self.pde = pde
        self.coefficient = float(coefficient)
        self.layers = {d: layers[d] for d in _REQUIRED[pde]}
        spacings = {(lay.spec.dx, lay.spec.dy) for lay in self.layers.values()}
        if len(spacings) > 1:
            raise ValueError("derivative layers disagree on grid spacing")
        self.dx, self.dy = spacings.pop()

    def parameters(self):
        out = []
        for lay in self.layers.values():
            out.extend(lay.parameters())
        return out

    def reg_terms(self):
        out = []
        for lay in self.layers.values():
            out.extend(lay.reg_terms())
        return out

    def _advective(self, state, u, v, nu):
        d10 = self.layers[(1, 0)].apply_channels(state, coeff=-u.data)
        d01 = self.layers[(0, 1)].apply_channels(state, coeff=-v.data)
        d20 = self.layers[(2, 0)].apply_channels(state)
        d02 = self.layers[(0, 2)].apply_channels(state)
        adv = ad.add(ad.mul(u, d10), ad.mul(v, d01))
        return ad.sub(ad.scale(ad.add(d20, d02), nu), adv)

    def phi(self, state):
        state = ad.as_tensor(state)
        C = state.data.shape[-3]
        if C != CHANNELS[self.pde]:
            raise ValueError(f"{self.pde} expects {CHANNELS[self.pde]} channels, got {C}")
        if self.pde == "fn":
            d20 = self.layers[(2, 0)].apply_channels(state)
            d02 = self.layers[(0, 2)].apply_channels(state)
            return ad.scale(ad.add(d20, d02), self.coefficient)
        if self.pde == "burgers":
            u = ad.narrow(state, -3, 0, 1)
            v = ad.narrow(state, -3, 1, 1)
            return self._advective(state, u, v, self.coefficient)
        u, v = velocity_from_vorticity(state, self.dx, self.dy)
        return self._advective(state, u, v, self.coefficient)


def known_part_burgers(U, known):
    if known.pde != "burgers":
        raise ValueError("known part is not configured for Burgers")
    return known.phi(U)


def known_part_fn(U, known):
    if known.pde != "fn":
        raise ValueError("known part is not configured for FitzHugh-Nagumo")
    return known.phi(U)


def known_part_ns(w, known):
    if known.pde != "ns":
        raise ValueError("known part is not configured for vorticity transport")
    return known.phi(w)


class HybridModel:
    """Forward-Euler stepper U + (Phi(U) + F(x, U)) dt.

    known is None for the black-box baseline (the step is then U + F dt).
    A non-finite value anywhere in the update raises NonFiniteError, which
    rollout code records as a blown-up trajectory.
    """

    def __init__(self, known, backbone, dt):
        if dt < 0:
            raise ValueError("dt must be nonnegative")
        self.known = known
        self.backbone = backbone
        self.dt = float(dt)

    def rhs(self, U):
        U = ad.as_tensor(U)
        terms = self.backbone.forward(append_coords(U))
        if self.known is not None:
            terms = ad.add(self.known.phi(U), terms)
        return terms

    def step(self, U):
        U = ad.as_tensor(U)
        return ad.add(U, ad.scale(self.rhs(U), self.dt))

    def parameters(self):
        params = list(self.backbone.parameters())
        if self.known is not None:
            params = self.known.parameters() + params
        return params

    def param_items(self):
        items = []
        if self.known is not None:
            for (p, q), lay in self.known.layers.items():
                for i, t in enumerate(lay.parameters()):
                    items.append((f"known.d{p}{q}.p{i}", t))
        for name, t in self.backbone.param_items():
            items.append((f"backbone.{name}", t))
        return items

    def reg_terms(self):
        return [] if self.known is None else self.known.reg_terms()


def pdenetpp_step(model, U):
    return model.step(U)


def blackbox_step(model, U):
    U = ad.as_tensor(U)
    F = model.backbone.forward(append_coords(U))
    return ad.add(U, ad.scale(F, model.dt))


def build_known_part(pde, method, coefficient, dx, dy, L=2, r=2, hidden=16, rng=None):
    """Construct the per-derivative layers for one equation.

    method: 'fdm' (fixed second-order stencils), 'moment' (trainable
    constrained kernels), 'tfdl' (flipping kernels for first derivatives,
    moment kernels for second), 'tddl' (hypernetwork-driven kernels).
    """
    derivs = _REQUIRED[pde]
    if method == "tfdl" and (1, 0) not in derivs:
        raise ValueError("flipping kernels need first-derivative terms in the known part")
    layers = {}
    for p, q in derivs:
        spec = MomentSpec(p=p, q=q, r=r, L=L, dx=dx, dy=dy)
        if method == "fdm":
            layers[(p, q)] = FixedFdm(spec)
        elif method == "moment":
            layers[(p, q)] = MomentLayer(spec)
        elif method == "tfdl":
            first = (p, q) in ((1, 0), (0, 1))
            layers[(p, q)] = TfdlLayer(spec) if first else MomentLayer(spec)
        elif method == "tddl":
            layers[(p, q)] = TddlLayer(spec, CHANNELS[pde], hidden=hidden, rng=rng)
        else:
            raise ValueError(f"unknown method {method!r}")
    return KnownPart(pde, coefficient, layers)


def build_model(
    pde,
    method,
    backbone_kind,
    coefficient,
    dx,
    dy,
    dt,
    seed=0,
    L=2,
    r=2,
    hidden=16,
    backbone_opts=None,
):
    """Assemble a full stepper; method 'blackbox' omits the known part."""
    rng = np.random.default_rng(seed)
    C = CHANNELS[pde]
    if method == "blackbox":
        known = None
    else:
        known = build_known_part(pde, method, coefficient, dx, dy, L=L, r=r, hidden=hidden, rng=rng)
    opts = dict(backbone_opts or {})
    if backbone_kind == "convresnet":
        backbone = ConvResNet(C + 2, C, rng=rng, **opts)
    elif backbone_kind == "spectral":
        backbone = SpectralOperator(C + 2, C, rng=rng, **opts)
    else:
        raise ValueError(f"unknown backbone kind {backbone_kind!r}")
    return HybridModel(known, backbone, dt)
