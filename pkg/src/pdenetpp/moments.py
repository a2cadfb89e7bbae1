"""Moment-matrix algebra for trainable finite-difference kernels.

A (2L+1)x(2L+1) kernel K acting on samples of a smooth field approximates
the derivative mix sum_{u,v} M(K)(u,v) d^{u+v}f / dx^u dy^v, where

    M(K)(u, v) = sum_{s,t} K(s, t) s^u t^v / (u! v!) dx^u dy^v.

In matrix form M(K) = Q_x K Q_y^T with Q(u, s) = s^u spacing^u / u!
(0^0 := 1). Q factors as diag(spacing^u / u!) times an integer Vandermonde
matrix, so both directions of the bijection are solved through the integer
factor and exact diagonal scaling, which keeps round trips near machine
precision even for small spacings.

Pinning M(K)(u, v) = delta_up delta_vq for all u+v <= p+q+r makes K a
(p, q)-derivative approximation of convergence order r+1; the remaining
moment entries (row-major over u+v > p+q+r) are free parameters.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache
from math import factorial

import numpy as np


@dataclasses.dataclass(frozen=True)
class MomentSpec:
    """Derivative orders (p, q), accuracy margin r, radius L, grid spacings."""

    p: int
    q: int
    r: int
    L: int
    dx: float = 1.0
    dy: float = 1.0

    def __post_init__(self):
        if self.p < 0 or self.q < 0 or self.r < 0:
            raise ValueError("p, q, r must be non-negative")
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.p + self.q + self.r > 2 * self.L:
            raise ValueError("p + q + r must not exceed 2L")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("spacings must be positive")

    @property
    def ksize(self):
        return 2 * self.L + 1

    @property
    def order_cut(self):
        return self.p + self.q + self.r

    def with_spacing(self, dx, dy):
        return dataclasses.replace(self, dx=dx, dy=dy)


def vandermonde_factor(L, spacing):
    """Q(u, s) = s^u spacing^u / u! for u in [0, 2L], s in [-L, L]."""
    if L < 1:
        raise ValueError("L must be at least 1")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    s = np.arange(-L, L + 1, dtype=np.float64)
    u = np.arange(2 * L + 1)
    powers = s[None, :] ** u[:, None]  # 0^0 -> 1 via numpy convention
    d = np.array([spacing ** k / factorial(k) for k in u])
    return powers * d[:, None]


@lru_cache(maxsize=None)
def _integer_factors(L):
    s = np.arange(-L, L + 1, dtype=np.float64)
    V = s[None, :] ** np.arange(2 * L + 1)[:, None]
    return V, np.linalg.inv(V)


def _diag_scale(L, spacing):
    return np.array([spacing ** k / factorial(k) for k in range(2 * L + 1)])


def moment_from_kernel(K, spec):
    """M(K) = Q_x K Q_y^T."""
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (spec.ksize, spec.ksize):
        raise ValueError("kernel shape does not match spec")
    V, _ = _integer_factors(spec.L)
    core = V @ K @ V.T
    return core * np.outer(_diag_scale(spec.L, spec.dx), _diag_scale(spec.L, spec.dy))


def kernel_from_moment(M, spec):
    """K = Q_x^{-1} M Q_y^{-T}, the inverse of moment_from_kernel."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (spec.ksize, spec.ksize):
        raise ValueError("moment shape does not match spec")
    _, Vinv = _integer_factors(spec.L)
    core = M / np.outer(_diag_scale(spec.L, spec.dx), _diag_scale(spec.L, spec.dy))
    return Vinv @ core @ Vinv.T


def free_param_count(spec):
    """(2L+1)^2 minus the number of constrained entries u+v <= p+q+r."""
    c = spec.order_cut
    return spec.ksize ** 2 - (c + 1) * (c + 2) // 2


def free_indices(spec):
    """Row-major (u, v) pairs of the unconstrained moment entries."""
    n = spec.ksize
    return [(u, v) for u in range(n) for v in range(n) if u + v > spec.order_cut]


@lru_cache(maxsize=None)
def basis_bank(L, dx, dy):
    """Kernels K0_uv = Q_x^{-1} E_uv Q_y^{-T} for every moment position.

    Returned as a read-only (2L+1, 2L+1, 2L+1, 2L+1) array indexed
    bank[u, v]; computed once per (L, dx, dy).
    """
    _, Vinv = _integer_factors(L)
    cx = Vinv / _diag_scale(L, dx)[None, :]  # columns of Q_x^{-1}
    cy = Vinv / _diag_scale(L, dy)[None, :]
    bank = np.einsum("su,tv->uvst", cx, cy)
    bank.setflags(write=False)
    return bank


def constrained_basis(spec):
    """Base kernel (free = 0) and the stack of free-direction kernels.

    assemble_constrained_kernel(spec, free) == base + sum_i free[i] * basis[i].
    """
    bank = basis_bank(spec.L, spec.dx, spec.dy)
    base = bank[spec.p, spec.q]
    basis = np.stack([bank[u, v] for u, v in free_indices(spec)])
    return base, basis


def assemble_constrained_kernel(spec, free):
    """Kernel whose moments satisfy M(u, v) = delta_up delta_vq on u+v <= p+q+r.

    free holds the remaining moment entries in free_indices order; the map
    is linear in free.
    """
    free = np.asarray(free, dtype=np.float64)
    m = free_param_count(spec)
    if free.shape != (m,):
        raise ValueError(f"free must have shape ({m},)")
    base, basis = constrained_basis(spec)
    return base + np.tensordot(free, basis, axes=([0], [0]))


def flip_x(K):
    """K'(s, t) = -K(-s, t); sends M(u, v) to (-1)^(u+1) M(u, v)."""
    return -np.asarray(K)[::-1, :]


def flip_y(K):
    """K'(s, t) = -K(s, -t); sends M(u, v) to (-1)^(v+1) M(u, v)."""
    return -np.asarray(K)[:, ::-1]


def periodic_apply(field, K):
    """Apply a stencil to a periodic 2-d field (plain numpy, no tape)."""
    K = np.asarray(K)
    L = K.shape[0] // 2
    out = np.zeros_like(field)
    for i, s in enumerate(range(-L, L + 1)):
        for j, t in enumerate(range(-L, L + 1)):
            if K[i, j] != 0.0:
                out += K[i, j] * np.roll(field, (-s, -t), axis=(0, 1))
    return out


def empirical_order(build_kernel, fn, dfn, sizes=(32, 64, 128), extent=2.0 * np.pi):
    """Observed convergence order of a stencil family under grid refinement.

    build_kernel(dx, dy) returns the kernel for that spacing; fn and dfn
    sample the test function and its target derivative at (x, y). Returns
    the least-squares slope of log max-error against log spacing.
    """
    errs, hs = [], []
    for n in sizes:
        h = extent / n
        x = np.arange(n) * h
        X, Y = np.meshgrid(x, x, indexing="ij")
        K = build_kernel(h, h)
        err = np.max(np.abs(periodic_apply(fn(X, Y), K) - dfn(X, Y)))
        errs.append(err)
        hs.append(h)
    slope, _ = np.polyfit(np.log(hs), np.log(errs), 1)
    return float(slope)
