"""Reference pseudo-spectral solvers and the dataset factory.

Ground truth is simulated on a fine periodic grid with RK4 in time and
spectral derivatives in space; nonlinear products are formed in physical
space and dealiased by the 2/3 rule. Recorded snapshots are point-subsampled
onto the coarse grid, and training data gets small state-scaled noise.

All solver arithmetic is plain float64 numpy over (..., C, H, W) arrays; a
leading axis batches independent trajectories through the same ffts.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TWO_PI = 2.0 * np.pi

PDE_PRESETS = {
    "burgers": dict(domain=TWO_PI, coefficient=0.05, dt=0.01, ratio=16, channels=2),
    "fn": dict(domain=6.4, coefficient=1.0, dt=0.002, ratio=200, channels=2),
    "ns": dict(domain=1.0, coefficient=1e-3, dt=0.025, ratio=500, channels=1),
    "ns_hard": dict(domain=1.0, coefficient=1e-4, dt=0.00625, ratio=125, channels=1),
}


@dataclass(frozen=True)
class PdeConfig:
    """One simulation setting: physics constants plus grid and step bookkeeping.

    dt is the coarse (recorded) step; the fine solver runs at dt / ratio.
    """

    pde: str
    domain: float
    coefficient: float
    dt: float
    ratio: int
    fine: int = 256
    coarse: int = 64
    channels: int = 2
    alpha: float = 0.01
    beta: float = 0.25

    def __post_init__(self):
        if self.pde not in ("burgers", "fn", "ns"):
            raise ValueError(f"unknown pde kind {self.pde!r}")
        if self.ratio < 1 or self.dt <= 0:
            raise ValueError("need dt > 0 and an integer step ratio >= 1")
        if self.fine % self.coarse != 0:
            raise ValueError("coarse grid must divide the fine grid")

    @property
    def delta_t(self):
        return self.dt / self.ratio

    @property
    def fine_spacing(self):
        return self.domain / self.fine

    @property
    def coarse_spacing(self):
        return self.domain / self.coarse


def default_config(pde, **overrides):
    preset = dict(PDE_PRESETS[pde])
    kind = "ns" if pde == "ns_hard" else pde
    preset.update(overrides)
    return PdeConfig(pde=kind, **preset)


class SpectralGrid:
    """Wavenumbers and the 2/3-rule mask for a real-transform layout."""

    def __init__(self, n, domain):
        self.n = n
        self.domain = domain
        h = domain / n
        self.kx = TWO_PI * np.fft.fftfreq(n, d=h)[:, None]
        self.ky = TWO_PI * np.fft.rfftfreq(n, d=h)[None, :]
        self.k2 = self.kx ** 2 + self.ky ** 2
        cut = n // 3
        ix = np.abs(np.fft.fftfreq(n) * n)[:, None]
        iy = (np.fft.rfftfreq(n) * n)[None, :]
        self.dealias = ((ix <= cut) & (iy <= cut)).astype(np.float64)
        inv = np.zeros_like(self.k2)
        nz = self.k2 > 0
        inv[nz] = 1.0 / self.k2[nz]
        self.inv_k2 = inv
        x = np.arange(n) * h
        self.X, self.Y = np.meshgrid(x, x, indexing="ij")


@lru_cache(maxsize=None)
def spectral_grid(n, domain):
    return SpectralGrid(n, float(domain))


def _ddx(fh, g):
    return np.fft.irfft2(1j * g.kx * fh, s=(g.n, g.n))


def _ddy(fh, g):
    return np.fft.irfft2(1j * g.ky * fh, s=(g.n, g.n))


def sample_grf(seed, n, domain=1.0, scale=25.0, shift=25.0, power=3, normalize=True):
    """Gaussian random field with covariance scale*(-Laplacian + shift*I)^-power.

    seed may be an int, a SeedSequence, or a Generator. The draw is white
    noise shaped in Fourier space by the square root of the covariance
    eigenvalues; z-score normalization then pins mean 0 and std 1.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    white = rng.standard_normal((n, n))
    h = domain / n
    kx = TWO_PI * np.fft.fftfreq(n, d=h)[:, None]
    ky = TWO_PI * np.fft.fftfreq(n, d=h)[None, :]
    amp = np.sqrt(scale) * (kx ** 2 + ky ** 2 + shift) ** (-power / 2.0)
    out = np.fft.ifft2(np.fft.fft2(white) * amp).real
    if normalize:
        out = (out - out.mean()) / out.std()
    return out


def burgers_forcing(U, grid):
    """State-dependent forcing (sin(v)cos(5x+5y), sin(u)cos(5x-5y))."""
    u = U[..., 0, :, :]
    v = U[..., 1, :, :]
    f1 = np.sin(v) * np.cos(5.0 * grid.X + 5.0 * grid.Y)
    f2 = np.sin(u) * np.cos(5.0 * grid.X - 5.0 * grid.Y)
    return np.stack([f1, f2], axis=-3)


def burgers_rhs(U, nu, grid, forced=True):
    Uh = np.fft.rfft2(U)
    dx = _ddx(Uh, grid)
    dy = _ddy(Uh, grid)
    u = U[..., 0:1, :, :]
    v = U[..., 1:2, :, :]
    nonlinear = -(u * dx + v * dy)
    if forced:
        nonlinear = nonlinear + burgers_forcing(U, grid)
    nh = np.fft.rfft2(nonlinear) * grid.dealias - nu * grid.k2 * Uh
    return np.fft.irfft2(nh, s=(grid.n, grid.n))


def fn_rhs(U, gamma, grid, alpha=0.01, beta=0.25):
    Uh = np.fft.rfft2(U)
    u = U[..., 0, :, :]
    v = U[..., 1, :, :]
    reaction = np.stack([u - u ** 3 - v + alpha, beta * (u - v)], axis=-3)
    rh = np.fft.rfft2(reaction) * grid.dealias - gamma * grid.k2 * Uh
    return np.fft.irfft2(rh, s=(grid.n, grid.n))


def velocity_from_vorticity(w, domain=1.0):
    """Spectral inverse curl: stream function from Delta psi = w (DC gauge 0),
    then U = (-d psi/dy, d psi/dx). Returns channels (u, v) stacked ahead of
    the spatial axes; w may carry a channel axis of size 1 or none.
    """
    w = np.asarray(w, dtype=np.float64)
    squeeze = False
    if w.ndim >= 3 and w.shape[-3] == 1:
        w = w[..., 0, :, :]
        squeeze = True
    g = spectral_grid(w.shape[-1], float(domain))
    wh = np.fft.rfft2(w)
    u = np.fft.irfft2(1j * g.ky * g.inv_k2 * wh, s=(g.n, g.n))
    v = np.fft.irfft2(-1j * g.kx * g.inv_k2 * wh, s=(g.n, g.n))
    out = np.stack([u, v], axis=-3)
    return out


def ns_vorticity_rhs(w, nu, grid, forcing=None):
    wh = np.fft.rfft2(w)
    w2h = wh[..., 0, :, :]
    u = np.fft.irfft2(1j * grid.ky * grid.inv_k2 * w2h, s=(grid.n, grid.n))[..., None, :, :]
    v = np.fft.irfft2(-1j * grid.kx * grid.inv_k2 * w2h, s=(grid.n, grid.n))[..., None, :, :]
    adv = u * _ddx(wh, grid) + v * _ddy(wh, grid)
    nh = -np.fft.rfft2(adv) * grid.dealias - nu * grid.k2 * wh
    out = np.fft.irfft2(nh, s=(grid.n, grid.n))
    if forcing is not None:
        out = out + forcing
    return out


def rk4_step(state, rhs, dt):
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def downsample(fine, coarse):
    """Point subsampling of (..., H, W) onto a coarse x coarse grid."""
    H, W = fine.shape[-2:]
    if H % coarse or W % coarse:
        raise ValueError("coarse grid must divide the fine grid")
    sx, sy = H // coarse, W // coarse
    return fine[..., ::sx, ::sy]


def add_noise(clean, amplitude, rng):
    """U + amplitude * sigma * eps with sigma the spatial std per snapshot
    and channel; clean has shape (..., C, H, W)."""
    if amplitude == 0.0:
        return clean.copy()
    sigma = clean.std(axis=(-2, -1), keepdims=True)
    eps = rng.standard_normal(clean.shape)
    return clean + amplitude * sigma * eps


@dataclass
class Dataset:
    """Trajectories on the coarse grid: clean (N, M+1, C, h, h), optional
    noisy twin, per-trajectory seed entropy, and the shared forcing (fine
    grid, vorticity datasets only)."""

    config: PdeConfig
    clean: np.ndarray
    noisy: np.ndarray | None
    seed: int
    forcing: np.ndarray | None = None

    @property
    def n_trajectories(self):
        return self.clean.shape[0]

    @property
    def n_steps(self):
        return self.clean.shape[1] - 1


def _rhs_for(config, grid, forcing):
    if config.pde == "burgers":
        return lambda s: burgers_rhs(s, config.coefficient, grid)
    if config.pde == "fn":
        return lambda s: fn_rhs(s, config.coefficient, grid, config.alpha, config.beta)
    return lambda s: ns_vorticity_rhs(s, config.coefficient, grid, forcing)


def _initial_state(config, seq):
    fields = [
        sample_grf(np.random.default_rng(s), config.fine, config.domain)
        for s in seq.spawn(config.channels)
    ]
    return np.stack(fields, axis=0)


def generate_dataset(config, n_traj, steps, seed, with_noise=True, noise_amplitude=0.001, chunk=16):
    """Simulate n_traj trajectories of `steps` coarse steps each.

    Per-trajectory randomness comes from SeedSequence children, so the first
    k trajectories of a size-n dataset equal the size-k dataset drawn from
    the same seed. Trajectories run through the fine solver in chunks to
    bound memory; a non-finite recorded snapshot aborts with the trajectory
    index.
    """
    root = np.random.SeedSequence(seed)
    forcing_seq, noise_seq = root.spawn(2)
    grid = spectral_grid(config.fine, config.domain)

    forcing = None
    if config.pde == "ns":
        forcing = sample_grf(np.random.default_rng(forcing_seq), config.fine, config.domain)[None]

    children = root.spawn(n_traj)  # continues after the two spawned above
    rhs = _rhs_for(config, grid, forcing)

    out = np.empty(
        (n_traj, steps + 1, config.channels, config.coarse, config.coarse), dtype=np.float64
    )
    for start in range(0, n_traj, chunk):
        stop = min(start + chunk, n_traj)
        state = np.stack([_initial_state(config, children[i]) for i in range(start, stop)])
        out[start:stop, 0] = downsample(state, config.coarse)
        for j in range(1, steps + 1):
            for _ in range(config.ratio):
                state = rk4_step(state, rhs, config.delta_t)
            snap = downsample(state, config.coarse)
            bad = ~np.isfinite(snap).all(axis=(1, 2, 3))
            if bad.any():
                idx = start + int(np.argmax(bad))
                raise RuntimeError(f"trajectory {idx} blew up at coarse step {j}")
            out[start:stop, j] = snap

    noisy = None
    if with_noise:
        noisy = add_noise(out, noise_amplitude, np.random.default_rng(noise_seq))
    return Dataset(config=config, clean=out, noisy=noisy, seed=seed, forcing=forcing)
