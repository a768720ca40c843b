"""Galerkin-truncated stochastic transport equation.

In Ito form, for modes ``|k| <= N``::

    du_k = [Pi_N(b . grad u)]_k dt - eps c |k|^2 u_k dt
           + i sqrt(eps) sum_{j,l} theta_{k-l} (a_{k-l}^(j) . k) u_l dW_{k-l}^(j)

``euler_maruyama`` integrates this form.  ``heun_stratonovich`` integrates the
Stratonovich form (transport plus noise, no ``c Delta`` term) with the
predictor-corrector Heun scheme.

Ensembles are stepped together; internally coefficients are laid out as
``(modes, paths)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BlowUpError, ConfigError, ContractError
from .noise import (NoiseIncrements, NoiseSpectrum, basis_kperp, corrector_constant,
                    increment_shape, path_stream)
from .spectral import Lattice, SpectralField, divergence, evaluate_physical, transport_convolution, transport_matrix

__all__ = [
    "SCHEMES",
    "SdeRunConfig",
    "GalerkinState",
    "GalerkinSystem",
    "Trajectory",
    "Ensemble",
    "drift_rhs",
    "noise_apply",
    "step",
    "simulate_path",
    "simulate_ensemble",
    "energy_inequality_check",
    "div_sup_norm",
]

SCHEMES = ("euler_maruyama", "heun_stratonovich")
CFL_LIMIT = 0.5


def _snapshots(drift) -> tuple[tuple[float, SpectralField], ...]:
    if drift is None:
        return ()
    if isinstance(drift, SpectralField):
        return ((0.0, drift),)
    snaps = tuple(sorted(((float(t), b) for t, b in drift), key=lambda p: p[0]))
    if snaps and snaps[0][0] > 0:
        raise ConfigError("first drift snapshot must start at t=0", "drift")
    return snaps


def drift_at(snapshots, t: float) -> SpectralField | None:
    """Piecewise-constant drift in force at time ``t``."""
    current = None
    for start, b in snapshots:
        if start <= t + 1e-12:
            current = b
    return current


@dataclass(frozen=True, eq=False)
class SdeRunConfig:
    """Description of one Galerkin run; ``drift`` is a vector SpectralField,
    a list of ``(t_start, field)`` snapshots, or None."""

    spectrum: NoiseSpectrum
    cutoff: float
    epsilon: float
    T: float
    dt: float
    drift: object = None
    scheme: str = "euler_maruyama"
    seed: int = 0
    path_id: int = 0
    output_every: int = 1
    div_free: bool = False
    check_cfl: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("must be positive", "dt")
        if not self.T > 0:
            raise ConfigError("must be positive", "T")
        if self.epsilon < 0:
            raise ConfigError("must be nonnegative", "epsilon")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}", "scheme")
        if self.output_every < 1:
            raise ConfigError("must be >= 1", "output_every")
        snaps = _snapshots(self.drift)
        for t, b in snaps:
            if not b.is_vector or b.dim != self.dim:
                raise ConfigError(f"snapshot at t={t} is not a {self.dim}-vector field", "drift")
            if not b.is_hermitian():
                raise ConfigError(f"snapshot at t={t} is not Hermitian-symmetric", "drift")
            if self.div_free and not b.is_divergence_free(1e-10):
                raise ConfigError(f"snapshot at t={t} is flagged divergence-free but is not", "drift")
        object.__setattr__(self, "drift", snaps)
        if self.check_cfl:
            lim = self.cfl_number
            if lim > CFL_LIMIT:
                safe = CFL_LIMIT / (self.epsilon * self.corrector * self.max_norm2)
                raise ConfigError(f"eps*c*N^2*dt = {lim:.3g} exceeds {CFL_LIMIT}; "
                                  f"use dt <= {safe:.3g}", "dt")

    @property
    def dim(self) -> int:
        return self.spectrum.dim

    @property
    def corrector(self) -> float:
        return corrector_constant(self.spectrum) if len(self.spectrum) else 0.0

    @property
    def nu(self) -> float:
        return self.epsilon * self.corrector

    @property
    def max_norm2(self) -> float:
        return float(Lattice(self.dim, self.cutoff).norm2.max())

    @property
    def cfl_number(self) -> float:
        return self.epsilon * self.corrector * self.max_norm2 * self.dt

    @property
    def n_steps(self) -> int:
        ratio = self.T / self.dt
        n = round(ratio)
        return n if abs(ratio - n) < 1e-9 * max(1.0, ratio) else math.ceil(ratio)

    def output_steps(self) -> np.ndarray:
        steps = list(range(0, self.n_steps + 1, self.output_every))
        if steps[-1] != self.n_steps:
            steps.append(self.n_steps)
        return np.array(steps)

    def with_(self, **kwargs) -> "SdeRunConfig":
        kwargs.setdefault("drift", list(self.drift))
        return replace(self, **kwargs)


class GalerkinSystem:
    """Precomputed operators of one configuration on its lattice.

    ``noise`` applies the increment-weighted coupling through a sparse
    scatter of mode pairs ``(k, l)`` with ``k - l`` in the noise support.
    """

    def __init__(self, spectrum: NoiseSpectrum, cutoff: float, epsilon: float, drift=None):
        self.spectrum = spectrum
        self.epsilon = float(epsilon)
        self.lattice = lat = Lattice(spectrum.dim, cutoff)
        self.corrector = corrector_constant(spectrum) if len(spectrum) else 0.0
        self.diffusion = -self.epsilon * self.corrector * lat.norm2.astype(float)
        self.snapshots = _snapshots(drift)
        self.transport = [(t, sp.csr_matrix(transport_matrix(b, lat))) for t, b in self.snapshots]
        self._build_noise()

    def _build_noise(self):
        lat, s = self.lattice, self.spectrum
        reps = s.representatives
        nj = max(s.dim - 1, 1)
        self.n_channels = len(reps) * nj
        kk, ll, ch, coef = [], [], [], []
        kmodes = lat.modes.astype(float)
        for r, m in enumerate(reps):
            a = basis_kperp(m)
            amp = math.sqrt(self.epsilon) * s.theta_of(m)
            for sign, offset in ((1, 0), (-1, self.n_channels)):
                target = lat.lookup(lat.modes + sign * m)
                src = np.nonzero(target >= 0)[0]
                dst = target[src]
                for j in range(nj):
                    kk.append(dst)
                    ll.append(src)
                    ch.append(np.full(len(src), offset + r * nj + j))
                    coef.append(1j * amp * (kmodes[dst] @ a[j]))
        cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dt))
        self.pair_k = cat(kk, np.int64)
        self.pair_l = cat(ll, np.int64)
        self.pair_ch = cat(ch, np.int64)
        coef = cat(coef, complex)
        self.scatter = sp.csr_matrix((coef, (self.pair_k, np.arange(len(coef)))),
                                     shape=(len(lat), len(coef)))

    def transport_at(self, t: float):
        current = None
        for start, T in self.transport:
            if start <= t + 1e-12:
                current = T
        return current

    def drift(self, u: np.ndarray, t: float, ito: bool = True) -> np.ndarray:
        """Deterministic right-hand side for coefficients ``u`` of shape (K, P)."""
        out = self.diffusion[:, None] * u if ito else np.zeros_like(u)
        T = self.transport_at(t)
        if T is not None:
            out = out + T @ u
        return out

    def channels(self, dW: np.ndarray) -> np.ndarray:
        """Stack increments (n_rep, nj, P) with their conjugates, (2 n_ch, P)."""
        flat = dW.reshape(self.n_channels, -1)
        return np.concatenate([flat, np.conj(flat)], axis=0)

    def noise(self, u: np.ndarray, channels: np.ndarray, chunk: int = 4_000_000) -> np.ndarray:
        """Noise increment ``G(dW) u`` for (K, P) coefficients."""
        npair = len(self.pair_k)
        if npair == 0:
            return np.zeros_like(u)
        P = u.shape[1]
        step_p = max(1, chunk // npair)
        out = np.empty_like(u)
        for p0 in range(0, P, step_p):
            sl = slice(p0, p0 + step_p)
            Z = u[self.pair_l, sl] * channels[self.pair_ch, sl]
            out[:, sl] = self.scatter @ Z
        return out

    def advance(self, u: np.ndarray, t: float, dt: float, dW: np.ndarray, scheme: str) -> np.ndarray:
        ch = self.channels(dW)
        if scheme == "euler_maruyama":
            return u + self.drift(u, t) * dt + self.noise(u, ch)
        f0 = self.drift(u, t, ito=False)
        g0 = self.noise(u, ch)
        pred = u + f0 * dt + g0
        f1 = self.drift(pred, t + dt, ito=False)
        g1 = self.noise(pred, ch)
        return u + 0.5 * (f0 + f1) * dt + 0.5 * (g0 + g1)


@lru_cache(maxsize=16)
def _system_for(config: SdeRunConfig) -> GalerkinSystem:
    return GalerkinSystem(config.spectrum, config.cutoff, config.epsilon, list(config.drift))


def system_for(config: SdeRunConfig) -> GalerkinSystem:
    """Operators of ``config`` (cached per config object)."""
    return _system_for(config)


def _check_u(u: SpectralField, dim: int, N: float):
    if u.dim != dim or u.ncomp != 1:
        raise ContractError("u must be a scalar field of the spectrum dimension")
    if u.radius() > N + 1e-9:
        raise ContractError(f"u has modes up to |k|={u.radius():g} beyond the cutoff {N:g}")


def drift_rhs(u: SpectralField, b: SpectralField | None, spectrum: NoiseSpectrum,
              eps: float, N: float) -> SpectralField:
    """``Pi_N(b . grad u) + eps c Delta u`` in spectral form."""
    _check_u(u, spectrum.dim, N)
    lat = Lattice(spectrum.dim, N)
    c = corrector_constant(spectrum) if len(spectrum) else 0.0
    out = -eps * c * lat.norm2 * u.on_lattice(lat)
    if b is not None:
        out = out + transport_convolution(b, u, N).on_lattice(lat)
    return SpectralField.from_lattice(lat, out)


def noise_apply(u: SpectralField, spectrum: NoiseSpectrum, eps: float,
                incr: NoiseIncrements, N: float) -> SpectralField:
    """Noise increment by direct summation over (support mode, j, source mode)."""
    _check_u(u, spectrum.dim, N)
    reps = spectrum.representatives
    if incr.reps.shape != reps.shape or not np.array_equal(incr.reps, reps):
        raise ContractError("increments do not match the spectrum support")
    lat = Lattice(spectrum.dim, N)
    out = np.zeros(len(lat), complex)
    root = math.sqrt(eps)
    dW = incr.full()
    nj = max(spectrum.dim - 1, 1)
    for l, ul in zip(u.modes, u.values[:, 0]):
        if ul == 0:
            continue
        for m, th in zip(spectrum.modes, spectrum.theta):
            k = l + m
            i = lat.index.get(tuple(int(c) for c in k))
            if i is None:
                continue
            a = basis_kperp(m)
            for j in range(nj):
                out[i] += 1j * root * th * (a[j] @ k) * ul * dW[(tuple(int(c) for c in m), j)]
    res = SpectralField.from_lattice(lat, out)
    assert res.is_hermitian(1e-10), "noise increment lost Hermitian symmetry"
    return res


@dataclass(frozen=True, eq=False)
class GalerkinState:
    t: float
    u: SpectralField
    energy_history: tuple[tuple[float, float], ...] = ()

    @classmethod
    def initial(cls, u0: SpectralField, cutoff: float) -> "GalerkinState":
        lat = Lattice(u0.dim, cutoff)
        u = SpectralField.from_lattice(lat, u0.on_lattice(lat))
        return cls(0.0, u, ((0.0, u.norm2()),))


def step(state: GalerkinState, config: SdeRunConfig, incr: NoiseIncrements,
         step_index: int = 0) -> GalerkinState:
    """One time step of ``config.scheme`` with the given increments."""
    if abs(incr.dt - config.dt) > 1e-14 * config.dt:
        raise ContractError("increment dt differs from config dt")
    system = system_for(config)
    lat = system.lattice
    u = state.u.on_lattice(lat)[:, None]
    dW = incr.values[..., None]
    new = system.advance(u, state.t, config.dt, dW, config.scheme)
    if not np.all(np.isfinite(new)):
        raise BlowUpError(step_index, state.t + config.dt)
    field_ = SpectralField.from_lattice(lat, new[:, 0])
    t = state.t + config.dt
    return GalerkinState(t, field_, state.energy_history + ((t, field_.norm2()),))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One path: coefficients (n_out, K) on ``lattice`` at ``times``."""

    times: np.ndarray
    lattice: Lattice
    coeffs: np.ndarray
    config: SdeRunConfig | None = None
    path_id: int = 0

    @property
    def energy(self) -> np.ndarray:
        return np.sum(np.abs(self.coeffs) ** 2, axis=-1)

    def field_at(self, i: int) -> SpectralField:
        return SpectralField.from_lattice(self.lattice, self.coeffs[i])


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Paths stacked as coefficients (P, n_out, K)."""

    times: np.ndarray
    lattice: Lattice
    coeffs: np.ndarray
    path_ids: np.ndarray
    config: SdeRunConfig | None = None

    @property
    def energy(self) -> np.ndarray:
        return np.sum(np.abs(self.coeffs) ** 2, axis=-1)

    def path(self, p: int) -> Trajectory:
        return Trajectory(self.times, self.lattice, self.coeffs[p], self.config, int(self.path_ids[p]))

    def __len__(self) -> int:
        return len(self.path_ids)


def draw_path_increments(spectrum: NoiseSpectrum, config: SdeRunConfig, path_id: int) -> np.ndarray:
    """All complex increments of one path, shape (n_steps, n_rep, nj)."""
    rng = path_stream(config.seed, path_id)
    z = rng.standard_normal((config.n_steps,) + increment_shape(spectrum)) * math.sqrt(config.dt)
    return z[..., 0] + 1j * z[..., 1]


def _run_batch(config: SdeRunConfig, u0: np.ndarray, path_ids: Sequence[int],
               zero_noise: bool = False, increments: np.ndarray | None = None) -> np.ndarray:
    system = system_for(config)
    K = len(system.lattice)
    P = len(path_ids)
    nj = max(config.dim - 1, 1)
    n_rep = len(config.spectrum.representatives)
    if increments is None and not zero_noise:
        increments = np.stack([draw_path_increments(config.spectrum, config, p) for p in path_ids],
                              axis=-1)  # (n_steps, n_rep, nj, P)
    out_steps = config.output_steps()
    result = np.empty((P, len(out_steps), K), complex)
    u = np.repeat(u0[:, None], P, axis=1)
    result[:, 0, :] = u.T
    slot = 1
    zeros = np.zeros((n_rep, nj, P), complex)
    for n in range(config.n_steps):
        dW = zeros if zero_noise else increments[n]
        u = system.advance(u, n * config.dt, config.dt, dW, config.scheme)
        if not np.all(np.isfinite(u)):
            raise BlowUpError(n + 1, (n + 1) * config.dt)
        if slot < len(out_steps) and out_steps[slot] == n + 1:
            result[:, slot, :] = u.T
            slot += 1
    return result


def _initial_coeffs(config: SdeRunConfig, u0: SpectralField) -> tuple[Lattice, np.ndarray]:
    lat = Lattice(config.dim, config.cutoff)
    if u0.dim != config.dim or u0.ncomp != 1:
        raise ContractError("u0 must be a scalar field of the configured dimension")
    if u0.radius() > config.cutoff + 1e-9:
        raise ContractError("u0 has modes beyond the Galerkin cutoff")
    if not u0.is_hermitian():
        raise ContractError("u0 must be Hermitian-symmetric")
    return lat, u0.on_lattice(lat)


def simulate_ensemble(config: SdeRunConfig, u0: SpectralField, n_paths: int,
                      first_path: int = 0, batch_size: int = 128, threads: int = 1,
                      zero_noise: bool = False) -> Ensemble:
    """Independent paths ``first_path .. first_path + n_paths - 1``.

    Path ``p`` draws from ``path_stream(config.seed, p)``, so results do not
    depend on ``batch_size`` or ``threads``.
    """
    lat, c0 = _initial_coeffs(config, u0)
    ids = np.arange(first_path, first_path + n_paths)
    batches = [ids[i:i + batch_size] for i in range(0, n_paths, batch_size)]
    if threads > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_batch, [config] * len(batches), [c0] * len(batches),
                                  batches, [zero_noise] * len(batches)))
    else:
        parts = [_run_batch(config, c0, b, zero_noise) for b in batches]
    coeffs = np.concatenate(parts, axis=0)
    times = config.output_steps() * config.dt
    return Ensemble(times, lat, coeffs, ids, config)


def simulate_path(config: SdeRunConfig, u0: SpectralField, zero_noise: bool = False) -> Trajectory:
    """Path ``config.path_id`` of ``config``; energies are ``Trajectory.energy``."""
    ens = simulate_ensemble(config, u0, 1, first_path=config.path_id, zero_noise=zero_noise)
    return ens.path(0)


def simulate_with_increments(config: SdeRunConfig, u0: SpectralField,
                             increments: np.ndarray) -> Ensemble:
    """Drive paths with caller-supplied increments (n_steps, n_rep, nj, P)."""
    lat, c0 = _initial_coeffs(config, u0)
    P = increments.shape[-1]
    coeffs = _run_batch(config, c0, list(range(P)), increments=increments)
    return Ensemble(config.output_steps() * config.dt, lat, coeffs, np.arange(P), config)


def div_sup_norm(b: SpectralField | None, grid: int | None = None) -> float:
    """``||div b||_inf`` sampled on a uniform grid (4x oversampled)."""
    if b is None or len(b.modes) == 0:
        return 0.0
    div = divergence(b)
    if np.abs(div.values).max(initial=0.0) == 0:
        return 0.0
    n = grid or max(16, 4 * (2 * int(math.ceil(div.radius())) + 1))
    return float(np.abs(evaluate_physical(div, n)).max())


@dataclass
class EnergyReport:
    times: np.ndarray
    weighted_norm: np.ndarray
    initial_norm: float
    slack: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.slack <= self.tol


def energy_inequality_check(traj: Trajectory, b=None, tol: float | None = None) -> EnergyReport:
    """Worst value of ``exp(-1/2 int_0^t ||div b||_inf) |u(t)| - |u_0|``.

    ``b`` defaults to the drift of the trajectory's config.  The default
    tolerance is ``10 dt |u_0|`` for Heun and ``5 sqrt(dt) |u_0|`` for
    Euler-Maruyama, whose pathwise energy error is of half order.
    """
    snaps = _snapshots(b) if b is not None else (traj.config.drift if traj.config else ())
    times = np.asarray(traj.times, dtype=float)
    norms = np.sqrt(traj.energy)
    rates = [(t0, div_sup_norm(bb)) for t0, bb in snaps]

    def integral(t):
        total = 0.0
        for i, (t0, r) in enumerate(rates):
            t1 = rates[i + 1][0] if i + 1 < len(rates) else math.inf
            lo, hi = t0, min(t1, t)
            if hi > lo:
                total += r * (hi - lo)
        return total

    weights = np.exp(-0.5 * np.array([integral(t) for t in times]))
    weighted = weights * norms
    slack = float(np.max(weighted - norms[0]))
    if tol is None:
        cfg = traj.config
        if cfg is None:
            tol = 1e-12
        elif cfg.scheme == "heun_stratonovich":
            tol = 10 * cfg.dt * norms[0]
        else:
            tol = 5 * math.sqrt(cfg.dt) * norms[0]
    return EnergyReport(times, weighted, float(norms[0]), slack, float(tol))
