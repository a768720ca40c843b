"""Closed second-moment system for the transport equation without drift.

With ``x_k = E|u_k|^2`` the Galerkin SDE gives the linear system

    dx_k/dt = -2 eps c |k|^2 x_k + 2 eps sum_l theta_{k-l}^2 |P_{k-l} k|^2 x_l

whose matrix is a Q-matrix (nonnegative off-diagonal entries, zero row sums
away from the truncation boundary).  Modes beyond ``K`` are absorbing: mass
sent there is dropped from the system and tallied as outflux.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, IntegratorToleranceError
from .noise import NoiseSpectrum, corrector_constant
from .spectral import Lattice, SpectralField

__all__ = [
    "QMatrix",
    "MomentTrajectory",
    "build_q_matrix",
    "integrate_moments",
    "stationarity_check",
    "moments_vs_montecarlo",
    "write_q_triplets",
    "write_comparison_csv",
]

NEGATIVE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class QMatrix:
    """Dense generator on the nonzero modes ``|k| <= K``.

    ``q[i, j]`` is the rate from ``modes[j]`` into ``modes[i]``, so the
    moment vector evolves as ``x' = q @ x``.
    """

    modes: np.ndarray
    q: np.ndarray
    K: float
    support_radius: float

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def norm2(self) -> np.ndarray:
        return (self.modes**2).sum(axis=1)

    @property
    def interior_mask(self) -> np.ndarray:
        """Modes whose whole noise neighbourhood stays inside the truncation."""
        lim = self.K - self.support_radius
        return self.norm2 <= lim * lim + 1e-9 if lim >= 0 else np.zeros(len(self), bool)

    def index(self, k: Sequence[int]) -> int:
        hits = np.nonzero(np.all(self.modes == np.asarray(k), axis=1))[0]
        if len(hits) == 0:
            raise KeyError(tuple(k))
        return int(hits[0])

    def entry(self, k: Sequence[int], l: Sequence[int]) -> float:
        """Rate ``q_{kl}`` from mode ``l`` into mode ``k``."""
        return float(self.q[self.index(k), self.index(l)])

    def row_sums(self) -> np.ndarray:
        return self.q.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.q.sum(axis=0)

    def vector(self, x: dict | np.ndarray) -> np.ndarray:
        """Moment vector from ``{k: x_k}`` (absent modes are zero) or an array."""
        if isinstance(x, dict):
            out = np.zeros(len(self))
            for k, v in x.items():
                out[self.index(k)] = float(v)
            return out
        x = np.asarray(x, dtype=float)
        if x.shape != (len(self),):
            raise ContractError(f"moment vector must have shape ({len(self)},)")
        return x


def _proj_norm2(m: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``|P_m k|^2 = |k|^2 - (m.k)^2 / |m|^2`` for rows of ``m`` and ``k``."""
    m = m.astype(float)
    k = k.astype(float)
    dot = (m * k).sum(axis=-1)
    return (k * k).sum(axis=-1) - dot * dot / (m * m).sum(axis=-1)


def build_q_matrix(spectrum: NoiseSpectrum, eps: float, K: float) -> QMatrix:
    """Q-matrix of the moment system on ``0 < |k| <= K`` with noise ``sqrt(eps)``."""
    if eps < 0:
        raise ContractError("eps must be nonnegative")
    if K < 1:
        raise ContractError("K must be at least 1")
    r = spectrum.radius if len(spectrum) else 0.0
    if K < r:
        warnings.warn(f"K={K:g} is below the spectrum support radius {r:g}; "
                      "no mode is interior", RuntimeWarning, stacklevel=2)
    lat = Lattice(spectrum.dim, K)
    modes = lat.modes[1:]
    n = len(modes)
    q = np.zeros((n, n))
    if len(spectrum) and eps > 0:
        c = corrector_constant(spectrum)
        for m, th in zip(spectrum.modes, spectrum.theta):
            src = lat.lookup(modes - m) - 1          # l = k - m, index among nonzero modes
            dst = np.nonzero(src >= 0)[0]
            src = src[dst]
            q[dst, src] += 2 * eps * th * th * _proj_norm2(np.broadcast_to(m, (len(dst), len(m))),
                                                           modes[dst])
        q[np.arange(n), np.arange(n)] = -2 * eps * c * (modes**2).sum(axis=1)
    return QMatrix(modes, q, float(K), float(r))


@dataclass(frozen=True, eq=False)
class MomentTrajectory:
    """Snapshots ``x[i]`` at ``times[i]`` plus the cumulative boundary outflux."""

    times: np.ndarray
    x: np.ndarray
    outflux: np.ndarray
    modes: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.x.sum(axis=1)


def integrate_moments(q: QMatrix, x0, T: float, dt: float,
                      times: Sequence[float] | None = None) -> MomentTrajectory:
    """Classical RK4 on ``x' = q x`` with an outflux accumulator.

    The accumulator integrates ``-1^T q x``, so ``sum(x) + outflux`` is
    conserved by the scheme up to rounding.
    """
    x = q.vector(x0)
    if not (T > 0 and dt > 0):
        raise ContractError("T and dt must be positive")
    diag = np.abs(np.diag(q.q)).max(initial=0.0)
    if dt * diag > 0.5:
        raise ContractError(f"dt*max|q_kk| = {dt * diag:.3g} exceeds 0.5; use dt <= {0.5 / diag:.3g}")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * T:
        raise ContractError("T must be an integer multiple of dt")
    wanted = np.array([0.0, T] if times is None else list(times), dtype=float)
    slots = np.rint(wanted / dt).astype(int)
    if np.any(np.abs(slots * dt - wanted) > 1e-9 * max(T, 1.0)) or slots.max() > n_steps or slots.min() < 0:
        raise ContractError("requested times must be multiples of dt within [0, T]")

    leak = -q.col_sums()
    A = q.q

    out_x = np.empty((len(wanted), len(x)))
    out_f = np.empty(len(wanted))
    flux = 0.0
    for i in np.nonzero(slots == 0)[0]:
        out_x[i], out_f[i] = x, flux
    for n in range(1, n_steps + 1):
        y2 = x + 0.5 * dt * (A @ x)
        y3 = x + 0.5 * dt * (A @ y2)
        y4 = x + dt * (A @ y3)
        avg = (x + 2 * y2 + 2 * y3 + y4) / 6
        x_new = x + dt * (A @ avg)
        flux += dt * float(leak @ avg)
        x = x_new
        if x.min(initial=0.0) < -NEGATIVE_TOL:
            raise IntegratorToleranceError(
                f"moment {x.argmin()} reached {x.min():.3e} at t={n * dt:g}")
        for i in np.nonzero(slots == n)[0]:
            out_x[i], out_f[i] = x, flux
    return MomentTrajectory(wanted, out_x, out_f, q.modes)


@dataclass
class StationarityReport:
    """Diagnostics for stationary vectors of a truncated Q-matrix.

    ``constant_residual`` is ``max |(q 1)_k|`` over interior modes: constants
    are stationary for the untruncated relation but have infinite mass.
    ``sigma_min`` is the smallest singular value of ``q``; a positive value
    means no nonzero vector on the truncation is stationary.
    """

    n_interior: int
    constant_residual: float
    sigma_min: float
    decaying_residual: float
    zero_residual: float

    @property
    def only_zero_stationary(self) -> bool:
        return self.sigma_min > 1e-12 and self.decaying_residual > 0

    def as_dict(self) -> dict:
        return {"n_interior": self.n_interior, "constant_residual": self.constant_residual,
                "sigma_min": self.sigma_min, "decaying_residual": self.decaying_residual,
                "zero_residual": self.zero_residual,
                "only_zero_stationary": self.only_zero_stationary}


def stationarity_check(q: QMatrix, seed: int = 0) -> StationarityReport:
    inner = q.interior_mask
    ones = np.ones(len(q))
    const_res = float(np.abs((q.q @ ones)[inner]).max(initial=0.0))
    sigma = float(np.linalg.svd(q.q, compute_uv=False).min()) if len(q) else 0.0
    rng = np.random.default_rng(seed)
    decaying = rng.uniform(0.5, 1.5, len(q)) * np.exp(-q.norm2.astype(float))
    dec_res = float(np.linalg.norm(q.q @ decaying))
    zero_res = float(np.linalg.norm(q.q @ np.zeros(len(q))))
    return StationarityReport(int(inner.sum()), const_res, sigma, dec_res, zero_res)


def write_q_triplets(q: QMatrix, path) -> None:
    """Nonzero entries as CSV rows ``k, l, q`` with modes written as ``a;b``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "l", "q"])
        for i, j in zip(*np.nonzero(q.q)):
            w.writerow([_mode_str(q.modes[i]), _mode_str(q.modes[j]), f"{q.q[i, j]:.17e}"])


def _mode_str(k) -> str:
    return ";".join(str(int(c)) for c in k)


@dataclass
class MomentComparison:
    """Per (mode, checkpoint) Monte Carlo estimates against the moment ODE."""

    modes: np.ndarray
    times: np.ndarray
    mc_mean: np.ndarray        # (n_t, n_modes)
    mc_stderr: np.ndarray
    ode_value: np.ndarray
    z: np.ndarray
    interior: np.ndarray
    total_energy_mc: np.ndarray
    total_energy_stderr: np.ndarray
    initial_energy: float
    n_paths: int

    def max_abs_z(self, interior_only: bool = True) -> float:
        cols = self.interior if interior_only else np.ones(len(self.modes), bool)
        return float(np.abs(self.z[:, cols]).max(initial=0.0))

    def rows(self) -> list[dict]:
        out = []
        for ti, t in enumerate(self.times):
            for mi, k in enumerate(self.modes):
                out.append({"k": _mode_str(k), "t": float(t), "mc_mean": float(self.mc_mean[ti, mi]),
                            "mc_stderr": float(self.mc_stderr[ti, mi]),
                            "ode_value": float(self.ode_value[ti, mi]), "z": float(self.z[ti, mi]),
                            "interior": bool(self.interior[mi])})
        return out


def write_comparison_csv(cmp: MomentComparison, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "mc_mean", "mc_stderr", "ode_value", "z", "interior"])
        for r in cmp.rows():
            w.writerow([r["k"], f"{r['t']:.17e}", f"{r['mc_mean']:.17e}", f"{r['mc_stderr']:.17e}",
                        f"{r['ode_value']:.17e}", f"{r['z']:.17e}", int(r["interior"])])


def _zscore(diff: np.ndarray, err: np.ndarray) -> np.ndarray:
    z = np.zeros_like(diff)
    pos = err > 0
    z[pos] = diff[pos] / err[pos]
    bad = ~pos & (np.abs(diff) > 1e-12)
    z[bad] = np.inf * np.sign(diff[bad])
    return z


def moments_vs_montecarlo(config, u0: SpectralField, M_paths: int,
                          checkpoints: Sequence[float] | None = None,
                          threads: int = 1) -> MomentComparison:
    """Empirical ``E|u_k(t)|^2`` from ``M_paths`` Galerkin paths against the
    moment ODE on the same truncation."""
    from .galerkin import simulate_ensemble

    if config.drift:
        raise ContractError("the closed moment system requires b = 0")
    ens = simulate_ensemble(config, u0, M_paths, threads=threads)
    times = np.asarray(ens.times)
    if checkpoints is None:
        sel = np.arange(1, len(times))
    else:
        sel = np.array([int(np.argmin(np.abs(times - t))) for t in checkpoints])
        if np.any(np.abs(times[sel] - np.asarray(checkpoints)) > 1e-9 * max(1.0, config.T)):
            raise ContractError("checkpoints must lie on the output grid of the run")
    q = build_q_matrix(config.spectrum, config.epsilon, config.cutoff)
    # Galerkin lattice and Q share ordering, minus the zero mode at index 0
    power = np.abs(ens.coeffs[:, sel, 1:]) ** 2          # (P, n_t, n_modes)
    mean = power.mean(axis=0)
    err = power.std(axis=0, ddof=1) / math.sqrt(M_paths) if M_paths > 1 else np.zeros_like(mean)

    x0 = np.abs(u0.on_lattice(ens.lattice)[1:]) ** 2
    diag = np.abs(np.diag(q.q)).max(initial=0.0)
    sub = max(1, math.ceil(config.dt * diag / 0.25))
    ode_dt = config.dt / sub
    traj = integrate_moments(q, x0, times[-1], ode_dt, times[sel])
    z = _zscore(mean - traj.x, err)

    energy = ens.energy[:, sel]
    e_err = energy.std(axis=0, ddof=1) / math.sqrt(M_paths) if M_paths > 1 else np.zeros(len(sel))
    return MomentComparison(q.modes, times[sel], mean, err, traj.x, z, q.interior_mask,
                            energy.mean(axis=0), e_err, float(u0.norm2()), M_paths)
