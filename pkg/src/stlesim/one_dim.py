"""One-dimensional transport noise in the real Fourier basis.

Basis on the circle (normalized measure): ``e_0 = 1``, ``e_k = sqrt(2) cos(kx)``
and ``e_{-k} = sqrt(2) sin(kx)`` for ``k > 0``; with this choice
``e_k' = -k e_{-k}`` for every integer ``k``.  The noise is
``sum_k lambda_k e_k dW_k`` with independent real Brownian motions, acting
through ``M_k u = lambda_k (2 e_k u' + e_k' u)``.  Its Ito correction
``1/2 sum_k M_k^2`` equals ``-friction * u + diffusion * u''`` with
``friction = 1/2 sum k^2 lambda_k^2`` and ``diffusion = 2 sum lambda_k^2``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BlowUpError, ConfigError, ContractError, SpectrumError
from .noise import path_stream
from .scaling import ConvergenceTable, distances_decreasing

__all__ = [
    "RealSpectralField1D",
    "Spectrum1D",
    "basis_function",
    "basis_product",
    "mk_matrix",
    "apply_Mk",
    "derivative",
    "ito_corrector_1d",
    "epsilon_1d",
    "sum_inequality_check",
    "Config1D",
    "Trajectory1D",
    "simulate_1d",
    "run_friction_limit",
]

SQRT2 = math.sqrt(2.0)
SUM_INV_SQUARES = math.pi**2 / 3  # sum over k != 0 of 1/k^2


@dataclass(frozen=True, eq=False)
class RealSpectralField1D:
    """Real amplitudes ``coeffs[k + K]`` for ``-K <= k <= K``."""

    coeffs: np.ndarray
    K: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (2 * self.K + 1,):
            raise ContractError(f"expected {2 * self.K + 1} coefficients for K={self.K}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_dict(cls, coeffs: Mapping[int, float], K: int | None = None) -> "RealSpectralField1D":
        K = max((abs(int(k)) for k in coeffs), default=0) if K is None else int(K)
        out = np.zeros(2 * K + 1)
        for k, v in coeffs.items():
            if abs(int(k)) > K:
                raise ContractError(f"mode {k} beyond K={K}")
            out[int(k) + K] = float(v)
        return cls(out, K)

    @classmethod
    def zero(cls, K: int) -> "RealSpectralField1D":
        return cls(np.zeros(2 * K + 1), K)

    def to_dict(self) -> dict[int, float]:
        return {k: float(v) for k, v in zip(range(-self.K, self.K + 1), self.coeffs) if v != 0}

    def coeff(self, k: int) -> float:
        return float(self.coeffs[k + self.K]) if abs(k) <= self.K else 0.0

    @property
    def radius(self) -> int:
        nz = np.nonzero(self.coeffs)[0]
        return int(np.abs(nz - self.K).max()) if len(nz) else 0

    def resized(self, K: int) -> "RealSpectralField1D":
        """Same field on ``-K..K``; raises if that would drop nonzero modes."""
        if K < self.radius:
            raise ContractError(f"field has modes up to {self.radius}, cannot resize to {K}")
        out = np.zeros(2 * K + 1)
        r = min(K, self.K)
        out[K - r:K + r + 1] = self.coeffs[self.K - r:self.K + r + 1]
        return RealSpectralField1D(out, K)

    def norm2(self) -> float:
        return float(self.coeffs @ self.coeffs)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for k, v in zip(range(-self.K, self.K + 1), self.coeffs):
            if v != 0:
                out = out + v * basis_function(k, x)
        return out

    def __add__(self, other: "RealSpectralField1D") -> "RealSpectralField1D":
        K = max(self.K, other.K)
        return RealSpectralField1D(self.resized(K).coeffs + other.resized(K).coeffs, K)

    def __sub__(self, other: "RealSpectralField1D") -> "RealSpectralField1D":
        return self + other.scaled(-1.0)

    def scaled(self, factor: float) -> "RealSpectralField1D":
        return RealSpectralField1D(self.coeffs * factor, self.K)


def basis_function(k: int, x: np.ndarray) -> np.ndarray:
    if k == 0:
        return np.ones_like(np.asarray(x, dtype=float))
    return SQRT2 * (np.cos(k * x) if k > 0 else np.sin(-k * x))


def _cos(m: int) -> list[tuple[int, float]]:
    """``cos(m x)`` in the real basis."""
    m = abs(m)
    return [(0, 1.0)] if m == 0 else [(m, 1 / SQRT2)]


def _sin(m: int) -> list[tuple[int, float]]:
    """``sin(m x)`` in the real basis."""
    if m == 0:
        return []
    return [(-m, 1 / SQRT2)] if m > 0 else [(m, -1 / SQRT2)]


def basis_product(a: int, b: int) -> list[tuple[int, float]]:
    """``e_a e_b`` as ``[(index, coefficient)]`` via product-to-sum identities."""
    amp = (1.0 if a == 0 else SQRT2) * (1.0 if b == 0 else SQRT2)
    p, q = abs(a), abs(b)
    sa, sb = a < 0, b < 0
    if not sa and not sb:      # cos p cos q
        terms = [(c, 0.5 * v) for c, v in _cos(p - q) + _cos(p + q)]
    elif sa and sb:            # sin p sin q
        terms = [(c, 0.5 * v) for c, v in _cos(p - q)] + [(c, -0.5 * v) for c, v in _cos(p + q)]
    else:                      # sin p cos q
        if sb:
            p, q = q, p
        terms = [(c, 0.5 * v) for c, v in _sin(p + q) + _sin(p - q)]
    out: dict[int, float] = {}
    for c, v in terms:
        out[c] = out.get(c, 0.0) + amp * v
    return [(c, v) for c, v in out.items() if v != 0]


def derivative(u: RealSpectralField1D) -> RealSpectralField1D:
    """``u'`` using ``e_k' = -k e_{-k}``."""
    out = np.zeros_like(u.coeffs)
    for k in range(-u.K, u.K + 1):
        out[-k + u.K] += -k * u.coeffs[k + u.K]
    return RealSpectralField1D(out, u.K)


def _mk_terms(k: int, l: int) -> dict[int, float]:
    """``M_k e_l / lambda_k = -2 l e_k e_{-l} - k e_{-k} e_l``."""
    out: dict[int, float] = {}
    for c, v in basis_product(k, -l):
        out[c] = out.get(c, 0.0) - 2 * l * v
    for c, v in basis_product(-k, l):
        out[c] = out.get(c, 0.0) - k * v
    return out


def apply_Mk(u: RealSpectralField1D, k: int, lam: float) -> RealSpectralField1D:
    """``lambda_k (2 e_k u' + e_k' u)`` exactly (support grows by ``|k|``)."""
    K = u.K + abs(k)
    out = np.zeros(2 * K + 1)
    if lam != 0:
        for l in range(-u.K, u.K + 1):
            ul = u.coeffs[l + u.K]
            if ul == 0:
                continue
            for c, v in _mk_terms(k, l).items():
                out[c + K] += lam * v * ul
    return RealSpectralField1D(out, K)


def mk_matrix(k: int, lam: float, K: int) -> np.ndarray:
    """Galerkin matrix of ``M_k`` on ``-K..K`` (antisymmetric)."""
    n = 2 * K + 1
    A = np.zeros((n, n))
    for l in range(-K, K + 1):
        for c, v in _mk_terms(k, l).items():
            if abs(c) <= K:
                A[c + K, l + K] += lam * v
    return A


@dataclass(frozen=True, eq=False)
class Spectrum1D:
    """Even weights ``lambda_k`` on nonzero integers."""

    lam: Mapping[int, float]

    def __post_init__(self):
        lam = {int(k): float(v) for k, v in dict(self.lam).items() if v != 0}
        if lam.get(0, 0.0) != 0:
            raise SpectrumError("lambda_0 must vanish")
        for k, v in lam.items():
            if lam.get(-k, 0.0) != v:
                raise SpectrumError(f"lambda is not even: lambda_{k}={v}, lambda_{-k}={lam.get(-k, 0.0)}")
        object.__setattr__(self, "lam", dict(sorted(lam.items())))

    @classmethod
    def shell(cls, N: int, value: float = 1.0) -> "Spectrum1D":
        """``lambda_k = value`` on ``0 < |k| <= N``."""
        return cls({k: value for k in range(-N, N + 1) if k != 0})

    def __len__(self) -> int:
        return len(self.lam)

    @cached_property
    def sum_sq(self) -> float:
        return float(sum(v * v for v in self.lam.values()))

    @cached_property
    def sum_k2_sq(self) -> float:
        return float(sum(k * k * v * v for k, v in self.lam.items()))

    @property
    def radius(self) -> int:
        return max((abs(k) for k in self.lam), default=0)


def ito_corrector_1d(s: Spectrum1D) -> tuple[float, float]:
    """``(friction, diffusion) = (1/2 sum k^2 lambda^2, 2 sum lambda^2)``."""
    return 0.5 * s.sum_k2_sq, 2.0 * s.sum_sq


def epsilon_1d(s: Spectrum1D, nu: float) -> float:
    """``eps = 2 nu / sum k^2 lambda_k^2``, so that ``eps * friction = nu``."""
    if not s.sum_k2_sq > 0:
        raise SpectrumError("the spectrum is empty")
    return 2.0 * nu / s.sum_k2_sq


def sum_inequality_check(s: Spectrum1D) -> dict:
    """``sum lambda^2 <= sup_k (k lambda_k)^2 * sum_{k != 0} 1/k^2``."""
    sup = max((k * k * v * v for k, v in s.lam.items()), default=0.0)
    rhs = sup * SUM_INV_SQUARES
    return {"sum_sq": s.sum_sq, "sup_k_lambda_sq": sup, "rhs": rhs, "holds": s.sum_sq <= rhs * (1 + 1e-15)}


@dataclass(frozen=True, eq=False)
class Config1D:
    """A 1-d run.  ``b`` is a real field in the same basis (constant in time)."""

    spectrum: Spectrum1D
    K: int
    epsilon: float
    T: float
    dt: float
    b: RealSpectralField1D | None = None
    scheme: str = "euler_maruyama"
    seed: int = 0
    output_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("must be positive", "dt")
        if not self.T > 0:
            raise ConfigError("must be positive", "T")
        if self.epsilon < 0:
            raise ConfigError("must be nonnegative", "epsilon")
        if self.scheme not in ("euler_maruyama", "heun_stratonovich"):
            raise ConfigError(f"unknown scheme {self.scheme!r}", "scheme")
        if self.K < self.spectrum.radius:
            raise ConfigError("Galerkin cutoff below the noise support", "K")
        fr, di = ito_corrector_1d(self.spectrum)
        stiff = self.epsilon * (fr + di * self.K**2) * self.dt
        if stiff > 0.5:
            raise ConfigError(f"eps*(friction + diffusion K^2)*dt = {stiff:.3g} exceeds 0.5", "dt")

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if abs(n * self.dt - self.T) > 1e-9 * self.T:
            raise ConfigError("T must be a multiple of dt", "T")
        return n

    def output_steps(self) -> np.ndarray:
        steps = list(range(0, self.n_steps + 1, self.output_every))
        if steps[-1] != self.n_steps:
            steps.append(self.n_steps)
        return np.array(steps)


class System1D:
    def __init__(self, config: Config1D):
        K = config.K
        s = config.spectrum
        eps = config.epsilon
        fr, di = ito_corrector_1d(s)
        idx = np.arange(-K, K + 1)
        self.ito_diag = eps * (-fr - di * idx.astype(float) ** 2)
        self.noise_modes = np.array(list(s.lam.keys()), dtype=int)
        root = math.sqrt(eps)
        n = 2 * K + 1
        # sparse products sum each row in a fixed order, so a path's result
        # does not depend on how many paths share the batch
        blocks = [root * mk_matrix(k, v, K) for k, v in s.lam.items()]
        self.G = sp.csr_matrix(np.hstack(blocks)) if blocks else None
        self.n = n
        self.B = None
        if config.b is not None:
            self.B = sp.csr_matrix(_multiply_matrix(config.b, K) @ _derivative_matrix(K))

    def drift(self, u: np.ndarray, ito: bool) -> np.ndarray:
        out = self.ito_diag[:, None] * u if ito else np.zeros_like(u)
        if self.B is not None:
            out = out + self.B @ u
        return out

    def noise(self, u: np.ndarray, dW: np.ndarray) -> np.ndarray:
        # u: (n, P), dW: (n_noise, P); G stacks the M_k blocks side by side
        if self.G is None:
            return np.zeros_like(u)
        return self.G @ (dW[:, None, :] * u[None, :, :]).reshape(-1, u.shape[1])

    def advance(self, u, dt, dW, scheme):
        if scheme == "euler_maruyama":
            return u + self.drift(u, True) * dt + self.noise(u, dW)
        f0 = self.drift(u, False)
        g0 = self.noise(u, dW)
        pred = u + f0 * dt + g0
        return u + 0.5 * (f0 + self.drift(pred, False)) * dt + 0.5 * (g0 + self.noise(pred, dW))


def _derivative_matrix(K: int) -> np.ndarray:
    n = 2 * K + 1
    D = np.zeros((n, n))
    for k in range(-K, K + 1):
        D[-k + K, k + K] = -k
    return D


def _multiply_matrix(b: RealSpectralField1D, K: int) -> np.ndarray:
    """Galerkin matrix of multiplication by ``b`` on ``-K..K``."""
    n = 2 * K + 1
    A = np.zeros((n, n))
    for m in range(-b.K, b.K + 1):
        bm = b.coeffs[m + b.K]
        if bm == 0:
            continue
        for l in range(-K, K + 1):
            for c, v in basis_product(m, l):
                if abs(c) <= K:
                    A[c + K, l + K] += bm * v
    return A


@dataclass(frozen=True, eq=False)
class Trajectory1D:
    """Coefficients (P, n_out, 2K+1) of ``P`` paths."""

    times: np.ndarray
    coeffs: np.ndarray
    K: int
    path_ids: np.ndarray

    @property
    def energy(self) -> np.ndarray:
        return (self.coeffs**2).sum(axis=-1)

    def mode(self, k: int) -> np.ndarray:
        return self.coeffs[..., k + self.K]


def _run_batch_1d(config: Config1D, u0: np.ndarray, ids) -> np.ndarray:
    system = System1D(config)
    n_noise = len(system.noise_modes)
    P = len(ids)
    dW = np.stack([path_stream(config.seed, p).standard_normal((config.n_steps, n_noise)) for p in ids],
                  axis=-1) * math.sqrt(config.dt)   # (n_steps, n_noise, P)
    steps = config.output_steps()
    out = np.empty((P, len(steps), len(u0)))
    u = np.repeat(u0[:, None], P, axis=1)
    out[:, 0] = u.T
    slot = 1
    for n in range(config.n_steps):
        u = system.advance(u, config.dt, dW[n], config.scheme)
        if not np.all(np.isfinite(u)):
            raise BlowUpError(n + 1, (n + 1) * config.dt)
        if slot < len(steps) and steps[slot] == n + 1:
            out[:, slot] = u.T
            slot += 1
    return out


def simulate_1d(config: Config1D, u0: RealSpectralField1D, n_paths: int = 1, first_path: int = 0,
                batch_size: int = 256, threads: int = 1) -> Trajectory1D:
    """Paths ``first_path ..`` of the 1-d Galerkin system; path ``p`` uses
    ``path_stream(config.seed, p)``."""
    c0 = u0.resized(config.K).coeffs if u0.radius <= config.K else None
    if c0 is None:
        raise ContractError("u0 has modes beyond the Galerkin cutoff")
    ids = np.arange(first_path, first_path + n_paths)
    batches = [ids[i:i + batch_size] for i in range(0, n_paths, batch_size)]
    if threads > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_batch_1d, [config] * len(batches), [c0] * len(batches), batches))
    else:
        parts = [_run_batch_1d(config, c0, b) for b in batches]
    return Trajectory1D(config.output_steps() * config.dt, np.concatenate(parts), config.K, ids)


def _test_matrix_1d(labels_modes: Sequence[int], K: int) -> np.ndarray:
    M = np.zeros((2 * K + 1, len(labels_modes)))
    for j, k in enumerate(labels_modes):
        M[k + K, j] = 1.0
    return M


def run_friction_limit(sequence: Sequence[tuple[int, Spectrum1D]], nu: float, u0: RealSpectralField1D,
                       T: float, dt: float, M_paths: int, b: RealSpectralField1D | None = None,
                       test_modes: Sequence[int] = (-2, -1, 0, 1, 2), n_out: int = 10,
                       scheme: str = "euler_maruyama", seed: int = 0,
                       threads: int = 1) -> ConvergenceTable:
    """Ensembles at ``eps_N = epsilon_1d`` against ``exp(-nu t) u0``.

    Only ``b = 0`` has the closed-form reference; with a drift the table is
    still produced but distances are measured against ``exp(-nu t) u0``.
    The summary also reports, per ``N``, the analytic coefficient
    ``eps * diffusion`` and the one recovered from the decay of the
    ensemble mean of the lowest excited mode.
    """
    if not nu > 0:
        raise ConfigError("must be positive", "nu")
    stride = int(round(T / n_out / dt))
    if stride < 1 or abs(stride * n_out * dt - T) > 1e-9 * T:
        raise ConfigError("T / n_out must be a multiple of dt", "dt")
    times = np.arange(n_out + 1) * stride * dt
    probe = next((k for k in sorted(u0.to_dict(), key=lambda k: (abs(k), -k)) if k != 0), None)
    labels = tuple(f"e_{k}" for k in test_modes)
    rows, long_rows, diffusions = [], [], []
    for N, s in sequence:
        eps = epsilon_1d(s, nu)
        K = s.radius + u0.radius
        cfg = Config1D(s, K, eps, T, dt, b=b, scheme=scheme, seed=seed, output_every=stride)
        traj = simulate_1d(cfg, u0, M_paths, threads=threads)
        R = _test_matrix_1d(test_modes, K)
        pr = traj.coeffs @ R                                     # (P, n_t, n_tests)
        ref_pr = np.exp(-nu * times)[:, None] * np.array([u0.coeff(k) for k in test_modes])[None, :]
        diff = pr - ref_pr[None]
        var = pr.var(axis=0, ddof=1)
        mean = pr.mean(axis=0)
        sup_dist = np.abs(diff).max(axis=1).mean(axis=0)
        fr, di = ito_corrector_1d(s)
        meas = float("nan")
        if probe is not None:
            ratio = traj.mode(probe)[:, -1].mean() / u0.coeff(probe)
            n = cfg.n_steps
            rate = (1 - ratio ** (1.0 / n)) / dt if ratio > 0 else float("inf")
            meas = (rate - nu) / probe**2
        diffusions.append({"N": N, "epsilon": eps, "eps_friction": eps * fr, "eps_diffusion": eps * di,
                           "measured_eps_diffusion": meas,
                           "inequality": sum_inequality_check(s)})
        for m, label in enumerate(labels):
            rows.append({"N": N, "phi": label, "epsilon": eps, "sum_sq": s.sum_sq,
                         "ratio": max(v * v for v in s.lam.values()) / s.sum_sq, "n_paths": M_paths,
                         "cutoff": float(K), "dt": dt, "sup_distance": float(sup_dist[m]),
                         "mean_distance": float(np.abs(diff[..., m]).mean()),
                         "max_variance": float(var[:, m].max()), "variance_bound": float("nan"),
                         "mean_max_z": float("nan")})
            for ti, t in enumerate(times):
                long_rows.append({"N": N, "phi": label, "t": float(t), "mean": float(mean[ti, m]),
                                  "ref": float(ref_pr[ti, m]), "variance": float(var[ti, m])})
    table = ConvergenceTable(rows, times, labels, long_rows=long_rows)
    dec = distances_decreasing(table)
    analytic = [d["eps_diffusion"] for d in diffusions]
    measured = [d["measured_eps_diffusion"] for d in diffusions]
    table.summary = {
        "nu": nu, "T": T, "dt": dt, "M_paths": M_paths, "seed": seed, "scheme": scheme,
        "diffusion": diffusions,
        "rules": {
            "distance_strictly_decreasing": {"passed": all(dec.values()), "per_phi": dec},
            "eps_friction_equals_nu": {"passed": all(abs(d["eps_friction"] - nu) <= 4 * np.finfo(float).eps * nu
                                                     for d in diffusions)},
            "analytic_diffusion_decreasing": {"passed": all(b_ < a for a, b_ in zip(analytic, analytic[1:]))},
            "measured_diffusion_decreasing": {"passed": all(b_ < a for a, b_ in zip(measured, measured[1:]))},
            "sum_inequality": {"passed": all(d["inequality"]["holds"] for d in diffusions)},
        },
    }
    return table
