"""Scaling-limit experiment: renormalized noise ensembles against the
deterministic parabolic solution, measured through a finite family of test
functions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .galerkin import Ensemble, SdeRunConfig, Trajectory, div_sup_norm, simulate_ensemble
from .noise import SpectrumSequence, corrector_constant, epsilon_for_nu
from .parabolic import solve_parabolic
from .spectral import Lattice, SpectralField, evaluate_physical, in_half_lattice

__all__ = [
    "TestFunctionSet",
    "ConvergenceTable",
    "pairings",
    "weak_star_distance",
    "galerkin_cutoff",
    "step_schedule",
    "run_scaling_experiment",
    "distances_decreasing",
    "variance_scaling_ok",
]

DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class TestFunctionSet:
    """Real scalar test functions given by their Fourier coefficients."""

    __test__ = False  # not a pytest class

    functions: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.functions) != len(self.labels):
            raise ContractError("one label per test function is required")
        for f in self.functions:
            if f.ncomp != 1 or not f.is_hermitian():
                raise ContractError("test functions must be real scalar fields")

    def __len__(self) -> int:
        return len(self.functions)

    @property
    def dim(self) -> int:
        return self.functions[0].dim

    @classmethod
    def default(cls, dim: int, radius: float = 2.0) -> "TestFunctionSet":
        """The constant plus ``cos(k.x)`` and ``sin(k.x)`` for half-lattice
        ``0 < |k| <= radius``."""
        fns = [SpectralField.from_dict(dim, {(0,) * dim: 1.0})]
        labels = ["const"]
        for k in Lattice(dim, radius).modes[1:]:
            if not in_half_lattice(k):
                continue
            k = tuple(int(c) for c in k)
            nk = tuple(-c for c in k)
            tag = ",".join(map(str, k))
            fns.append(SpectralField.from_dict(dim, {k: 0.5, nk: 0.5}))
            labels.append(f"cos({tag})")
            fns.append(SpectralField.from_dict(dim, {k: -0.5j, nk: 0.5j}))
            labels.append(f"sin({tag})")
        return cls(tuple(fns), tuple(labels))

    def matrix(self, lattice: Lattice) -> np.ndarray:
        """``(K, n_tests)`` array of ``conj(phi_k)`` so that ``coeffs @ M`` pairs."""
        for f in self.functions:
            if f.radius() > lattice.cutoff + 1e-9:
                raise ContractError("test function has modes beyond the lattice")
        return np.conj(np.stack([f.on_lattice(lattice) for f in self.functions], axis=1))

    def grad_sup(self, grid: int = 64) -> np.ndarray:
        """``||grad phi||_inf`` per test function, sampled on a grid."""
        out = []
        for f in self.functions:
            grads = SpectralField(f.dim, f.modes, 1j * f.modes * f.values, f.cutoff)
            if np.abs(grads.values).max(initial=0.0) == 0:
                out.append(0.0)
                continue
            vals = evaluate_physical(grads, grid)
            out.append(float(np.sqrt((np.abs(vals) ** 2).sum(axis=0)).max()))
        return np.array(out)


def pairings(coeffs: np.ndarray, lattice: Lattice, tests: TestFunctionSet) -> np.ndarray:
    """``<u, phi_m> = sum_k u_k conj(phi_m,k)`` along the last axis of ``coeffs``."""
    return np.real(coeffs @ tests.matrix(lattice))


def _as_traj(x) -> tuple[np.ndarray, np.ndarray, Lattice]:
    if isinstance(x, (Trajectory, Ensemble)):
        return np.asarray(x.times), x.coeffs, x.lattice
    raise ContractError("expected a Trajectory or Ensemble")


def weak_star_distance(traj, ref, tests: TestFunctionSet) -> np.ndarray:
    """``max_t |<u(t) - ref(t), phi>|`` per test function.

    For an ensemble the result has shape (n_paths, n_tests).
    """
    t1, c1, l1 = _as_traj(traj)
    t2, c2, l2 = _as_traj(ref)
    if len(t1) != len(t2) or np.abs(t1 - t2).max(initial=0.0) > 1e-9 * max(1.0, float(t1[-1])):
        raise ContractError("trajectories are sampled on different time grids")
    diff = pairings(c1, l1, tests) - pairings(c2, l2, tests)
    return np.abs(diff).max(axis=-2)


def galerkin_cutoff(spectrum_radius: float, u0: SpectralField, margin: float = 0.0) -> float:
    return float(spectrum_radius + u0.radius() + margin)


def step_schedule(T: float, n_out: int, nu: float, cutoff: float, cfl: float) -> tuple[float, int]:
    """Time step and output stride with ``nu * cutoff^2 * dt <= cfl`` on a
    common grid of ``n_out`` output intervals."""
    interval = T / n_out
    per = max(1, math.ceil(interval * nu * cutoff * cutoff / cfl))
    return interval / per, per


@dataclass
class ConvergenceTable:
    """One row per (N, test function) plus run-level metadata."""

    rows: list[dict]
    times: np.ndarray
    labels: tuple
    summary: dict = field(default_factory=dict)
    long_rows: list[dict] = field(default_factory=list)

    COLUMNS = ("N", "phi", "epsilon", "sum_sq", "ratio", "n_paths", "cutoff", "dt",
               "sup_distance", "mean_distance", "max_variance", "variance_bound",
               "mean_max_z")

    def column(self, name: str, phi: str | None = None) -> np.ndarray:
        rows = [r for r in self.rows if phi is None or r["phi"] == phi]
        return np.array([r[name] for r in rows])

    @property
    def Ns(self) -> list:
        seen = []
        for r in self.rows:
            if r["N"] not in seen:
                seen.append(r["N"])
        return seen

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.COLUMNS])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)

    def write_long(self, path) -> None:
        """Whitespace-separated ``N phi t mean ref variance`` lines."""
        with open(path, "w") as fh:
            fh.write("# N phi t mean_pairing ref_pairing variance\n")
            for r in self.long_rows:
                fh.write(f"{r['N']} {r['phi']} {r['t']:.17e} {r['mean']:.17e} "
                         f"{r['ref']:.17e} {r['variance']:.17e}\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)


def distances_decreasing(table: ConvergenceTable, column: str = "sup_distance") -> dict[str, bool]:
    """Per test function: strictly decreasing along N, where values at or
    below ``DISTANCE_FLOOR`` count as already converged."""
    out = {}
    for phi in table.labels:
        d = table.column(column, phi)
        ok = True
        for a, b in zip(d[:-1], d[1:]):
            if b <= DISTANCE_FLOOR:
                continue
            if not b < a:
                ok = False
        out[phi] = ok
    return out


def variance_scaling_ok(table: ConvergenceTable, factor: float = 4.0) -> dict[str, bool]:
    """``var_{N'} / var_N <= factor * ratio_{N'} / ratio_N`` for consecutive N."""
    out = {}
    for phi in table.labels:
        v = table.column("max_variance", phi)
        r = table.column("ratio", phi)
        ok = True
        for i in range(len(v) - 1):
            if v[i + 1] <= DISTANCE_FLOOR**2:
                continue
            if v[i] <= 0 or v[i + 1] / v[i] > factor * r[i + 1] / r[i]:
                ok = False
        out[phi] = ok
    return out


def run_scaling_experiment(sequence: SpectrumSequence, b, u0: SpectralField, nu: float, T: float,
                           M_paths: int, tests: TestFunctionSet | None = None, n_out: int = 10,
                           cfl: float = 0.25, dt: float | None = None, scheme: str = "euler_maruyama",
                           seed: int = 0, threads: int = 1, cutoff_margin: float = 0.0,
                           bound_slack: float = 2.0, freeze_noise: bool = False) -> ConvergenceTable:
    """Simulate every spectrum of ``sequence`` at ``eps^N = epsilon_for_nu``
    and compare pairings with the parabolic solution at viscosity ``nu``.

    ``dt`` defaults to the schedule ``nu * cutoff^2 * dt <= cfl``.  With
    ``freeze_noise`` the noise amplitude is forced to zero, so paths stay at
    ``u0`` (a diagnostic hook).
    """
    if not nu > 0:
        raise ConfigError("must be positive", "nu")
    if M_paths < 2:
        raise ConfigError("at least two paths are needed for variances", "M_paths")
    if abs(sequence.nu - nu) > 1e-12 * nu:
        raise ConfigError(f"sequence was built for nu={sequence.nu}, not {nu}", "nu")
    tests = tests or TestFunctionSet.default(u0.dim)
    cutoffs = [galerkin_cutoff(s.radius, u0, cutoff_margin) for _, s in sequence]
    ref_cutoff = max(cutoffs)
    out_times = np.linspace(0.0, T, n_out + 1)

    plans = []
    for (N_label, s), cut in zip(sequence, cutoffs):
        if dt is None:
            h, stride = step_schedule(T, n_out, nu, cut, cfl)
        else:
            stride = int(round(T / n_out / dt))
            if stride < 1 or abs(stride * dt * n_out - T) > 1e-9 * T:
                raise ConfigError("T / n_out must be a multiple of dt", "dt")
            h = dt
        plans.append((N_label, s, cut, h, stride))

    h_ref = min(p[3] for p in plans)
    ref = solve_parabolic(u0, b, nu, T, h_ref, ref_cutoff, out_times)
    ref_pair = pairings(ref.coeffs, ref.lattice, tests)          # (n_t, n_tests)

    grad = tests.grad_sup()
    div_rate = div_sup_norm(b) if b is not None else 0.0
    d = u0.dim
    rows, long_rows = [], []
    renorm = []
    for N_label, s, cut, h, stride in plans:
        eps = 0.0 if freeze_noise else epsilon_for_nu(s, nu)
        renorm.append(abs(epsilon_for_nu(s, nu) * corrector_constant(s) - nu) / nu)
        cfg = SdeRunConfig(s, cut, eps, T, h, drift=b, scheme=scheme, seed=seed,
                           output_every=stride, check_cfl=True)
        ens = simulate_ensemble(cfg, u0, M_paths, threads=threads, zero_noise=freeze_noise)
        if len(ens.times) != len(out_times) or np.abs(ens.times - out_times).max() > 1e-9 * T:
            raise ContractError("ensemble output grid does not match the reference grid")
        pr = pairings(ens.coeffs, ens.lattice, tests)             # (P, n_t, n_tests)
        diff = pr - ref_pair[None]
        sup_dist = np.abs(diff).max(axis=1).mean(axis=0)
        mean_dist = np.abs(diff).mean(axis=(0, 1))
        var = pr.var(axis=0, ddof=1)
        mean = pr.mean(axis=0)
        stderr = np.sqrt(var / M_paths)
        gap = np.abs(mean - ref_pair)
        z = np.where(stderr > 0, gap / np.where(stderr > 0, stderr, 1.0),
                     np.where(gap > DISTANCE_FLOOR, np.inf, 0.0))
        ratio = s.ratio
        bound = (bound_slack * 2 * nu * d / (d - 1) * ratio * grad**2 * T * u0.norm2()
                 * math.exp(div_rate * T))
        for m, label in enumerate(tests.labels):
            rows.append({"N": N_label, "phi": label, "epsilon": float(eps), "sum_sq": float(s.sum_sq),
                         "ratio": float(ratio), "n_paths": int(M_paths), "cutoff": float(cut),
                         "dt": float(h), "sup_distance": float(sup_dist[m]),
                         "mean_distance": float(mean_dist[m]), "max_variance": float(var[:, m].max()),
                         "variance_bound": float(bound[m]), "mean_max_z": float(z[:, m].max())})
            for ti, t in enumerate(out_times):
                long_rows.append({"N": N_label, "phi": label, "t": float(t), "mean": float(mean[ti, m]),
                                  "ref": float(ref_pair[ti, m]), "variance": float(var[ti, m])})

    table = ConvergenceTable(rows, out_times, tests.labels, long_rows=long_rows)
    dec = distances_decreasing(table)
    vs = variance_scaling_ok(table)
    within_bound = all(r["max_variance"] <= r["variance_bound"] + 1e-300 for r in rows)
    mean_ok = all(r["mean_max_z"] <= 3.0 for r in rows)
    table.summary = {
        "Ns": table.Ns,
        "nu": nu, "T": T, "M_paths": M_paths, "seed": seed, "scheme": scheme,
        "renormalization_max_rel_error": float(max(renorm)),
        "ratios": [float(s.ratio) for _, s in sequence],
        "rules": {
            "distance_strictly_decreasing": {"passed": all(dec.values()), "per_phi": dec},
            "variance_scaling_factor_4": {"passed": all(vs.values()), "per_phi": vs},
            "variance_within_bound": {"passed": bool(within_bound), "slack": bound_slack},
            "mean_within_3_stderr": {"passed": bool(mean_ok),
                                     "max_z": float(max(r["mean_max_z"] for r in rows))},
        },
    }
    return table
