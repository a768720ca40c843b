import csv
import itertools

import numpy as np
import pytest

from stlesim.errors import ContractError, IntegratorToleranceError
from stlesim.galerkin import SdeRunConfig
from stlesim.moments import (build_q_matrix, integrate_moments, moments_vs_montecarlo,
                             stationarity_check, write_comparison_csv, write_q_triplets)
from stlesim.noise import NoiseSpectrum, build_spectrum

from conftest import cos_pair


def brute_column_sum(spectrum, l):
    """sum_k 2 theta_{k-l}^2 |P_{k-l} k|^2 over the untruncated lattice."""
    l = np.array(l, float)
    total = 0.0
    for m, th in zip(spectrum.modes.astype(float), spectrum.theta):
        k = l + m
        pk = k - m * (m @ k) / (m @ m)
        total += 2 * th * th * (pk @ pk)
    return total


class TestQMatrix:
    def test_hand_entries(self, shell2d):
        q = build_q_matrix(shell2d, 1.0, 3)
        assert q.entry((1, 1), (1, 0)) == 2.0
        assert q.entry((2, 0), (1, 0)) == 0.0
        assert q.entry((1, 0), (1, 0)) == -4.0
        assert q.entry((1, -1), (1, 0)) == 2.0

    def test_zero_eps(self, shell2d):
        assert np.all(build_q_matrix(shell2d, 0.0, 3).q == 0)

    def test_sign_pattern(self, shell3d):
        q = build_q_matrix(shell3d, 0.7, 3)
        off = q.q - np.diag(np.diag(q.q))
        assert off.min() >= 0
        assert np.all(np.diag(q.q) < 0)

    @pytest.mark.parametrize("dim,K", [(2, 6), (3, 3)])
    def test_interior_row_and_column_sums(self, dim, K):
        s = build_spectrum("shell_indicator", {"alpha": 0.5}, dim, 2)
        q = build_q_matrix(s, 0.3, K)
        inner = q.interior_mask
        assert inner.any()
        assert np.abs(q.row_sums()[inner]).max() < 1e-10
        assert np.abs(q.col_sums()[inner]).max() < 1e-10
        # boundary modes leak
        assert q.col_sums()[~inner].min() < 0

    def test_column_identity_by_brute_force(self):
        # independent check of sum_k 2 theta^2 |P_{k-l} k|^2 = 2 c |l|^2
        for dim in (2, 3):
            s = build_spectrum("power_law_exponent", {"alpha": 1.0}, dim, 2)
            c = (dim - 1) / dim * s.sum_sq
            for l in itertools.product(range(-2, 3), repeat=dim):
                if any(l):
                    assert brute_column_sum(s, l) == pytest.approx(2 * c * sum(x * x for x in l), rel=1e-12)

    def test_small_K_warns(self):
        s = build_spectrum("shell_indicator", {"alpha": 0.5}, 2, 2)
        with pytest.warns(RuntimeWarning):
            q = build_q_matrix(s, 1.0, 1)
        assert not q.interior_mask.any()

    def test_triplet_export(self, shell2d, tmp_path):
        q = build_q_matrix(shell2d, 1.0, 2)
        path = tmp_path / "q.csv"
        write_q_triplets(q, path)
        rows = list(csv.DictReader(open(path)))
        assert len(rows) == np.count_nonzero(q.q)
        diag = [r for r in rows if r["k"] == "1;0" and r["l"] == "1;0"]
        assert float(diag[0]["q"]) == -4.0


class TestIntegrate:
    def test_zero_data_stays_zero(self, shell2d):
        q = build_q_matrix(shell2d, 1.0, 4)
        traj = integrate_moments(q, np.zeros(len(q)), 1.0, 0.005, np.linspace(0, 1, 11))
        assert np.all(traj.x == 0)

    def test_constant_without_noise(self):
        q = build_q_matrix(NoiseSpectrum.from_dict(2, {}), 1.0, 3)
        traj = integrate_moments(q, {(1, 0): 2.0}, 1.0, 0.1)
        assert np.all(traj.x[-1] == traj.x[0])

    def test_mass_balance_with_outflux(self, shell2d):
        q = build_q_matrix(shell2d, 0.5, 3)
        traj = integrate_moments(q, {(1, 0): 1.0}, 2.0, 0.01, np.linspace(0, 2, 21))
        assert np.abs(traj.total + traj.outflux - 1.0).max() < 1e-12
        assert np.all(np.diff(traj.total) <= 1e-15)
        assert traj.outflux[-1] > 0
        assert traj.x.min() >= -1e-10

    def test_matches_matrix_exponential(self, shell2d):
        from scipy.linalg import expm
        q = build_q_matrix(shell2d, 0.5, 3)
        x0 = q.vector({(1, 0): 1.0, (-1, 0): 1.0})
        traj = integrate_moments(q, x0, 0.5, 0.005)
        assert np.abs(traj.x[-1] - expm(0.5 * q.q) @ x0).max() < 1e-9

    def test_errors(self, shell2d):
        q = build_q_matrix(shell2d, 1.0, 3)
        with pytest.raises(ContractError):
            integrate_moments(q, {(1, 0): 1.0}, 1.0, 0.1)
        with pytest.raises(ContractError):
            integrate_moments(q, {(1, 0): 1.0}, 1.0, 0.003)
        with pytest.raises(IntegratorToleranceError):
            integrate_moments(q, {(1, 0): -1.0}, 0.1, 0.01)


class TestStationarity:
    def test_report(self, shell2d):
        q = build_q_matrix(shell2d, 1.0, 4)
        rep = stationarity_check(q)
        assert rep.n_interior > 0
        assert rep.constant_residual < 1e-12
        assert rep.zero_residual == 0
        assert rep.decaying_residual > 0
        assert rep.only_zero_stationary


class TestMonteCarlo:
    def test_no_noise_gives_zero_z(self, shell2d):
        cfg = SdeRunConfig(shell2d, 2, 0.0, 0.2, 0.01, output_every=10)
        cmp = moments_vs_montecarlo(cfg, cos_pair(2, (1, 0)), 5)
        assert cmp.max_abs_z(interior_only=False) == 0

    def test_requires_zero_drift(self, shell2d):
        b = cos_pair(2, (1, 0))
        bv = type(b).from_dict(2, {(0, 1): [1.0, 0.0]}, complete=True)
        cfg = SdeRunConfig(shell2d, 2, 0.5, 0.2, 0.01, drift=bv)
        with pytest.raises(ContractError):
            moments_vs_montecarlo(cfg, cos_pair(2, (1, 0)), 5)

    def test_small_ensemble_agrees(self, shell2d, tmp_path):
        cfg = SdeRunConfig(shell2d, 2, 0.5, 0.3, 1e-3, seed=4, output_every=100)
        cmp = moments_vs_montecarlo(cfg, cos_pair(2, (1, 0)), 600)
        assert cmp.max_abs_z() < 4
        # total energy tracks the moment system total (boundary modes leak)
        q = build_q_matrix(shell2d, 0.5, 2)
        assert np.all(np.abs(cmp.total_energy_mc - cmp.ode_value.sum(axis=1))
                      < 4 * cmp.total_energy_stderr + 1e-12)
        path = tmp_path / "cmp.csv"
        write_comparison_csv(cmp, path)
        rows = list(csv.DictReader(open(path)))
        assert len(rows) == len(cmp.times) * len(q)
        assert set(rows[0]) == {"k", "t", "mc_mean", "mc_stderr", "ode_value", "z", "interior"}
