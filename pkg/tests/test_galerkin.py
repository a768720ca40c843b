import math

import numpy as np
import pytest

from stlesim.errors import BlowUpError, ConfigError, ContractError
from stlesim.galerkin import (GalerkinState, SdeRunConfig, draw_path_increments, drift_rhs,
                              energy_inequality_check, noise_apply, simulate_ensemble,
                              simulate_path, simulate_with_increments, step)
from stlesim.noise import NoiseIncrements, NoiseSpectrum, path_stream, sample_increments
from stlesim.spectral import Lattice, SpectralField, basis_kperp, leray_project, transport_convolution

from conftest import cos_pair, random_hermitian


def dense_oracle_step(spectrum, eps, b, u0, lat, dt, incr, scheme):
    """Brute-force dense matrices for one step, built entry by entry."""
    K = len(lat)
    modes = [tuple(int(c) for c in k) for k in lat.modes]
    c = (spectrum.dim - 1) / spectrum.dim * spectrum.sum_sq
    dW = incr.full()
    G = np.zeros((K, K), complex)
    A = np.zeros((K, K), complex)
    for a_, k in enumerate(modes):
        for b_, l in enumerate(modes):
            m = tuple(x - y for x, y in zip(k, l))
            th = spectrum.theta_of(m)
            if th:
                basis = basis_kperp(m)
                for j in range(len(basis)):
                    G[a_, b_] += 1j * math.sqrt(eps) * th * (basis[j] @ np.array(k)) * dW[(m, j)]
            if b is not None:
                A[a_, b_] = 1j * (b.coeff(m) @ np.array(l))
    D = np.diag([-eps * c * sum(x * x for x in k) for k in modes])
    u = u0.on_lattice(lat)
    if scheme == "euler_maruyama":
        return u + (A + D) @ u * dt + G @ u
    pred = u + A @ u * dt + G @ u
    return u + 0.5 * (A @ u + A @ pred) * dt + 0.5 * (G @ u + G @ pred)


def small_drift(rng):
    return leray_project(random_hermitian(2, 1, rng, ncomp=2)).scaled(0.3)


class TestDriftRhs:
    def test_pure_diffusion(self, shell2d):
        u = SpectralField.from_dict(2, {(1, 0): 1.0})
        out = drift_rhs(u, None, shell2d, 0.5, 2)
        assert out.coeff((1, 0)) == -1.0

    def test_zero_field(self, shell2d, rng):
        out = drift_rhs(SpectralField.zero(2), small_drift(rng), shell2d, 0.5, 2)
        assert np.all(out.values == 0)

    def test_matches_convolution_at_zero_eps(self, shell2d):
        b = SpectralField.from_dict(2, {(1, 0): [0, 0.5]}, complete=True)
        u = cos_pair(2, (0, 1))
        out = drift_rhs(u, b, shell2d, 0.0, 3)
        ref = transport_convolution(b, u, 3)
        lat = Lattice(2, 3)
        assert np.array_equal(out.on_lattice(lat), ref.on_lattice(lat))

    def test_rejects_modes_beyond_cutoff(self, shell2d):
        with pytest.raises(ContractError):
            drift_rhs(cos_pair(2, (3, 0)), None, shell2d, 1.0, 2)


class TestNoiseApply:
    def test_constant_field(self, shell2d):
        incr = sample_increments(shell2d, 0.01, path_stream(0, 0))
        u = SpectralField.from_dict(2, {(0, 0): 2.0})
        out = noise_apply(u, shell2d, 0.5, incr, 2)
        for m in shell2d.modes:
            a = basis_kperp(m)
            expect = 1j * math.sqrt(0.5) * (a[0] @ m) * 2.0 * incr.value(m, 0)
            # a_m is orthogonal to m, so the constant mode feeds nothing
            assert out.coeff(m) == pytest.approx(expect, abs=1e-15)
            assert abs(expect) < 1e-15

    def test_zero_eps(self, shell2d, rng):
        incr = sample_increments(shell2d, 0.01, path_stream(0, 0))
        out = noise_apply(random_hermitian(2, 2, rng), shell2d, 0.0, incr, 2)
        assert np.all(out.values == 0)

    def test_single_pair_hand_expansion(self):
        s = NoiseSpectrum.from_dict(2, {(1, 0): 1.0, (-1, 0): 1.0})
        incr = NoiseIncrements(0.1, s.representatives, np.array([[0.3 + 0.4j]]))
        u = cos_pair(2, (0, 1))
        out = noise_apply(u, s, 1.0, incr, 3)
        w = 0.3 + 0.4j
        # a_(1,0) = (0, 1); mode k gets i * k_2 * u_l * dW_{k-l}
        expected = {(1, 1): 1j * 0.5 * w, (-1, 1): 1j * 0.5 * np.conj(w),
                    (1, -1): -1j * 0.5 * w, (-1, -1): -1j * 0.5 * np.conj(w)}
        for k, v in zip(out.modes.tolist(), out.values[:, 0]):
            assert v == pytest.approx(expected.get(tuple(k), 0), abs=1e-15)

    def test_support_mismatch(self, shell2d):
        other = NoiseSpectrum.from_dict(2, {(1, 1): 1.0, (-1, -1): 1.0})
        incr = sample_increments(other, 0.01, path_stream(0, 0))
        with pytest.raises(ContractError):
            noise_apply(cos_pair(2, (1, 0)), shell2d, 1.0, incr, 2)


class TestStep:
    def test_no_dynamics(self, shell2d, rng):
        cfg = SdeRunConfig(shell2d, 2, 0.0, 1.0, 0.1)
        u0 = random_hermitian(2, 2, rng)
        state = GalerkinState.initial(u0, 2)
        new = step(state, cfg, sample_increments(shell2d, 0.1, path_stream(0, 0)))
        assert np.array_equal(new.u.values, state.u.values)

    def test_heat_euler(self, shell2d, rng):
        nu, dt = 1.0, 0.01
        cfg = SdeRunConfig(shell2d, 2, 0.5, 1.0, dt)
        u0 = random_hermitian(2, 2, rng)
        new = step(GalerkinState.initial(u0, 2), cfg, NoiseIncrements.zeros(shell2d, dt))
        lat = Lattice(2, 2)
        expect = (1 - nu * lat.norm2 * dt) * u0.on_lattice(lat)
        assert np.abs(new.u.on_lattice(lat) - expect).max() < 1e-15

    @pytest.mark.parametrize("scheme", ["euler_maruyama", "heun_stratonovich"])
    def test_matches_dense_oracle(self, shell2d, rng, scheme):
        b = small_drift(rng)
        dt, eps = 0.01, 0.5
        cfg = SdeRunConfig(shell2d, 2, eps, 1.0, dt, drift=b, scheme=scheme)
        u0 = random_hermitian(2, 2, rng)
        incr = sample_increments(shell2d, dt, path_stream(1, 2))
        new = step(GalerkinState.initial(u0, 2), cfg, incr)
        lat = Lattice(2, 2)
        ref = dense_oracle_step(shell2d, eps, b, u0, lat, dt, incr, scheme)
        assert np.abs(new.u.on_lattice(lat) - ref).max() < 1e-12

    def test_support_and_symmetry_preserved(self, shell2d, rng):
        cfg = SdeRunConfig(shell2d, 2, 0.5, 1.0, 0.01, drift=small_drift(rng))
        state = GalerkinState.initial(random_hermitian(2, 2, rng), 2)
        srng = path_stream(9, 0)
        for _ in range(20):
            state = step(state, cfg, sample_increments(shell2d, 0.01, srng))
            assert state.u.is_hermitian(1e-12)
            assert state.u.radius() <= 2
        assert len(state.energy_history) == 21

    def test_dt_mismatch(self, shell2d):
        cfg = SdeRunConfig(shell2d, 2, 0.5, 1.0, 0.01)
        with pytest.raises(ContractError):
            step(GalerkinState.initial(cos_pair(2, (1, 0)), 2), cfg, NoiseIncrements.zeros(shell2d, 0.02))


class TestConfig:
    def test_cfl_violation(self, shell2d):
        with pytest.raises(ConfigError, match="dt"):
            SdeRunConfig(shell2d, 4, 1.0, 1.0, 0.1)

    def test_bad_scheme_and_drift(self, shell2d):
        with pytest.raises(ConfigError):
            SdeRunConfig(shell2d, 2, 0.5, 1.0, 0.01, scheme="rk4")
        grad = SpectralField.from_dict(2, {(1, 0): [0.5j, 0]}, complete=True)
        with pytest.raises(ConfigError):
            SdeRunConfig(shell2d, 2, 0.5, 1.0, 0.01, drift=grad, div_free=True)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blow_up_reported(self, shell2d):
        cfg = SdeRunConfig(shell2d, 3, 1e200, 5.0, 0.5, check_cfl=False)
        with pytest.raises(BlowUpError):
            simulate_path(cfg, cos_pair(2, (1, 0)))


class TestSimulate:
    def test_constant_without_dynamics(self, shell2d, rng):
        cfg = SdeRunConfig(shell2d, 2, 0.0, 0.5, 0.05)
        traj = simulate_path(cfg, random_hermitian(2, 2, rng))
        assert np.all(traj.coeffs == traj.coeffs[0])

    def test_bit_identical_reruns(self, shell2d):
        cfg = SdeRunConfig(shell2d, 2, 0.5, 0.2, 0.01, seed=5, path_id=3)
        a = simulate_path(cfg, cos_pair(2, (1, 0)))
        b = simulate_path(cfg, cos_pair(2, (1, 0)))
        assert np.array_equal(a.coeffs, b.coeffs)

    def test_batching_and_threads_do_not_change_paths(self, shell2d):
        cfg = SdeRunConfig(shell2d, 2, 0.5, 0.1, 0.01, seed=5, output_every=5)
        u0 = cos_pair(2, (1, 0))
        a = simulate_ensemble(cfg, u0, 7, batch_size=128)
        b = simulate_ensemble(cfg, u0, 7, batch_size=3)
        c = simulate_ensemble(cfg, u0, 7, batch_size=2, threads=2)
        assert np.array_equal(a.coeffs, b.coeffs) and np.array_equal(a.coeffs, c.coeffs)
        single = simulate_path(cfg.with_(path_id=4), u0)
        assert np.array_equal(single.coeffs, a.coeffs[4])
        assert list(a.times) == pytest.approx([0, 0.05, 0.1])

    def test_linearity_with_shared_increments(self, shell2d, rng):
        cfg = SdeRunConfig(shell2d, 2, 0.5, 0.3, 0.01, drift=small_drift(rng), scheme="heun_stratonovich")
        u0, v0 = random_hermitian(2, 2, rng), random_hermitian(2, 2, rng)
        incr = np.stack([draw_path_increments(shell2d, cfg, p) for p in range(3)], axis=-1)
        tu = simulate_with_increments(cfg, u0, incr).coeffs
        tv = simulate_with_increments(cfg, v0, incr).coeffs
        tw = simulate_with_increments(cfg, u0 - v0, incr).coeffs
        assert np.abs((tu - tv) - tw).max() < 1e-12

    def test_em_and_heun_interior_means_agree(self, shell2d):
        nu, T, dt, M = 0.5, 0.2, 2e-3, 2000
        u0 = cos_pair(2, (1, 0))
        means = {}
        for scheme in ("euler_maruyama", "heun_stratonovich"):
            cfg = SdeRunConfig(shell2d, 2, nu / 2, T, dt, scheme=scheme, seed=11, output_every=100)
            ens = simulate_ensemble(cfg, u0, M)
            i = ens.lattice.index[(1, 0)]
            x = ens.coeffs[:, -1, i]
            means[scheme] = (x.mean(), x.std() / math.sqrt(M))
        exact = 0.5 * math.exp(-nu * T)
        for m, se in means.values():
            assert abs(m - exact) < 4 * se + 1e-3 * dt


class TestEnergyInequality:
    def test_zero_slack_without_dynamics(self, shell2d, rng):
        cfg = SdeRunConfig(shell2d, 2, 0.0, 0.5, 0.01)
        rep = energy_inequality_check(simulate_path(cfg, random_hermitian(2, 2, rng)))
        assert rep.slack == 0.0 and rep.passed

    def test_divergence_free_transport_slack_is_scheme_error(self, shell2d, rng):
        b = small_drift(rng)
        slack = {}
        for scheme in ("euler_maruyama", "heun_stratonovich"):
            slack[scheme] = [energy_inequality_check(simulate_path(
                SdeRunConfig(shell2d, 2, 0.0, 0.5, dt, drift=b, scheme=scheme),
                cos_pair(2, (1, 0)))).slack for dt in (0.02, 0.01)]
        # explicit Euler gains energy at first order, Heun at third order
        assert slack["euler_maruyama"][0] / slack["euler_maruyama"][1] == pytest.approx(2, rel=0.1)
        assert slack["heun_stratonovich"][0] / slack["heun_stratonovich"][1] == pytest.approx(8, rel=0.1)

    def test_gradient_drift_strict(self, shell2d):
        # b = grad cos(x1) has div b = -cos(x1)
        b = SpectralField.from_dict(2, {(1, 0): [0.5j, 0]}, complete=True)
        cfg = SdeRunConfig(shell2d, 4, 0.0, 1.0, 0.01, drift=b)
        traj = simulate_path(cfg, cos_pair(2, (0, 1)))
        rep = energy_inequality_check(traj)
        assert rep.passed
        assert np.all(rep.weighted_norm[1:] < rep.initial_norm)

    def test_heun_slack_shrinks_with_dt(self, shell2d):
        slacks = []
        for dt in (4e-3, 2e-3):
            cfg = SdeRunConfig(shell2d, 3, 0.5, 1.0, dt, scheme="heun_stratonovich", seed=2)
            rep = energy_inequality_check(simulate_path(cfg, cos_pair(2, (1, 0))))
            slacks.append(abs(np.sqrt(simulate_path(cfg, cos_pair(2, (1, 0))).energy[-1])
                              - rep.initial_norm))
        assert slacks[1] < slacks[0]
