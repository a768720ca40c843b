
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stlesim.errors import ContractError
from stlesim.spectral import (Lattice, SpectralField, basis_kperp, divergence, evaluate_physical,
                              half_lattice_rep, in_half_lattice, leray_project, project_modes,
                              projector_matrix, read_jsonl, transport_convolution, transport_matrix,
                              write_jsonl)

from conftest import cos_pair, random_hermitian


def brute_transport(b, u, N):
    """Direct double loop over stored mode pairs: (b.grad u)_k = sum_l i (b_{k-l}.l) u_l."""
    out = {}
    for m, bm in zip(b.modes, b.values):
        for l, ul in zip(u.modes, u.values[:, 0]):
            k = tuple(int(c) for c in m + l)
            if sum(c * c for c in k) > N * N + 1e-9:
                continue
            out[k] = out.get(k, 0) + 1j * (bm @ l) * ul
    return out


def direct_samples(f, n):
    xs = 2 * np.pi * np.arange(n) / n
    grids = np.meshgrid(*([xs] * f.dim), indexing="ij")
    total = np.zeros(grids[0].shape, complex)
    for k, v in zip(f.modes, f.values[:, 0]):
        phase = sum(kc * g for kc, g in zip(k, grids))
        total += v * np.exp(1j * phase)
    return total.real


class TestLattice:
    def test_zero_mode_first_and_ordering(self):
        lat = Lattice(2, 2)
        assert tuple(lat.modes[0]) == (0, 0)
        assert np.all(np.diff(lat.norm2) >= 0)
        assert len(lat) == 13

    def test_half_lattice_partition(self):
        for dim in (1, 2, 3):
            for k in Lattice(dim, 3).modes[1:]:
                assert in_half_lattice(k) != in_half_lattice(-k)

    def test_half_lattice_rep(self):
        assert half_lattice_rep((-1, 2)) == (1, -2)
        assert half_lattice_rep((0, 3)) == (0, 3)
        with pytest.raises(ContractError):
            half_lattice_rep((0, 0))

    def test_lookup_absent(self):
        lat = Lattice(2, 1)
        idx = lat.lookup(np.array([[1, 0], [1, 1], [5, 5]]))
        assert idx[0] >= 0 and idx[1] == -1 and idx[2] == -1


class TestSpectralField:
    def test_rejects_duplicates_and_out_of_cutoff(self):
        with pytest.raises(ContractError):
            SpectralField(2, [[1, 0], [1, 0]], [1, 2])
        with pytest.raises(ContractError):
            SpectralField(2, [[3, 0]], [1], cutoff=2)

    def test_absent_modes_are_zero(self):
        f = cos_pair(2, (1, 0))
        assert f.coeff((2, 0)) == 0
        assert f.coeff((-1, 0)) == 0.5

    def test_hermitian_detection(self):
        f = SpectralField.from_dict(2, {(1, 0): 1j})
        assert not f.is_hermitian()
        g = SpectralField.from_dict(2, {(1, 0): 1j}, complete=True)
        assert g.is_hermitian()
        assert g.coeff((-1, 0)) == -1j

    def test_arrays_read_only(self):
        f = cos_pair(2, (1, 0))
        with pytest.raises(ValueError):
            f.values[0, 0] = 3


class TestLeray:
    def test_parallel_part_removed(self):
        f = SpectralField.from_dict(2, {(1, 0): [1, 0], (-1, 0): [1, 0]})
        assert np.allclose(leray_project(f).coeff((1, 0)), 0)

    def test_perpendicular_part_kept(self):
        f = SpectralField.from_dict(2, {(1, 0): [0, 1], (-1, 0): [0, 1]})
        assert np.array_equal(leray_project(f).coeff((1, 0)), [0, 1])

    def test_3d_hand_value(self):
        f = SpectralField.from_dict(3, {(1, 1, 0): [1, 0, 0]}, complete=True)
        assert np.allclose(leray_project(f).coeff((1, 1, 0)), [0.5, -0.5, 0], atol=1e-15)

    def test_scalar_rejected(self):
        with pytest.raises(ContractError):
            leray_project(cos_pair(2, (1, 0)))

    @settings(max_examples=25, deadline=None)
    @given(dim=st.sampled_from([2, 3]), seed=st.integers(0, 10**6))
    def test_idempotent_and_divergence_free(self, dim, seed):
        f = random_hermitian(dim, 2, np.random.default_rng(seed), ncomp=dim)
        p = leray_project(f)
        assert p.is_divergence_free(1e-12)
        assert np.abs(leray_project(p).values - p.values).max() < 1e-14

    def test_projector_spectrum(self):
        for k in Lattice(3, 2).modes[1:]:
            P = projector_matrix(k)
            assert np.allclose(P @ k, 0, atol=1e-14)
            assert np.allclose(P, P.T)
            assert np.allclose(np.sort(np.linalg.eigvalsh(P)), [0, 1, 1], atol=1e-12)


class TestProjectModes:
    def test_identity_above_cutoff(self, rng):
        f = random_hermitian(2, 2, rng)
        g = project_modes(f, 3)
        assert np.array_equal(g.on_lattice(Lattice(2, 3)), f.on_lattice(Lattice(2, 3)))

    def test_truncation(self):
        f = SpectralField.from_dict(2, {(1, 0): 1, (3, 0): 2}, complete=True)
        g = project_modes(f, 2)
        assert {tuple(k) for k in g.modes.tolist()} == {(1, 0), (-1, 0)}

    def test_nesting(self, rng):
        f = random_hermitian(2, 5, rng)
        a = project_modes(project_modes(f, 4), 2)
        b = project_modes(f, 2)
        lat = Lattice(2, 5)
        assert np.array_equal(a.on_lattice(lat), b.on_lattice(lat))


class TestBasisKperp:
    def test_2d_examples(self):
        assert np.allclose(basis_kperp((1, 0)), [[0, 1]])
        assert np.allclose(basis_kperp((-1, 0)), [[0, 1]])

    def test_3d_axis_example(self):
        a = basis_kperp((0, 0, 2))
        assert np.allclose(a, [[1, 0, 0], [0, 1, 0]])

    @pytest.mark.parametrize("dim", [2, 3])
    def test_orthonormal_and_resolves_projector(self, dim):
        for k in Lattice(dim, 3).modes[1:]:
            a = basis_kperp(k)
            assert a.shape == (dim - 1, dim)
            assert np.allclose(a @ a.T, np.eye(dim - 1), atol=1e-12)
            assert np.allclose(a @ k, 0, atol=1e-12)
            assert np.abs(a.T @ a - projector_matrix(k)).max() < 1e-12
            assert np.array_equal(a, basis_kperp(-k))

    def test_errors(self):
        with pytest.raises(ContractError):
            basis_kperp((0, 0))
        with pytest.raises(ContractError):
            basis_kperp((1,))


class TestTransport:
    def test_hand_example(self):
        b = SpectralField.from_dict(2, {(1, 0): [0, 0.5]}, complete=True)
        u = cos_pair(2, (0, 1))
        out = transport_convolution(b, u, 3)
        nz = {tuple(k) for k, v in zip(out.modes.tolist(), out.values[:, 0]) if abs(v) > 0}
        assert nz == {(1, 1), (-1, -1), (-1, 1), (1, -1)}
        assert out.coeff((1, 1)) == pytest.approx(0.25j)

    def test_zero_drift_and_constant_u(self, rng):
        u = random_hermitian(2, 2, rng)
        zero_b = SpectralField.zero(2, ncomp=2)
        assert np.abs(transport_convolution(zero_b, u, 4).values).max(initial=0) == 0
        b = random_hermitian(2, 2, rng, ncomp=2)
        const = SpectralField.from_dict(2, {(0, 0): 3.0})
        assert np.abs(transport_convolution(b, const, 4).values).max(initial=0) == 0

    @pytest.mark.parametrize("dim", [2, 3])
    def test_matches_brute_force(self, dim, rng):
        b = random_hermitian(dim, 2, rng, ncomp=dim, density=0.6)
        u = random_hermitian(dim, 2, rng, density=0.6)
        N = 3
        out = transport_convolution(b, u, N)
        ref = brute_transport(b, u, N)
        for k, v in zip(out.modes.tolist(), out.values[:, 0]):
            assert abs(v - ref.get(tuple(k), 0)) < 1e-12
        assert out.is_hermitian(1e-12)

    def test_matrix_matches_convolution(self, rng):
        b = random_hermitian(2, 2, rng, ncomp=2)
        u = random_hermitian(2, 2, rng)
        lat = Lattice(2, 3)
        direct = transport_convolution(b, u, 3).on_lattice(lat)
        via_matrix = transport_matrix(b, lat) @ u.on_lattice(lat)
        assert np.abs(direct - via_matrix).max() < 1e-12

    def test_energy_neutral_for_divergence_free_drift(self, rng):
        b = leray_project(random_hermitian(2, 2, rng, ncomp=2))
        u = random_hermitian(2, 2, rng)
        out = transport_convolution(b, u, 4)
        lat = Lattice(2, 4)
        pairing = np.vdot(u.on_lattice(lat), out.on_lattice(lat))
        assert abs(pairing.real) < 1e-12

    def test_dimension_mismatch(self):
        b = SpectralField.from_dict(3, {(1, 0, 0): [0, 1, 0]}, complete=True)
        with pytest.raises(ContractError):
            transport_convolution(b, cos_pair(2, (1, 0)), 2)

    def test_divergence(self):
        b = SpectralField.from_dict(2, {(1, 0): [1, 0]}, complete=True)
        assert divergence(b).coeff((1, 0)) == 1j


class TestEvaluatePhysical:
    def test_constant(self):
        f = SpectralField.from_dict(2, {(0, 0): 3.0})
        assert np.allclose(evaluate_physical(f, 8), 3.0)

    def test_cosine(self):
        x = 2 * np.pi * np.arange(16) / 16
        vals = evaluate_physical(cos_pair(2, (1, 0)), 16)
        assert np.allclose(vals, np.cos(x)[:, None] * np.ones(16)[None, :], atol=1e-14)

    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_matches_direct_sum(self, dim, rng):
        f = random_hermitian(dim, 2, rng)
        n = 7
        assert np.abs(evaluate_physical(f, n) - direct_samples(f, n)).max() < 1e-12

    def test_errors(self):
        with pytest.raises(ContractError):
            evaluate_physical(SpectralField.from_dict(2, {(1, 0): 1j}), 8)
        with pytest.raises(ContractError):
            evaluate_physical(cos_pair(2, (3, 0)), 4)


class TestJsonLines:
    def test_roundtrip_with_omitted_partners(self, tmp_path, rng):
        f = random_hermitian(2, 2, rng)
        path = tmp_path / "f.jsonl"
        write_jsonl(f, path, omit_partners=True)
        lines = path.read_text().splitlines()
        assert len(lines) == (len(f.modes) + 1) // 2
        g = read_jsonl(path)
        lat = Lattice(2, 2)
        assert np.array_equal(g.on_lattice(lat), f.on_lattice(lat))
