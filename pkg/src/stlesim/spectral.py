"""Fourier-mode containers and projectors on the torus T^d = R^d / (2 pi Z^d).

Fields are stored sparsely as (modes, values) pairs: ``modes`` is an integer
array of shape (n, d) and ``values`` a complex array of shape (n, ncomp),
``ncomp`` being 1 for scalar fields and ``d`` for vector fields.  The inner
product is the normalized one, so that ``<e_k, e_l> = delta_kl`` and
``|f|^2 = sum_k |f_k|^2``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Lattice",
    "SpectralField",
    "in_half_lattice",
    "half_lattice_rep",
    "leray_project",
    "projector_matrix",
    "project_modes",
    "basis_kperp",
    "transport_convolution",
    "transport_matrix",
    "divergence",
    "evaluate_physical",
    "write_jsonl",
    "read_jsonl",
]

_CUTOFF_SLACK = 1e-9


def in_half_lattice(k: Sequence[int]) -> bool:
    """True if the first nonzero component of ``k`` is positive."""
    for c in k:
        if c != 0:
            return c > 0
    return False


def half_lattice_rep(k: Sequence[int]) -> tuple[int, ...]:
    """Representative of ``{k, -k}`` lying in the half lattice."""
    k = tuple(int(c) for c in k)
    if not any(k):
        raise ContractError("the zero mode has no half-lattice representative")
    return k if in_half_lattice(k) else tuple(-c for c in k)


def _within(norm2, cutoff: float):
    return norm2 <= cutoff * cutoff + _CUTOFF_SLACK


class Lattice:
    """All modes ``k`` in Z^d with ``|k| <= cutoff``.

    Modes are ordered by ``|k|^2`` and then lexicographically, so the zero
    mode is always index 0.
    """

    def __init__(self, dim: int, cutoff: float):
        if dim not in (1, 2, 3):
            raise ContractError(f"dimension must be 1, 2 or 3, got {dim}")
        if cutoff < 0:
            raise ContractError("cutoff must be nonnegative")
        self.dim = int(dim)
        self.cutoff = float(cutoff)
        r = int(np.floor(cutoff + _CUTOFF_SLACK))
        axis = np.arange(-r, r + 1)
        grid = np.array(list(itertools.product(axis, repeat=self.dim)), dtype=np.int64)
        grid = grid.reshape(-1, self.dim)
        n2 = (grid**2).sum(axis=1)
        grid = grid[_within(n2, cutoff)]
        n2 = (grid**2).sum(axis=1)
        order = np.lexsort(tuple(grid[:, i] for i in reversed(range(self.dim))) + (n2,))
        self.modes = grid[order]
        self.modes.setflags(write=False)
        self.norm2 = (self.modes**2).sum(axis=1)
        self.index = {tuple(int(c) for c in k): i for i, k in enumerate(self.modes)}
        self.neg = np.array([self.index[tuple(-int(c) for c in k)] for k in self.modes])
        self.in_half = np.array([in_half_lattice(k) for k in self.modes], dtype=bool)
        self._box_radius = r
        self._box = np.full((2 * r + 1,) * self.dim, -1, dtype=np.int64)
        self._box[tuple((self.modes + r).T)] = np.arange(len(self.modes))

    def __len__(self) -> int:
        return len(self.modes)

    def __repr__(self) -> str:
        return f"Lattice(dim={self.dim}, cutoff={self.cutoff}, size={len(self)})"

    def contains(self, k: Sequence[int]) -> bool:
        return tuple(int(c) for c in k) in self.index

    def lookup(self, modes: np.ndarray) -> np.ndarray:
        """Indices of ``modes`` in this lattice, -1 where absent."""
        modes = np.asarray(modes, dtype=np.int64).reshape(-1, self.dim)
        shifted = modes + self._box_radius
        inside = np.all((shifted >= 0) & (shifted < self._box.shape[0]), axis=1)
        out = np.full(len(modes), -1, dtype=np.int64)
        out[inside] = self._box[tuple(shifted[inside].T)]
        return out


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Finitely supported Fourier series, scalar or vector valued.

    Absent modes are zero.  Instances are treated as immutable; the arrays
    are flagged read-only on construction.
    """

    dim: int
    modes: np.ndarray
    values: np.ndarray
    cutoff: float = field(default=-1.0)

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.int64).reshape(-1, self.dim)
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.shape[0] != modes.shape[0]:
            raise ContractError("modes and values have different lengths")
        if len({tuple(k) for k in modes.tolist()}) != len(modes):
            raise ContractError("duplicate modes in SpectralField")
        n2 = (modes**2).sum(axis=1)
        cutoff = float(self.cutoff)
        if cutoff < 0:
            cutoff = float(np.sqrt(n2.max())) if len(n2) else 0.0
        elif len(n2) and not _within(n2, cutoff).all():
            raise ContractError("SpectralField stores modes beyond its cutoff")
        modes.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "cutoff", cutoff)

    # construction helpers

    @classmethod
    def from_dict(cls, dim: int, coeffs: Mapping[Sequence[int], object],
                  cutoff: float = -1.0, complete: bool = False) -> "SpectralField":
        """Build from ``{k: value}``; with ``complete`` the Hermitian partners
        of missing ``-k`` entries are filled in."""
        items = {tuple(int(c) for c in k): np.atleast_1d(np.asarray(v, dtype=complex))
                 for k, v in coeffs.items()}
        if complete:
            for k, v in list(items.items()):
                nk = tuple(-c for c in k)
                if nk not in items:
                    items[nk] = np.conj(v)
        if not items:
            return cls.zero(dim, ncomp=1, cutoff=max(cutoff, 0.0))
        modes = np.array(list(items.keys()), dtype=np.int64).reshape(-1, dim)
        values = np.array(list(items.values()), dtype=complex)
        return cls(dim, modes, values, cutoff)

    @classmethod
    def zero(cls, dim: int, ncomp: int = 1, cutoff: float = 0.0) -> "SpectralField":
        return cls(dim, np.zeros((0, dim), dtype=np.int64), np.zeros((0, ncomp), complex), cutoff)

    @classmethod
    def from_lattice(cls, lattice: Lattice, values: np.ndarray,
                     drop_zeros: bool = False) -> "SpectralField":
        values = np.asarray(values, dtype=complex)
        if values.ndim == 1:
            values = values[:, None]
        modes = lattice.modes
        if drop_zeros:
            keep = np.any(values != 0, axis=1)
            modes, values = modes[keep], values[keep]
        return cls(lattice.dim, modes, values, lattice.cutoff)

    # basic queries

    @property
    def ncomp(self) -> int:
        return self.values.shape[1]

    @property
    def is_vector(self) -> bool:
        return self.ncomp == self.dim and self.ncomp > 1

    @cached_property
    def _index(self) -> dict[tuple[int, ...], int]:
        return {tuple(k): i for i, k in enumerate(self.modes.tolist())}

    def coeff(self, k: Sequence[int]) -> np.ndarray | complex:
        """Coefficient at ``k`` (zero if absent); scalar fields give a complex."""
        i = self._index.get(tuple(int(c) for c in k))
        v = np.zeros(self.ncomp, complex) if i is None else self.values[i].copy()
        return complex(v[0]) if self.ncomp == 1 else v

    def to_dict(self) -> dict[tuple[int, ...], np.ndarray | complex]:
        return {tuple(k): self.coeff(k) for k in self.modes.tolist()}

    def on_lattice(self, lattice: Lattice) -> np.ndarray:
        """Dense coefficients on ``lattice``; modes outside it are dropped."""
        if lattice.dim != self.dim:
            raise ContractError("lattice and field dimensions differ")
        out = np.zeros((len(lattice), self.ncomp), complex)
        idx = lattice.lookup(self.modes) if len(self.modes) else np.zeros(0, int)
        ok = idx >= 0
        out[idx[ok]] = self.values[ok]
        return out[:, 0] if self.ncomp == 1 else out

    def radius(self) -> float:
        """Largest ``|k|`` with a nonzero coefficient."""
        nz = np.any(self.values != 0, axis=1)
        if not nz.any():
            return 0.0
        return float(np.sqrt((self.modes[nz] ** 2).sum(axis=1).max()))

    def norm2(self) -> float:
        """Squared L2 norm, ``sum_k |f_k|^2``."""
        return float(np.sum(np.abs(self.values) ** 2))

    def inner(self, other: "SpectralField") -> complex:
        """``<self, other> = sum_k self_k . conj(other_k)``."""
        if other.dim != self.dim or other.ncomp != self.ncomp:
            raise ContractError("inner product of incompatible fields")
        total = 0j
        for k, v in zip(other.modes.tolist(), other.values):
            i = self._index.get(tuple(k))
            if i is not None:
                total += complex(np.sum(self.values[i] * np.conj(v)))
        return total

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.abs(self.values).max(initial=0.0)))
        for k, v in zip(self.modes.tolist(), self.values):
            partner = self.coeff([-c for c in k])
            if np.max(np.abs(np.atleast_1d(partner) - np.conj(v))) > tol * scale:
                return False
        return True

    def is_divergence_free(self, tol: float = 1e-12) -> bool:
        if not self.is_vector:
            raise ContractError("divergence is defined for vector fields only")
        div = np.abs(np.einsum("nd,nd->n", self.values, self.modes))
        return bool(np.all(div <= tol * max(1.0, float(np.abs(self.values).max(initial=0.0)))))

    def scaled(self, factor: complex) -> "SpectralField":
        return SpectralField(self.dim, self.modes, self.values * factor, self.cutoff)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return _combine(self, other, 1.0)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return _combine(self, other, -1.0)

    def __repr__(self) -> str:
        kind = "vector" if self.is_vector else "scalar"
        return f"SpectralField(dim={self.dim}, {kind}, modes={len(self.modes)}, cutoff={self.cutoff:g})"


def _combine(a: SpectralField, b: SpectralField, sign: float) -> SpectralField:
    if a.dim != b.dim or a.ncomp != b.ncomp:
        raise ContractError("cannot combine fields of different shape")
    acc: dict[tuple[int, ...], np.ndarray] = {}
    for k, v in zip(a.modes.tolist(), a.values):
        acc[tuple(k)] = v.copy()
    for k, v in zip(b.modes.tolist(), b.values):
        acc[tuple(k)] = acc.get(tuple(k), 0) + sign * v
    out = SpectralField.from_dict(a.dim, acc, cutoff=max(a.cutoff, b.cutoff))
    if out.ncomp != a.ncomp:  # empty result collapses to scalar
        return SpectralField.zero(a.dim, a.ncomp, max(a.cutoff, b.cutoff))
    return out


def projector_matrix(k: Sequence[float]) -> np.ndarray:
    """``P_k = I - k k^T / |k|^2``, with ``P_0 = 0``."""
    k = np.asarray(k, dtype=float)
    n2 = float(k @ k)
    if n2 == 0:
        return np.zeros((len(k), len(k)))
    return np.eye(len(k)) - np.outer(k, k) / n2


def leray_project(f: SpectralField) -> SpectralField:
    """Project a vector field onto mean-zero, divergence-free fields."""
    if not f.is_vector:
        raise ContractError("leray_project needs a vector field with d components")
    k = f.modes.astype(float)
    n2 = (k**2).sum(axis=1)
    safe = np.where(n2 == 0, 1.0, n2)
    kf = np.einsum("nd,nd->n", f.values, k)
    out = f.values - k * (kf / safe)[:, None]
    out[n2 == 0] = 0.0
    return SpectralField(f.dim, f.modes, out, f.cutoff)


def project_modes(f: SpectralField, N: float) -> SpectralField:
    """Drop every coefficient with ``|k| > N``."""
    if N < 0:
        raise ContractError("N must be nonnegative")
    keep = _within((f.modes**2).sum(axis=1), N)
    return SpectralField(f.dim, f.modes[keep], f.values[keep], min(f.cutoff, float(N)))


def basis_kperp(k: Sequence[int]) -> np.ndarray:
    """Orthonormal basis of ``k^perp`` as rows of a (d-1, d) array.

    The basis is computed for the half-lattice representative of ``{k, -k}``
    and shared by both, so ``a_{-k} = a_k``.  In d=2 it is the representative
    rotated by +90 degrees; in d=3 the first vector is Gram-Schmidt applied to
    the coordinate axis least aligned with ``k`` (lowest index on ties) and the
    second is ``k/|k| x a_1``.
    """
    k = tuple(int(c) for c in k)
    d = len(k)
    if d == 1:
        raise ContractError("k-perp basis is undefined in dimension 1")
    if d not in (2, 3):
        raise ContractError(f"unsupported dimension {d}")
    r = np.array(half_lattice_rep(k), dtype=float)
    rhat = r / np.linalg.norm(r)
    if d == 2:
        return np.array([[-rhat[1], rhat[0]]])
    axis = int(np.argmin(np.abs(r)))
    seed = np.zeros(3)
    seed[axis] = 1.0
    a1 = seed - (seed @ rhat) * rhat
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(rhat, a1)
    return np.array([a1, a2])


def _check_transport_args(b: SpectralField, u: SpectralField):
    if b.dim != u.dim:
        raise ContractError(f"dimension mismatch: b has d={b.dim}, u has d={u.dim}")
    if b.ncomp != b.dim:
        raise ContractError("drift b must be a vector field")
    if u.ncomp != 1:
        raise ContractError("u must be a scalar field")


def transport_convolution(b: SpectralField, u: SpectralField, N: float) -> SpectralField:
    """``Pi_N (b . grad u)`` by direct summation over mode pairs.

    Mode ``k`` of the result is ``i sum_l (b_{k-l} . l) u_l``.
    """
    _check_transport_args(b, u)
    lattice = Lattice(u.dim, N)
    if len(b.modes) == 0 or len(u.modes) == 0:
        return SpectralField.from_lattice(lattice, np.zeros(len(lattice)))
    ks = b.modes[:, None, :] + u.modes[None, :, :]
    weights = 1j * (b.values @ u.modes.T.astype(float)) * u.values[:, 0][None, :]
    idx = lattice.lookup(ks.reshape(-1, u.dim))
    ok = idx >= 0
    out = np.zeros(len(lattice), complex)
    np.add.at(out, idx[ok], weights.reshape(-1)[ok])
    return SpectralField.from_lattice(lattice, out)


def transport_matrix(b: SpectralField, lattice: Lattice) -> np.ndarray:
    """Dense matrix of ``u -> Pi_N (b . grad u)`` on ``lattice`` coordinates."""
    if b.ncomp != b.dim or b.dim != lattice.dim:
        raise ContractError("drift must be a d-vector field of the lattice dimension")
    n = len(lattice)
    T = np.zeros((n, n), complex)
    if len(b.modes) == 0:
        return T
    lmodes = lattice.modes.astype(float)
    for m, bm in zip(b.modes, b.values):
        idx = lattice.lookup(lattice.modes + m)
        ok = np.nonzero(idx >= 0)[0]
        T[idx[ok], ok] += 1j * (lmodes[ok] @ bm)
    return T


def divergence(b: SpectralField) -> SpectralField:
    """Scalar field ``div b``, mode-wise ``i k . b_k``."""
    if not b.is_vector:
        raise ContractError("divergence is defined for vector fields only")
    vals = 1j * np.einsum("nd,nd->n", b.values, b.modes.astype(float))
    return SpectralField(b.dim, b.modes, vals, b.cutoff)


def evaluate_physical(f: SpectralField, grid_points_per_axis: int) -> np.ndarray:
    """Real samples of ``sum_k f_k e^{i k.x}`` on the uniform grid
    ``x_j = 2 pi j / n`` along each axis.

    Scalar fields give shape ``(n,)*d``; vector fields ``(d,) + (n,)*d``.
    """
    n = int(grid_points_per_axis)
    r = int(np.ceil(f.radius() - _CUTOFF_SLACK))
    if n < 2 * r + 1:
        raise ContractError(f"grid of {n} points aliases modes up to |k|={f.radius():g}; "
                            f"need at least {2 * r + 1}")
    if not f.is_hermitian(1e-12):
        raise ContractError("evaluate_physical needs a Hermitian-symmetric field")
    shape = (n,) * f.dim
    out = []
    for c in range(f.ncomp):
        dense = np.zeros(shape, complex)
        idx = tuple(np.mod(f.modes[:, i], n) for i in range(f.dim))
        np.add.at(dense, idx, f.values[:, c])
        samples = np.fft.ifftn(dense) * dense.size
        scale = max(1.0, float(np.abs(samples).max(initial=0.0)))
        if np.abs(samples.imag).max(initial=0.0) > 1e-10 * scale:
            raise ContractError("physical samples carry a non-negligible imaginary part")
        out.append(samples.real)
    return out[0] if f.ncomp == 1 else np.stack(out)


def write_jsonl(f: SpectralField, path, omit_partners: bool = False) -> None:
    """One JSON record per mode: ``{"k": [...], "re": [...], "im": [...]}``."""
    with open(path, "w") as fh:
        for k, v in zip(f.modes.tolist(), f.values):
            if omit_partners and any(k) and not in_half_lattice(k):
                continue
            fh.write(json.dumps({"k": k, "re": v.real.tolist(), "im": v.imag.tolist()}) + "\n")


def records_to_field(records: Iterable[Mapping], dim: int | None = None,
                     cutoff: float = -1.0) -> SpectralField:
    """Field from mode records; missing Hermitian partners are reconstructed."""
    coeffs = {}
    for rec in records:
        k = tuple(int(c) for c in rec["k"])
        re = np.atleast_1d(np.asarray(rec["re"], dtype=float))
        im = np.atleast_1d(np.asarray(rec.get("im", np.zeros_like(re)), dtype=float))
        if re.shape != im.shape:
            raise ContractError(f"mode {k}: re and im have different lengths")
        coeffs[k] = re + 1j * im
    if dim is None:
        if not coeffs:
            raise ContractError("cannot infer dimension from an empty record list")
        dim = len(next(iter(coeffs)))
    return SpectralField.from_dict(dim, coeffs, cutoff=cutoff, complete=True)


def read_jsonl(path, dim: int | None = None) -> SpectralField:
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return records_to_field(records, dim)
