"""Exact-diagonalization Heisenberg dynamics and the filtered-average identities."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .algebra import LocalOperator, Region, commutator, embed, op_norm
from .filter import FilterFunction, fmt17, gauss_legendre_panels

__all__ = [
    "SpectralData",
    "GroundState",
    "LemmaResidual",
    "LRProfile",
    "diagonalize",
    "heisenberg",
    "filter_weights",
    "filtered_average",
    "key_lemma_residual",
    "decoupling_residual",
    "duhamel_residual",
    "lr_commutator_profile",
    "lr_reference_weight",
    "fit_lr_envelope",
]


@dataclass(frozen=True)
class GroundState:
    vector: np.ndarray
    energy: float


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Eigendecomposition of a local Hamiltonian on ``region``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    region: Region
    hamiltonian: np.ndarray
    degeneracy_tol: float
    d: int = 2

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def ground_index(self) -> int:
        return 0

    @property
    def ground_degeneracy(self) -> int:
        e = self.eigenvalues
        return int(np.count_nonzero(e - e[0] <= self.degeneracy_tol))

    @property
    def gap(self) -> float:
        """Distance from the (grouped) ground level to the next level; 0 for a 1-level spectrum."""
        e = self.eigenvalues
        above = e[e - e[0] > self.degeneracy_tol]
        return float(above[0] - e[0]) if above.size else 0.0

    @property
    def excitations(self) -> np.ndarray:
        """Eigenvalues shifted so the ground energy is 0."""
        return self.eigenvalues - self.eigenvalues[0]

    def ground_state(self) -> GroundState:
        return GroundState(self.eigenvectors[:, 0].copy(), float(self.eigenvalues[0]))

    def differences(self) -> np.ndarray:
        """Matrix E_m - E_n."""
        e = self.excitations
        return e[:, None] - e[None, :]

    def matrix_of(self, a: LocalOperator) -> np.ndarray:
        """Matrix of ``a`` on the Hamiltonian's region (embedding if needed)."""
        if a.support != self.region:
            a = embed(a, self.region)
        if a.matrix.shape != self.hamiltonian.shape:
            raise ValueError("operator dimension does not match the Hamiltonian")
        return a.matrix

    def to_eigenbasis(self, m: np.ndarray) -> np.ndarray:
        v = self.eigenvectors
        return v.conj().T @ m @ v

    def from_eigenbasis(self, m: np.ndarray) -> np.ndarray:
        v = self.eigenvectors
        return v @ m @ v.conj().T

    def reconstruction_residual(self) -> float:
        h = self.from_eigenbasis(np.diag(self.eigenvalues).astype(complex))
        return op_norm(h - self.hamiltonian)


def diagonalize(h: LocalOperator, degeneracy_rel_tol: float = 1e-8) -> SpectralData:
    """Full Hermitian eigendecomposition, eigenvalues ascending."""
    m = h.matrix
    scale = max(op_norm(m), 1e-300) if m.size else 1.0
    if np.max(np.abs(m - m.conj().T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise ValueError("Hamiltonian is not self-adjoint")
    m = 0.5 * (m + m.conj().T)
    evals, evecs = np.linalg.eigh(m)
    return SpectralData(evals, evecs, h.support, m, degeneracy_rel_tol * scale, h.d)


def heisenberg(a: LocalOperator, t: float, s: SpectralData) -> LocalOperator:
    """tau^t(A) = e^{itH} A e^{-itH}, via phases e^{it(E_m - E_n)} in the eigenbasis."""
    m = s.to_eigenbasis(s.matrix_of(a))
    phases = np.exp(1j * t * s.differences())
    return LocalOperator(s.region, s.from_eigenbasis(phases * m), s.d)


def filter_weights(s: SpectralData, f: FilterFunction, method: str = "spectral") -> np.ndarray:
    """Matrix w_mn with I(A)_mn = w_mn A_mn in the eigenbasis.

    ``spectral`` reads hat omega_gamma(E_m - E_n) from the filter's Fourier
    table. ``time`` sums omega_gamma(t_j) e^{i t_j (E_m - E_n)} over the
    time-quadrature nodes, i.e. integrates omega_gamma(t) tau^t(A) directly.
    """
    diff = s.differences()
    if method == "spectral":
        return f.fourier_weight(diff)
    if method != "time":
        raise ValueError(f"unknown method {method!r}")
    iu = np.triu_indices(s.dim, 1)
    deltas = diff[iu]
    t, w = f.time_weights(float(np.max(np.abs(deltas), initial=0.0)))
    half = t > 0
    tp, wp = t[half], w[half]
    vals = np.empty(deltas.size)
    step = max(1, 2_000_000 // max(tp.size, 1))
    for start in range(0, deltas.size, step):
        sl = slice(start, start + step)
        # omega_gamma is even: e^{itD} + e^{-itD} = 2 cos(tD)
        vals[sl] = 2.0 * (np.cos(np.outer(deltas[sl], tp)) @ wp)
    out = np.empty_like(diff)
    out[iu] = vals
    out.T[iu] = vals
    np.fill_diagonal(out, 2.0 * np.sum(wp))
    return out


def filtered_average(
    a: LocalOperator,
    s: SpectralData,
    f: FilterFunction,
    method: str = "spectral",
    weights: np.ndarray | None = None,
) -> LocalOperator:
    """I(A) = int dt omega_gamma(t) tau^t(A)."""
    w = filter_weights(s, f, method) if weights is None else weights
    m = s.to_eigenbasis(s.matrix_of(a))
    return LocalOperator(s.region, s.from_eigenbasis(w * m), s.d)


@dataclass(frozen=True)
class LemmaResidual:
    value: float
    precondition_met: bool
    gap: float
    gamma: float

    def __float__(self) -> float:
        return self.value


def _gap_ok(s: SpectralData, f: FilterFunction) -> bool:
    return s.ground_degeneracy == 1 and s.gap >= 2.0 * f.gamma


def key_lemma_residual(a: LocalOperator, s: SpectralData, f: FilterFunction, weights=None) -> LemmaResidual:
    """||I(A) psi0 - <psi0|A|psi0> psi0|| / ||A||.

    The precondition is a nondegenerate ground level with gap >= 2 gamma;
    when it fails the residual is still computed and the flag is cleared.
    """
    norm_a = a.norm()
    if norm_a == 0:
        return LemmaResidual(0.0, _gap_ok(s, f), s.gap, f.gamma)
    w = filter_weights(s, f) if weights is None else weights
    m = s.to_eigenbasis(s.matrix_of(a))
    # column 0 in the eigenbasis: I(A) psi0 = sum_m w_m0 A_m0 |m>
    col = w[:, 0] * m[:, 0]
    col[0] -= m[0, 0]
    return LemmaResidual(float(np.linalg.norm(col)) / norm_a, _gap_ok(s, f), s.gap, f.gamma)


def decoupling_residual(
    a: LocalOperator, b: LocalOperator, s: SpectralData, f: FilterFunction, weights=None
) -> LemmaResidual:
    """|<psi0|B* I(A)|psi0> - <psi0|B*|psi0><psi0|A|psi0>| / (||A|| ||B||)."""
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return LemmaResidual(0.0, _gap_ok(s, f), s.gap, f.gamma)
    w = filter_weights(s, f) if weights is None else weights
    ma = s.to_eigenbasis(s.matrix_of(a))
    mb = s.to_eigenbasis(s.matrix_of(b))
    ia = w * ma
    # <0|B* X|0> = sum_m conj(B_m0) X_m0
    lhs = np.vdot(mb[:, 0], ia[:, 0])
    rhs = np.conj(mb[0, 0]) * ma[0, 0]
    return LemmaResidual(float(abs(lhs - rhs)) / (na * nb), _gap_ok(s, f), s.gap, f.gamma)


def duhamel_residual(
    a: LocalOperator, s: SpectralData, t: float, u_nodes: int, rule: str = "trapezoid"
) -> float:
    """||A - tau^t(A) - int_0^t du (-delta)(tau^u(A))|| / ||A||, delta(B) = i[H, B].

    The u-integral uses ``u_nodes`` points of the composite trapezoid rule
    (second order) or Gauss-Legendre.
    """
    if u_nodes < 2:
        raise ValueError("u_nodes must be >= 2")
    norm_a = a.norm()
    if norm_a == 0 or t == 0:
        return 0.0
    h = s.hamiltonian
    if rule == "trapezoid":
        u = np.linspace(0.0, t, u_nodes)
        w = np.full(u_nodes, t / (u_nodes - 1))
        w[[0, -1]] *= 0.5
    elif rule == "gauss":
        x, gw = np.polynomial.legendre.leggauss(u_nodes)
        u, w = 0.5 * t * (x + 1.0), 0.5 * t * gw
    else:
        raise ValueError(f"unknown rule {rule!r}")
    integral = np.zeros_like(h)
    for uu, ww in zip(u, w):
        b = heisenberg(a, uu, s).matrix
        integral += ww * (-1j) * (h @ b - b @ h)
    r = s.matrix_of(a) - heisenberg(a, t, s).matrix - integral
    return op_norm(r) / norm_a


def lr_reference_weight(r, nu: int = 1) -> np.ndarray:
    """F_1(r) = (1 + r)^{-(nu+1)} e^{-r}."""
    r = np.asarray(r, dtype=float)
    return (1.0 + r) ** (-(nu + 1)) * np.exp(-r)


@dataclass(frozen=True)
class LRProfile:
    """||[tau^t(A), B_k]|| on a (time, distance) grid with a fitted C e^{v|t| - d} envelope."""

    times: np.ndarray
    distances: np.ndarray
    values: np.ndarray  # shape (len(times), len(distances))
    fit_c: float
    fit_v: float
    r_squared: float

    def envelope(self) -> np.ndarray:
        return self.fit_c * np.exp(self.fit_v * np.abs(self.times)[:, None] - self.distances[None, :])

    def envelope_ok(self) -> bool:
        return bool(np.all(self.values <= self.envelope() * (1 + 1e-12)))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "distance", "norm"])
            for i, t in enumerate(self.times):
                for j, dist in enumerate(self.distances):
                    w.writerow([fmt17(t), int(dist), fmt17(self.values[i, j])])

    def fit_dict(self) -> dict:
        return {"C": self.fit_c, "v": self.fit_v, "r_squared": self.r_squared}

    def write_fit_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.fit_dict(), indent=2, sort_keys=True) + "\n")


def fit_lr_envelope(times, dists, vals) -> tuple[float, float, float]:
    """Fit C e^{v|t| - d} to a (time x distance) table of commutator norms.

    v is the least-squares slope of log(value) + d against |t| over nonzero
    entries; C is the smallest prefactor that bounds every entry.
    """
    times = np.abs(np.asarray(times, dtype=float))
    dists = np.asarray(dists, dtype=float)
    usable = vals > 1e-13 * max(float(vals.max(initial=0.0)), 1e-300)
    rows = np.nonzero(usable)[0]
    if rows.size >= 2 and np.ptp(times[rows]) > 0:
        tt = np.broadcast_to(times[:, None], vals.shape)[usable]
        y = np.log(vals[usable]) + np.broadcast_to(dists[None, :], vals.shape)[usable]
        design = np.vstack([np.ones_like(tt), tt]).T
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        v = max(float(coef[1]), 0.0)
        resid = y - design @ coef
        ss = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    else:
        v, r2 = 0.0, 1.0
    expo = v * times[:, None] - dists[None, :]
    c = float(np.max(vals * np.exp(-expo))) if vals.size else 0.0
    return c, v, r2


def lr_commutator_profile(
    a: LocalOperator,
    bs: Sequence[LocalOperator] | LocalOperator,
    t_grid,
    s: SpectralData,
) -> LRProfile:
    """Commutator norms ||[tau^t(A), B]|| for each B in ``bs`` and t in ``t_grid``.

    The velocity v is a least-squares slope of log(value) + d against |t|;
    C is then the smallest prefactor making C e^{v|t| - d} a one-sided envelope.
    """
    if isinstance(bs, LocalOperator):
        bs = [bs]
    t_grid = np.asarray(t_grid, dtype=float)
    for b in bs:
        if a.support.intersect(b.support) is not None:
            raise ValueError("A and B must have disjoint supports")
    dists = np.array([a.support.distance(b.support) for b in bs], dtype=float)
    order = np.argsort(dists, kind="stable")
    bs = [bs[i] for i in order]
    dists = dists[order]
    bmats = [s.matrix_of(b) for b in bs]
    vals = np.zeros((t_grid.size, len(bs)))
    for i, t in enumerate(t_grid):
        at = heisenberg(a, t, s).matrix
        for j, bm in enumerate(bmats):
            vals[i, j] = op_norm(at @ bm - bm @ at)
    c, v, r2 = fit_lr_envelope(t_grid, dists, vals)
    return LRProfile(t_grid, dists, vals, c, v, r2)
