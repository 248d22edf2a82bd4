"""Quasi-adiabatic generator D(s), the unitary flow U(s) and alpha_s = U(s)* . U(s)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import polar

from .algebra import Interaction, LocalOperator, Region, embed, load_interaction, local_hamiltonian, op_norm, pauli_string
from .dynamics import SpectralData, diagonalize
from .filter import FilterFunction, FilterParams, fmt17

__all__ = [
    "InteractionPath",
    "FlowConfig",
    "FlowResult",
    "GapTooSmall",
    "build_tfi_path",
    "linear_path",
    "dH_ds",
    "hamiltonian_at",
    "generator",
    "generator_direct",
    "solve_flow",
    "alpha_apply",
    "v_s_operator",
    "v_s_derivative_check",
    "min_gap",
    "gamma_from_gap",
]


class GapTooSmall(RuntimeError):
    """Raised when the sampled spectral gap falls below the configured threshold."""

    def __init__(self, s: float, gap: float, threshold: float):
        super().__init__(f"gap {gap:.6g} below threshold {threshold:.6g} at s={s:.6g}")
        self.s = s
        self.gap = gap
        self.threshold = threshold


@dataclass(frozen=True)
class InteractionPath:
    """s -> Phi(.; s) on [0, 1] with its derivative, as callables returning local terms."""

    phi: Callable[[float], list[LocalOperator]]
    phi_dot: Callable[[float], list[LocalOperator]]
    range: int
    d: int = 2
    smooth_grid: tuple[float, ...] = (0.0, 1.0)
    description: dict = field(default_factory=dict)

    def interaction(self, s: float) -> Interaction:
        return Interaction(tuple(self.phi(s)), self.range, self.d)

    def derivative(self, s: float) -> Interaction:
        return Interaction(tuple(self.phi_dot(s)), self.range, self.d)

    def assumption_sup(self, s_grid=None) -> float:
        """sup over sampled s and terms X of ||Phi(X;s)|| + |X| ||Phi'(X;s)||."""
        s_grid = np.linspace(0, 1, 11) if s_grid is None else s_grid
        best = 0.0
        for s in s_grid:
            dots = {(t.support.lo, t.support.hi): t for t in self.phi_dot(s)}
            for t in self.phi(s):
                key = (t.support.lo, t.support.hi)
                dn = dots[key].norm() if key in dots else 0.0
                best = max(best, t.norm() + t.support.size * dn)
        return best

    def finite_difference_defect(self, s: float, eps: float) -> float:
        """max_X ||(Phi(X;s+eps) - Phi(X;s))/eps - Phi'(X;s)||."""
        now = {(t.support.lo, t.support.hi): t for t in self.phi(s)}
        nxt = {(t.support.lo, t.support.hi): t for t in self.phi(s + eps)}
        dots = {(t.support.lo, t.support.hi): t for t in self.phi_dot(s)}
        worst = 0.0
        for key in set(now) | set(nxt) | set(dots):
            region = Region(*key)
            zero = LocalOperator.zero(region, self.d)
            diff = (nxt.get(key, zero) - now.get(key, zero)) / eps - dots.get(key, zero)
            worst = max(worst, diff.norm())
        return worst


def build_tfi_path(L: int, h0: float, h1: float, region: Region | None = None) -> InteractionPath:
    """Transverse-field Ising path -sum Z_i Z_{i+1} - h(s) sum X_i, h(s) = (1-s) h0 + s h1.

    ``L`` is the number of sites; the chain is [0, L-1] unless ``region`` is given.
    Paths joining the two phases h < 1 and h > 1 (or touching h = 1) are rejected.
    """
    if not ((h0 > 1 and h1 > 1) or (h0 < 1 and h1 < 1)):
        raise ValueError("TFI path must stay on one side of the critical field h = 1")
    region = region or Region.chain(L)
    sites = list(region.sites)
    zz = [pauli_string([(i, "Z"), (i + 1, "Z")], -1.0) for i in sites[:-1]]
    xs = [pauli_string([(i, "X")]) for i in sites]

    def field(s):
        return (1.0 - s) * h0 + s * h1

    def phi(s):
        return zz + [x * (-field(s)) for x in xs]

    def phi_dot(s):
        return [x * (-(h1 - h0)) for x in xs]

    return InteractionPath(phi, phi_dot, 2, 2, (0.0, 1.0), {"kind": "tfi", "L": L, "h0": h0, "h1": h1})


def linear_path(start: Interaction, end: Interaction, description: dict | None = None) -> InteractionPath:
    """Phi(X;s) = (1-s) Psi_0(X) + s Psi_1(X)."""
    keys = sorted({(t.support.lo, t.support.hi) for t in start.terms + end.terms})
    d = start.d

    def _collect(inter):
        out = {}
        for t in inter.terms:
            k = (t.support.lo, t.support.hi)
            out[k] = out[k] + t if k in out else t
        return out

    a, b = _collect(start), _collect(end)
    zero = {k: LocalOperator.zero(Region(*k), d) for k in keys}
    rng = max(start.range, end.range)

    def phi(s):
        return [a.get(k, zero[k]) * (1.0 - s) + b.get(k, zero[k]) * s for k in keys]

    def phi_dot(s):
        return [b.get(k, zero[k]) - a.get(k, zero[k]) for k in keys]

    return InteractionPath(phi, phi_dot, rng, d, (0.0, 1.0), description or {"kind": "linear"})


def path_from_file(path) -> tuple[InteractionPath, Region]:
    """Load ``{"start": <interaction doc>, "end": <interaction doc>}`` as a linear path."""
    doc = json.loads(Path(path).read_text()) if not isinstance(path, dict) else path
    start, region = load_interaction(doc["start"])
    end, region_end = load_interaction(doc["end"])
    return linear_path(start, end, {"kind": "file"}), region.union(region_end)


def hamiltonian_at(p: InteractionPath, region: Region, s: float) -> LocalOperator:
    return local_hamiltonian(p.interaction(s), region)


def dH_ds(p: InteractionPath, region: Region, s: float) -> LocalOperator:
    """sum over X inside the region of Phi'(X; s)."""
    return local_hamiltonian(p.derivative(s), region)


def _kernel_matrix(spec: SpectralData, f: FilterFunction) -> np.ndarray:
    return f.flow_kernel(spec.differences().ravel()).reshape(spec.dim, spec.dim)


def generator(
    p: InteractionPath,
    region: Region,
    s: float,
    f: FilterFunction,
    spec: SpectralData | None = None,
) -> LocalOperator:
    """D(s) with D_mn = K_gamma(E_m - E_n) (dH/ds)_mn in the eigenbasis of H(s)."""
    spec = spec or diagonalize(hamiltonian_at(p, region, s))
    hdot = spec.to_eigenbasis(dH_ds(p, region, s).matrix)
    d = spec.from_eigenbasis(_kernel_matrix(spec, f) * hdot)
    d = 0.5 * (d + d.conj().T)
    return LocalOperator(region, d, p.d)


def generator_direct(p: InteractionPath, region: Region, s: float, f: FilterFunction) -> LocalOperator:
    """D(s) from the double time quadrature of omega_gamma(t) tau^u(dH/ds) (reference path)."""
    spec = diagonalize(hamiltonian_at(p, region, s))
    hdot = spec.to_eigenbasis(dH_ds(p, region, s).matrix)
    diff = spec.differences()
    iu = np.triu_indices(spec.dim, 1)
    vals = f.flow_kernel_direct(diff[iu])
    k = np.zeros(diff.shape, dtype=complex)
    k[iu] = vals
    # K is odd in the energy difference
    k.T[iu] = -vals
    return LocalOperator(region, spec.from_eigenbasis(k * hdot), p.d)


def alpha_apply(a: LocalOperator, u: np.ndarray) -> LocalOperator:
    """alpha(A) = U* A U."""
    if a.matrix.shape != u.shape:
        raise ValueError("operator and unitary dimensions differ")
    return LocalOperator(a.support, u.conj().T @ a.matrix @ u, a.d)


def min_gap(p: InteractionPath, region: Region, samples: int = 21) -> float:
    return min(diagonalize(hamiltonian_at(p, region, s)).gap for s in np.linspace(0, 1, samples))


def gamma_from_gap(p: InteractionPath, region: Region, fraction: float = 0.45, samples: int = 21) -> float:
    """gamma = fraction x (minimum finite-size gap over sampled s)."""
    return fraction * min_gap(p, region, samples)


@dataclass(frozen=True)
class FlowConfig:
    s_steps: int
    gamma: float
    chain: Region
    filter: FilterParams = field(default_factory=FilterParams)
    reunitarize_every: int = 1
    gap_threshold: float | None = None
    store_every: int | None = None

    def __post_init__(self):
        if self.s_steps < 2:
            raise ValueError("s_steps must be >= 2")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.reunitarize_every < 1:
            raise ValueError("reunitarize_every must be >= 1")

    @property
    def threshold(self) -> float:
        """Minimum admissible gap: 2 gamma unless set explicitly."""
        return 2.0 * self.gamma if self.gap_threshold is None else self.gap_threshold


@dataclass(frozen=True, eq=False)
class FlowResult:
    s_grid: np.ndarray
    fidelity: np.ndarray
    infidelity: np.ndarray
    gap_curve: np.ndarray
    generator_norms: np.ndarray
    unitarity_drift: float
    unitaries: dict
    ground_states: dict
    gamma: float
    region: Region

    @property
    def min_fidelity(self) -> float:
        return float(np.min(self.fidelity))

    @property
    def max_infidelity(self) -> float:
        """max_s (1 - |<psi_s|U(s) psi_0>|^2), computed from the orthogonal component."""
        return float(np.max(self.infidelity))

    @property
    def final_unitary(self) -> np.ndarray:
        return self.unitaries[len(self.s_grid) - 1]

    def unitary_at(self, s: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.s_grid - s)))
        if not np.isclose(self.s_grid[i], s) or i not in self.unitaries:
            raise KeyError(f"no stored unitary at s={s}")
        return self.unitaries[i]

    def rows(self):
        for i, s in enumerate(self.s_grid):
            yield {
                "s": float(s),
                "fidelity": float(self.fidelity[i]),
                "infidelity": float(self.infidelity[i]),
                "gap": float(self.gap_curve[i]),
                "generator_norm": float(self.generator_norms[i]),
            }

    def to_json(self) -> dict:
        cols = {k: [r[k] for r in self.rows()] for k in ("s", "fidelity", "infidelity", "gap", "generator_norm")}
        cols["unitarity_drift"] = self.unitarity_drift
        cols["gamma"] = self.gamma
        return cols

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "fidelity", "infidelity", "gap", "generator_norm"])
            for r in self.rows():
                w.writerow([fmt17(r[k]) for k in ("s", "fidelity", "infidelity", "gap", "generator_norm")])


def solve_flow(p: InteractionPath, config: FlowConfig, f: FilterFunction | None = None) -> FlowResult:
    """Integrate dU/ds = i D(s) U, U(0) = 1, with classical RK4 on a uniform s grid.

    D is re-evaluated at s, s + h/2 and s + h of each step; U is projected
    onto the closest unitary (polar factor) every ``reunitarize_every``
    steps. Raises :class:`GapTooSmall` if any sampled gap is below the
    configured threshold.
    """
    f = f or FilterFunction(config.filter, config.gamma)
    if not np.isclose(f.gamma, config.gamma):
        raise ValueError("filter gamma differs from config gamma")
    region = config.chain
    n = config.s_steps
    h = 1.0 / n
    s_grid = np.linspace(0.0, 1.0, n + 1)
    store_every = config.store_every or n
    cache: dict[float, tuple[SpectralData, np.ndarray]] = {}

    def d_at(s: float) -> np.ndarray:
        key = round(s, 12)
        if key not in cache:
            spec = diagonalize(hamiltonian_at(p, region, s))
            if spec.ground_degeneracy != 1 or spec.gap < config.threshold:
                raise GapTooSmall(s, spec.gap, config.threshold)
            cache.clear()
            cache[key] = (spec, generator(p, region, s, f, spec).matrix)
        return cache[key][1]

    dim = p.d**region.size
    u = np.eye(dim, dtype=complex)
    fidelity = np.empty(n + 1)
    infid = np.empty(n + 1)
    gaps = np.empty(n + 1)
    gnorms = np.empty(n + 1)
    unitaries = {}
    grounds = {}
    drift = 0.0
    psi0 = None

    def record(i: int, s: float, d: np.ndarray):
        nonlocal psi0
        spec = cache[round(s, 12)][0]
        psi = spec.eigenvectors[:, 0]
        if psi0 is None:
            psi0 = psi.copy()
        phi = u @ psi0
        overlap = np.vdot(psi, phi)
        perp = phi - overlap * psi
        fidelity[i] = abs(overlap)
        infid[i] = float(np.vdot(perp, perp).real)
        gaps[i] = spec.gap
        gnorms[i] = op_norm(d, hermitian=True)
        if i % store_every == 0 or i == n:
            unitaries[i] = u.copy()
            grounds[i] = psi.copy()

    d0 = d_at(0.0)
    record(0, 0.0, d0)
    for i in range(n):
        s = s_grid[i]
        k1 = 1j * d_at(s) @ u
        dm = d_at(s + 0.5 * h)
        k2 = 1j * dm @ (u + 0.5 * h * k1)
        k3 = 1j * dm @ (u + 0.5 * h * k2)
        d1 = d_at(s_grid[i + 1])
        k4 = 1j * d1 @ (u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        drift = max(drift, op_norm(u.conj().T @ u - np.eye(dim), hermitian=True))
        if (i + 1) % config.reunitarize_every == 0:
            u = polar(u)[0]
        record(i + 1, s_grid[i + 1], d1)
    return FlowResult(s_grid, fidelity, infid, gaps, gnorms, drift, unitaries, grounds, config.gamma, region)


def v_s_operator(
    a: LocalOperator, p: InteractionPath, region: Region, s: float, f: FilterFunction
) -> LocalOperator:
    """V_s(A) = int dt omega(t) int_0^t du tau^{t-u} delta_{Phi'(s)} tau^u (A) in closed spectral form.

    In the eigenbasis of H(s), with W = hat omega_gamma and DD its divided difference,
    V_mn = sum_k Hdot_mk A_kn DD(E_m - E_n, E_k - E_n) - A_mk Hdot_kn DD(E_m - E_n, E_m - E_k).
    """
    spec = diagonalize(hamiltonian_at(p, region, s))
    e = spec.excitations
    hd = spec.to_eigenbasis(dH_ds(p, region, s).matrix)
    am = spec.to_eigenbasis(spec.matrix_of(a))
    x = e[:, None, None] - e[None, None, :]  # E_m - E_n, indexed [m, k, n]
    y1 = e[None, :, None] - e[None, None, :]  # E_k - E_n
    y2 = e[:, None, None] - e[None, :, None]  # E_m - E_k
    g1 = f.fourier_divided_difference(np.broadcast_to(x, (e.size,) * 3), np.broadcast_to(y1, (e.size,) * 3))
    g2 = f.fourier_divided_difference(np.broadcast_to(x, (e.size,) * 3), np.broadcast_to(y2, (e.size,) * 3))
    v = np.einsum("mk,kn,mkn->mn", hd, am, g1) - np.einsum("mk,kn,mkn->mn", am, hd, g2)
    return LocalOperator(region, spec.from_eigenbasis(v), p.d)


def _filtered_at(a: LocalOperator, p: InteractionPath, region: Region, s: float, f: FilterFunction) -> np.ndarray:
    from .dynamics import filtered_average

    return filtered_average(a, diagonalize(hamiltonian_at(p, region, s)), f).matrix


def v_s_derivative_check(
    a: LocalOperator,
    p: InteractionPath,
    region: Region,
    s: float,
    ds: float,
    f: FilterFunction,
) -> float:
    """||(I_{s+ds}(A) - I_{s-ds}(A)) / (2 ds) - V_s(A)|| / ||A||."""
    norm_a = a.norm()
    if norm_a == 0:
        return 0.0
    fd = (_filtered_at(a, p, region, s + ds, f) - _filtered_at(a, p, region, s - ds, f)) / (2 * ds)
    v = v_s_operator(a, p, region, s, f).matrix
    return op_norm(fd - v) / norm_a
