"""Empirical decay measurements for quasi-locality estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .algebra import LocalOperator, Region, conditional_expectation, embed, op_norm, pauli_string
from .dynamics import SpectralData, diagonalize, fit_lr_envelope, heisenberg
from .filter import FilterFunction, FilterParams
from .flow import FlowConfig, FlowResult, InteractionPath, alpha_apply, build_tfi_path, hamiltonian_at, solve_flow
from .profiles import DecayFit, DecayProfile, fit_exponential_decay, hhat_exponent

__all__ = [
    "WeightH",
    "h_weight",
    "tau_locality_profile",
    "alpha_locality_profile",
    "finite_volume_convergence",
    "tfi_tau_evolver",
    "tfi_alpha_inverse_evolver",
    "approximate_identity",
    "ApproximateIdentity",
    "fit_exponential_decay",
]

E2 = math.e**2


def h_weight(x):
    """h(x) = x / ln^2 x for x > e^2, and the constant e^2/4 on [0, e^2]."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("h is defined for x >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > E2, x / np.log(np.maximum(x, E2)) ** 2, E2 / 4.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class WeightH:
    """h-hat(x) = eta1 h(a_tilde x)."""

    eta1: float
    a_tilde: float

    def __post_init__(self):
        if not (self.eta1 > 0 and self.a_tilde > 0):
            raise ValueError("eta1 and a_tilde must be positive")

    def __call__(self, x):
        return self.eta1 * h_weight(self.a_tilde * np.asarray(x, dtype=float))


def _local_radius(a: LocalOperator) -> int:
    return a.support.radius


def _deviation_profile(op: LocalOperator, n_grid) -> np.ndarray:
    return np.array([(op - conditional_expectation(op, int(n))).norm() for n in n_grid])


def _pauli_conjugates(m: np.ndarray, region: Region, j: int):
    """sigma_j M sigma_j for sigma in (X, Y, Z), by index permutation and signs (qubits)."""
    k = j - region.lo
    left, right = 2**k, 2 ** (region.hi - j)
    t = m.reshape(left, 2, right, left, 2, right)
    sign = np.array([1.0, -1.0])
    zz = t * sign[None, :, None, None, None, None] * sign[None, None, None, None, :, None]
    xx = t[:, ::-1, :, :, ::-1, :]
    yy = zz[:, ::-1, :, :, ::-1, :]
    shape = m.shape
    return [c.reshape(shape) for c in (xx, yy, zz)]


def _single_site_commutators(at: np.ndarray, a: LocalOperator, s: SpectralData) -> dict[int, float]:
    """max_sigma ||[X, sigma_j]|| for every chain site j outside the support of A.

    Uses ||[X, sigma]|| = ||X - sigma X sigma|| for a unitary involution sigma.
    """
    if s.d != 2:
        raise ValueError("single-site Pauli probes need qubit chains")
    out = {}
    for j in s.region.sites:
        if j in a.support:
            continue
        out[j] = max(op_norm(at - c) for c in _pauli_conjugates(at, s.region, j))
    return out


def tau_locality_profile(
    a: LocalOperator,
    t: float,
    s: SpectralData,
    n_grid: Sequence[int] | None = None,
    lr_times: int = 5,
) -> DecayProfile:
    """values[k] = ||tau^t(A) - E_{N_k}(tau^t(A))|| on the chain of ``s``.

    The profile gets a least-squares fit C exp(-rate N). Two one-sided checks
    go into ``meta``:

    * ``envelope_bound_ok``: values <= C_LR |Lambda_M| exp(v|t| - (N - M)),
      with (C_LR, v) fitted to max_sigma ||[tau^u(A), sigma_j]|| over
      u in [0, t] and chain sites j outside the support;
    * ``twirl_bound_ok``: values <= (3/4) sum_{j outside Lambda_N}
      max_sigma ||[tau^t(A), sigma_j]||, valid because E_N is a product of
      single-site twirls.
    """
    m = _local_radius(a)
    radius = s.region.radius
    n_grid = list(range(m, radius + 1)) if n_grid is None else [int(n) for n in n_grid]
    if min(n_grid) < m or max(n_grid) > radius:
        raise ValueError("N grid must lie within [support radius, chain radius]")
    at = heisenberg(a, t, s)
    vals = _deviation_profile(at, n_grid)
    meta = {"t": t, "M": m}
    times = np.linspace(0.0, abs(t), lr_times) if t != 0 else np.array([0.0])
    tables = [_single_site_commutators(heisenberg(a, u, s).matrix, a, s) for u in times[:-1]]
    tables.append(_single_site_commutators(at.matrix, a, s))
    if tables[-1]:
        sites = list(tables[-1])
        dists = np.array([a.support.distance(Region(j, j)) for j in sites], float)
        lr_vals = np.array([[tab[j] for j in sites] for tab in tables])
        c_lr, v_lr, r2 = fit_lr_envelope(times, dists, lr_vals)
        lam_m = Region.ball(m).intersect(s.region).size
        env = c_lr * lam_m * np.exp(v_lr * abs(t) - (np.array(n_grid, float) - m))
        twirl = np.array([0.75 * sum(tables[-1][j] for j in sites if j not in Region.ball(n)) for n in n_grid])
        meta.update(
            lr_prefactor=c_lr,
            lr_velocity=v_lr,
            lr_r_squared=r2,
            envelope_bound=env.tolist(),
            envelope_bound_ok=bool(np.all(vals <= env * (1 + 1e-9))),
            twirl_bound=twirl.tolist(),
            twirl_bound_ok=bool(np.all(vals <= twirl * (1 + 1e-9) + 1e-14)),
        )
    prof = DecayProfile(np.array(n_grid, float), vals, label="tau_locality", meta=meta)
    try:
        prof = prof.with_fit("pure-exp")
    except ValueError:
        pass
    return prof


def alpha_locality_profile(
    a: LocalOperator,
    flow: FlowResult,
    s: float,
    n_grid: Sequence[int] | None = None,
    model: str = "hhat-exp",
) -> DecayProfile:
    """values[k] = ||alpha_s(A) - E_{N_k}(alpha_s(A))|| with alpha_s(A) = U(s)* A U(s)."""
    u = flow.unitary_at(s)
    region = flow.region
    m = _local_radius(a)
    radius = region.radius
    n_grid = list(range(m, radius + 1)) if n_grid is None else [int(n) for n in n_grid]
    if min(n_grid) < m or max(n_grid) > radius:
        raise ValueError("N grid must lie within [support radius, chain radius]")
    aa = alpha_apply(embed(a, region), u)
    vals = _deviation_profile(aa, n_grid)
    prof = DecayProfile(np.array(n_grid, float), vals, label="alpha_locality", meta={"s": s, "M": m})
    try:
        pure = fit_exponential_decay(prof, "pure-exp")
        prof = replace(prof, meta={**prof.meta, "pure_exp_fit": pure.to_dict()})
        if model == "hhat-exp":
            # h-hat is flat on [0, e^2/a_tilde]; shift to N - M as in the estimate
            shifted = DecayProfile(prof.abscissa - m + 1, prof.values)
            prof = replace(prof, fit=fit_exponential_decay(shifted, "hhat-exp"))
        else:
            prof = replace(prof, fit=pure)
    except ValueError:
        pass
    return prof


def finite_volume_convergence(
    a: LocalOperator,
    sizes: Sequence[int],
    evolve: Callable[[int, LocalOperator], LocalOperator],
) -> DecayProfile:
    """values[k] = ||op_{n_k}(A) - op_{n_max}(A)||, where ``evolve(n, A)`` acts on Lambda_n.

    Smaller-volume results are embedded into Lambda_{n_max} before comparison.
    """
    sizes = [int(n) for n in sizes]
    if any(b <= a_ for a_, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be increasing")
    if sizes[0] < a.support.radius:
        raise ValueError("sizes must cover the support of A")
    big = Region.ball(sizes[-1])
    results = [embed(evolve(n, a), big) for n in sizes]
    ref = results[-1].matrix
    vals = np.array([op_norm(r.matrix - ref) for r in results])
    prof = DecayProfile(np.array(sizes, float), vals, label="finite_volume")
    try:
        prof = prof.with_fit("pure-exp")
    except ValueError:
        pass
    return prof


def tfi_tau_evolver(h: float, t: float) -> Callable[[int, LocalOperator], LocalOperator]:
    """tau^t on the TFI chain Lambda_n = [-n, n] with field h."""

    def evolve(n: int, a: LocalOperator) -> LocalOperator:
        region = Region.ball(n)
        p = build_tfi_path(region.size, h, h, region)
        spec = diagonalize(hamiltonian_at(p, region, 0.0))
        return heisenberg(embed(a, region), t, spec)

    return evolve


def tfi_alpha_inverse_evolver(
    h0: float, h1: float, s: float, gamma: float, s_steps: int = 20, params: FilterParams | None = None
) -> Callable[[int, LocalOperator], LocalOperator]:
    """alpha_{s, Lambda_n}^{-1}(A) = U(s) A U(s)* for the TFI path on Lambda_n, fixed gamma."""
    f = FilterFunction(params, gamma)
    steps_to_s = max(1, round(s * s_steps))

    def evolve(n: int, a: LocalOperator) -> LocalOperator:
        region = Region.ball(n)
        p = build_tfi_path(region.size, h0, h1, region)
        cfg = FlowConfig(s_steps, gamma, region, f.params, store_every=1, gap_threshold=0.0)
        res = solve_flow(p, cfg, f)
        u = res.unitaries[steps_to_s]
        am = embed(a, region).matrix
        return LocalOperator(region, u @ am @ u.conj().T, a.d)

    return evolve


@dataclass(frozen=True, eq=False)
class ApproximateIdentity:
    u: LocalOperator
    spectrum: np.ndarray
    a_one_minus_u: float
    phi_u: float
    u_psi0: float
    log_h: float


def approximate_identity(
    a: LocalOperator,
    n: int,
    psi0: np.ndarray,
    beta_prime: float | None = None,
    betas: Sequence[float] = (0.9, 0.8, 0.7, 0.6, 0.5),
    ideal_tol: float | None = None,
    psd_tol: float = 1e-10,
) -> ApproximateIdentity:
    """u_{N,A} = (1 + h(N) E_N(A*A))^{-1} h(N) E_N(A*A), h(N) = exp(N^beta').

    Evaluated spectrally as g(h(N) lambda) with g(x) = x / (1 + x) = expit(log h + log lambda),
    so h(N) itself is never formed. ``psi0`` is the ground-state vector on the
    support of ``a``; the diagnostics are ||A(1-u)||, <psi0|u|psi0> and ||u psi0||.
    """
    b1, b2, b3, b4, b5 = betas
    if beta_prime is None:
        beta_prime = 0.5 * (b2 + b4)
    if not (b4 < beta_prime < b2):
        raise ValueError("beta' must lie strictly between beta_4 and beta_2")
    if ideal_tol is not None and np.linalg.norm(a.matrix @ psi0) > ideal_tol:
        raise ValueError("A is not in the numerical left ideal (||A psi0|| > ideal_tol)")
    log_h = float(n) ** beta_prime
    ata = a.adjoint() @ a
    b = conditional_expectation(ata, n).matrix
    b = 0.5 * (b + b.conj().T)
    lam, vec = np.linalg.eigh(b)
    scale = max(1.0, float(np.max(np.abs(lam)))) if lam.size else 1.0
    if np.any(lam < -psd_tol * scale):
        raise ValueError("E_N(A*A) is not positive semidefinite (numerical breakdown)")
    with np.errstate(divide="ignore"):
        g = np.where(lam > 0, expit(log_h + np.log(np.maximum(lam, 1e-300))), 0.0)
    u = (vec * g) @ vec.conj().T
    u_op = LocalOperator(a.support, u, a.d)
    one_minus = np.eye(u.shape[0]) - u
    a_res = op_norm(a.matrix @ one_minus)
    phi_u = float(np.vdot(psi0, u @ psi0).real)
    u_psi = float(np.linalg.norm(u @ psi0))
    return ApproximateIdentity(u_op, g, a_res, phi_u, u_psi, log_h)
