"""Dense operator algebra on finite 1-D spin chains.

Sites are integers; a :class:`Region` is an interval ``[lo, hi]`` and
``Region.ball(n)`` is ``[-n, n]``. Matrices use the tensor ordering lo, ..., hi
with the leftmost site as the most significant factor.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, svds

__all__ = [
    "Region",
    "LocalOperator",
    "Interaction",
    "WeightFunction",
    "NormReport",
    "PAULI",
    "pauli_string",
    "embed",
    "commutator",
    "conditional_expectation",
    "f_norm",
    "weight_eval",
    "local_hamiltonian",
    "locality_from_commutators",
    "load_interaction",
    "dump_interaction",
    "op_norm",
    "random_local_operator",
]

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

INTERACTION_SCHEMA_VERSION = 1
_DENSE_NORM_LIMIT = 256
_ARPACK_TOL = 1e-13


@dataclass(frozen=True, order=True)
class Region:
    lo: int
    hi: int

    def __post_init__(self):
        if self.hi < self.lo:
            raise ValueError(f"empty region [{self.lo}, {self.hi}]")

    @classmethod
    def ball(cls, n: int) -> "Region":
        """Lambda_n = [-n, n]."""
        if n < 0:
            raise ValueError("n must be >= 0")
        return cls(-n, n)

    @classmethod
    def chain(cls, n_sites: int) -> "Region":
        """Open chain of ``n_sites`` sites at 0, ..., n_sites - 1."""
        return cls(0, n_sites - 1)

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    @property
    def sites(self) -> range:
        return range(self.lo, self.hi + 1)

    @property
    def radius(self) -> int:
        """Smallest n with Lambda_n covering the region."""
        return max(abs(self.lo), abs(self.hi))

    @property
    def diameter(self) -> int:
        return self.hi - self.lo

    def contains(self, other: "Region") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi

    def __contains__(self, site: int) -> bool:
        return self.lo <= site <= self.hi

    def union(self, other: "Region") -> "Region":
        return Region(min(self.lo, other.lo), max(self.hi, other.hi))

    def intersect(self, other: "Region") -> "Region | None":
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return Region(lo, hi) if lo <= hi else None

    def distance(self, other: "Region") -> int:
        """Lattice distance between two regions (0 if they overlap)."""
        return max(0, other.lo - self.hi, self.lo - other.hi)


def _start_vector(n: int) -> np.ndarray:
    # fixed start keeps ARPACK results bit-identical across calls and processes
    return np.random.default_rng(20240607).standard_normal(n)


def op_norm(m: np.ndarray, hermitian: bool | None = None) -> float:
    """Operator (spectral) norm of a dense matrix.

    Hermitian and anti-Hermitian inputs go through an eigenvalue solver;
    above 256 dimensions a Lanczos/Arnoldi solve for the extreme value
    replaces the full decomposition.
    """
    if m.size == 0:
        return 0.0
    if m.shape[0] == 1:
        return float(abs(m[0, 0]))
    scale = float(np.max(np.abs(m)))
    if scale == 0.0:
        return 0.0
    if hermitian is None:
        mh = m.conj().T
        if np.max(np.abs(m - mh)) <= 1e-10 * scale:
            hermitian = True
        elif np.max(np.abs(m + mh)) <= 1e-10 * scale:
            m, hermitian = 1j * m, True
        else:
            hermitian = False
    big = m.shape[0] > _DENSE_NORM_LIMIT
    if hermitian:
        m = 0.5 * (m + m.conj().T)
        if big:
            try:
                return float(abs(eigsh(m, k=1, which="LM", tol=_ARPACK_TOL, v0=_start_vector(m.shape[0]), return_eigenvectors=False)[0]))
            except ArpackNoConvergence:
                pass
        return float(np.max(np.abs(np.linalg.eigvalsh(m))))
    if big:
        try:
            return float(svds(m, k=1, tol=_ARPACK_TOL, v0=_start_vector(min(m.shape)), return_singular_vectors=False)[0])
        except ArpackNoConvergence:
            pass
    return float(np.linalg.norm(m, 2))


@dataclass(frozen=True, eq=False)
class LocalOperator:
    """A matrix acting on the sites of ``support`` (tensor factors of dimension d)."""

    support: Region
    matrix: np.ndarray
    d: int = 2

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        dim = self.d**self.support.size
        if m.shape != (dim, dim):
            raise ValueError(f"matrix shape {m.shape} does not match d^{self.support.size} = {dim}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, support: Region, d: int = 2) -> "LocalOperator":
        return cls(support, np.eye(d**support.size, dtype=complex), d)

    @classmethod
    def zero(cls, support: Region, d: int = 2) -> "LocalOperator":
        dim = d**support.size
        return cls(support, np.zeros((dim, dim), dtype=complex), d)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def norm(self) -> float:
        return op_norm(self.matrix)

    def adjoint(self) -> "LocalOperator":
        return LocalOperator(self.support, self.matrix.conj().T, self.d)

    def is_hermitian(self, tol: float = 1e-10) -> bool:
        m = self.matrix
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        return bool(np.max(np.abs(m - m.conj().T)) <= tol * scale)

    def embed(self, target: Region) -> "LocalOperator":
        return embed(self, target)

    def _aligned(self, other: "LocalOperator"):
        if self.d != other.d:
            raise ValueError("on-site dimensions differ")
        if self.support == other.support:
            return self.support, self.matrix, other.matrix
        region = self.support.union(other.support)
        return region, embed(self, region).matrix, embed(other, region).matrix

    def __add__(self, other):
        if isinstance(other, LocalOperator):
            region, a, b = self._aligned(other)
            return LocalOperator(region, a + b, self.d)
        return LocalOperator(self.support, self.matrix + other * np.eye(self.dim), self.d)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other

    def __rsub__(self, other):
        return (-1.0) * self + other

    def __neg__(self):
        return (-1.0) * self

    def __mul__(self, scalar):
        if isinstance(scalar, LocalOperator):
            return self @ scalar
        return LocalOperator(self.support, self.matrix * scalar, self.d)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return LocalOperator(self.support, self.matrix / scalar, self.d)

    def __matmul__(self, other: "LocalOperator") -> "LocalOperator":
        region, a, b = self._aligned(other)
        return LocalOperator(region, a @ b, self.d)

    def allclose(self, other: "LocalOperator", atol: float = 1e-10) -> bool:
        region, a, b = self._aligned(other)
        return bool(np.allclose(a, b, atol=atol, rtol=0))

    def __repr__(self) -> str:
        return f"LocalOperator(support=[{self.support.lo}, {self.support.hi}], dim={self.dim})"


def pauli_string(
    sites: Iterable[tuple[int, str]],
    coefficient: complex = 1.0,
    region: Region | None = None,
) -> LocalOperator:
    """Tensor product of Pauli matrices on the named sites, scaled by ``coefficient``.

    The result lives on the smallest interval covering the sites, or on
    ``region`` when given (required for the empty string).
    """
    sites = list(sites)
    idx = [s for s, _ in sites]
    if len(set(idx)) != len(idx):
        raise ValueError("duplicate sites in Pauli string")
    if not np.isfinite(complex(coefficient)):
        raise ValueError("coefficient must be finite")
    labels = {}
    for s, lab in sites:
        lab = lab.upper()
        if lab not in PAULI:
            raise ValueError(f"unknown Pauli label {lab!r}")
        labels[s] = lab
    if region is None:
        if not idx:
            raise ValueError("empty Pauli string needs an explicit region")
        region = Region(min(idx), max(idx))
    elif idx and not all(s in region for s in idx):
        raise ValueError("Pauli sites outside the declared region")
    m = np.array([[1.0 + 0j]])
    for s in region.sites:
        m = np.kron(m, PAULI[labels.get(s, "I")])
    return LocalOperator(region, complex(coefficient) * m, 2)


def random_local_operator(
    rng: np.random.Generator, support: Region, d: int = 2, hermitian: bool = False
) -> LocalOperator:
    """Gaussian random matrix on ``support``, scaled to unit operator norm."""
    dim = d**support.size
    m = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    if hermitian:
        m = m + m.conj().T
    return LocalOperator(support, m / op_norm(m), d)


def embed(a: LocalOperator, target: Region) -> LocalOperator:
    """I (x) A (x) I on ``target``."""
    if not target.contains(a.support):
        raise ValueError(f"support {a.support} not contained in {target}")
    if target == a.support:
        return a
    left = a.d ** (a.support.lo - target.lo)
    right = a.d ** (target.hi - a.support.hi)
    m = a.matrix
    if left > 1:
        m = np.kron(np.eye(left), m)
    if right > 1:
        m = np.kron(m, np.eye(right))
    return LocalOperator(target, m, a.d)


def commutator(a: LocalOperator, b: LocalOperator) -> LocalOperator:
    """[A, B] on the union of the supports; exactly zero for disjoint supports."""
    if a.support.intersect(b.support) is None:
        return LocalOperator.zero(a.support.union(b.support), a.d)
    region, ma, mb = a._aligned(b)
    return LocalOperator(region, ma @ mb - mb @ ma, a.d)


def partial_trace_keep(m: np.ndarray, d: int, n_sites: int, keep: Sequence[int]) -> np.ndarray:
    """Normalized partial trace of an operator on ``n_sites`` sites, keeping positions ``keep``."""
    keep = sorted(keep)
    drop = [i for i in range(n_sites) if i not in keep]
    if not drop:
        return m
    t = m.reshape((d,) * (2 * n_sites))
    # trace pairs (i, n_sites + i) for dropped positions, highest first
    for i in sorted(drop, reverse=True):
        t = np.trace(t, axis1=i, axis2=i + t.ndim // 2)
    k = len(keep)
    return t.reshape(d**k, d**k) / d ** len(drop)


def conditional_expectation(a: LocalOperator, n: int) -> LocalOperator:
    """E_N(A) = (id on Lambda_N) (x) (normalized trace elsewhere).

    The result is returned on the support of ``a`` (padded with identities),
    so that ``a - E_N(a)`` needs no re-embedding. Its genuine support is
    ``support(a)`` intersected with Lambda_N.
    """
    if n < 0:
        raise ValueError("N must be >= 0")
    ball = Region.ball(n)
    inner = a.support.intersect(ball)
    if inner == a.support:
        return a
    d = a.d
    if inner is None:
        val = np.trace(a.matrix) / a.dim
        return LocalOperator(a.support, val * np.eye(a.dim), d)
    keep = [s - a.support.lo for s in inner.sites]
    reduced = partial_trace_keep(a.matrix, d, a.support.size, keep)
    return embed(LocalOperator(inner, reduced, d), a.support)


# -- weight functions and the quasi-local norm --------------------------------

DEFAULT_BETAS = (0.9, 0.8, 0.7, 0.6, 0.5)


@dataclass(frozen=True)
class WeightFunction:
    """One of the decreasing weights f, f0, f1, f2, g, zeta.

    f(t) = exp(-t^b1)/t, f0 = exp(-t^b1), f1 = exp(-t^b2),
    f2 = t^{-2(nu+2)} exp(-t^b3), g = exp(-t^b4), zeta = exp(-t^b5).
    """

    kind: str = "f"
    betas: tuple[float, float, float, float, float] = DEFAULT_BETAS
    nu: int = 1

    def __post_init__(self):
        if self.kind not in ("f", "f0", "f1", "f2", "g", "zeta"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        b = self.betas
        if len(b) != 5 or not (0 < b[4] < b[3] < b[2] < b[1] < b[0] < 1):
            raise ValueError("betas must satisfy 0 < b5 < b4 < b3 < b2 < b1 < 1")

    def __call__(self, t):
        return weight_eval(self, t)

    def log(self, t):
        t = np.asarray(t, dtype=float)
        b1, b2, b3, b4, b5 = self.betas
        if self.kind == "f":
            return -np.log(t) - t**b1
        if self.kind == "f0":
            return -(t**b1)
        if self.kind == "f1":
            return -(t**b2)
        if self.kind == "f2":
            return -2 * (self.nu + 2) * np.log(t) - t**b3
        if self.kind == "g":
            return -(t**b4)
        return -(t**b5)


def weight_eval(f: WeightFunction, t):
    """Evaluate the weight at t > 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("weights are evaluated at t > 0")
    out = np.exp(f.log(t))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NormReport:
    plain_norm: float
    sup_ratio: float
    f_norm: float
    n_max: int
    argmax: int = 0


def f_norm(a: LocalOperator, f: WeightFunction, n_max: int | None = None) -> NormReport:
    """||A||_f = ||A|| + max_{1 <= N <= n_max} ||A - E_N(A)|| / f(N).

    ``n_max`` defaults to the radius of the support of ``a``, past which
    every deviation vanishes.
    """
    if n_max is None:
        n_max = max(1, a.support.radius)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    plain = a.norm()
    best, arg = 0.0, 0
    for n in range(1, n_max + 1):
        if Region.ball(n).contains(a.support):
            break
        dev = (a - conditional_expectation(a, n)).norm()
        ratio = dev / weight_eval(f, n)
        if ratio > best:
            best, arg = ratio, n
    return NormReport(plain, best, plain + best, n_max, arg)


# -- interactions --------------------------------------------------------------


@dataclass(frozen=True)
class Interaction:
    """Finite-range interaction: a tuple of self-adjoint local terms Psi(X).

    Terms sharing a support are summed when the Hamiltonian is built.
    """

    terms: tuple[LocalOperator, ...] = ()
    range: int = 2
    d: int = 2

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for term in self.terms:
            if term.d != self.d:
                raise ValueError("term on-site dimension differs from the interaction's")
            if not term.is_hermitian():
                raise ValueError(f"interaction term on {term.support} is not self-adjoint")
            if term.support.diameter >= self.range and np.any(term.matrix != 0):
                raise ValueError(
                    f"term on {term.support} has diameter {term.support.diameter} >= range {self.range}"
                )

    def sup_norm(self) -> float:
        return max((t.norm() for t in self.terms), default=0.0)

    def restricted(self, region: Region) -> list[LocalOperator]:
        return [t for t in self.terms if region.contains(t.support)]


def local_hamiltonian(psi: Interaction, region: Region) -> LocalOperator:
    """(H_Psi)_Lambda = sum of terms with support inside ``region``."""
    dim = psi.d**region.size
    h = np.zeros((dim, dim), dtype=complex)
    for term in psi.restricted(region):
        h += embed(term, region).matrix
    h = 0.5 * (h + h.conj().T)
    return LocalOperator(region, h, psi.d)


def locality_from_commutators(
    a: LocalOperator,
    n: int,
    probe_count: int = 64,
    seed: int = 0,
    max_weight: int | None = 2,
    region: Region | None = None,
) -> tuple[float, bool, float]:
    """Estimate eps = max_B ||[A, B]|| / ||B|| over Pauli strings B outside Lambda_N.

    Candidates are Pauli strings of weight <= ``max_weight`` on the sites of
    ``region`` (default: the support of ``a``) not in Lambda_N. When there
    are at most ``probe_count`` candidates all are used, otherwise a uniform
    sample with a fixed seed. Returns ``(eps, deviation <= 2 eps, deviation)``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    if a.d != 2:
        raise ValueError("Pauli probes need d = 2")
    region = region or a.support
    ball = Region.ball(n)
    outside = [s for s in region.sites if s not in ball]
    deviation = (a - conditional_expectation(a, n)).norm()
    if not outside:
        return 0.0, deviation <= 1e-12, deviation
    w = len(outside) if max_weight is None else min(max_weight, len(outside))
    total = sum(math.comb(len(outside), k) * 3**k for k in range(1, w + 1))
    rng = np.random.default_rng(seed)
    if total <= probe_count:
        probes = [
            tuple(zip(sites, labels))
            for k in range(1, w + 1)
            for sites in itertools.combinations(outside, k)
            for labels in itertools.product("XYZ", repeat=k)
        ]
    else:
        probes = []
        weights = np.array([math.comb(len(outside), k) * 3**k for k in range(1, w + 1)], float)
        for _ in range(probe_count):
            k = int(rng.choice(np.arange(1, w + 1), p=weights / weights.sum()))
            sites = sorted(rng.choice(outside, size=k, replace=False).tolist())
            labels = rng.choice(list("XYZ"), size=k).tolist()
            probes.append(tuple(zip(sites, labels)))
    eps = 0.0
    for p in probes:
        b = pauli_string(p)
        eps = max(eps, commutator(a, b).norm())
    return eps, bool(deviation <= 2 * eps + 1e-12), deviation


# -- JSON interaction files ----------------------------------------------------


def _chain_region(desc: dict) -> Region:
    if "radius" in desc:
        return Region.ball(int(desc["radius"]))
    if "sites" in desc:
        return Region.chain(int(desc["sites"]))
    return Region(int(desc["lo"]), int(desc["hi"]))


def load_interaction(source) -> tuple[Interaction, Region]:
    """Read an interaction file (path, JSON text already parsed as dict, or file object).

    Schema (version 1)::

        {"version": 1,
         "chain": {"radius": n, "d": 2},          # or {"sites": L} / {"lo": a, "hi": b}
         "range": R,                               # optional, default max diameter + 1
         "terms": [{"sites": [int], "paulis": [str], "coeff": [re, im]}, ...]}

    A bare list of terms is accepted with a default chain covering all sites.
    """
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    elif isinstance(source, (dict, list)):
        data = source
    else:
        data = json.load(source)
    if isinstance(data, list):
        data = {"terms": data}
    version = data.get("version", INTERACTION_SCHEMA_VERSION)
    if version != INTERACTION_SCHEMA_VERSION:
        raise ValueError(f"unsupported interaction schema version {version}")
    chain_desc = data.get("chain", {})
    d = int(chain_desc.get("d", 2))
    if d != 2:
        raise ValueError("Pauli-term files require d = 2")
    grouped: dict[tuple[int, int], np.ndarray] = {}
    all_sites = []
    for entry in data["terms"]:
        sites = [int(s) for s in entry["sites"]]
        paulis = list(entry["paulis"])
        if len(sites) != len(paulis):
            raise ValueError("sites and paulis differ in length")
        coeff = entry.get("coeff", [1.0, 0.0])
        c = complex(coeff[0], coeff[1]) if isinstance(coeff, (list, tuple)) else complex(coeff)
        op = pauli_string(zip(sites, paulis), c)
        key = (op.support.lo, op.support.hi)
        grouped[key] = grouped.get(key, 0) + op.matrix
        all_sites.extend(sites)
    terms = tuple(LocalOperator(Region(*k), m, 2) for k, m in sorted(grouped.items()))
    rng_default = max((t.support.diameter for t in terms), default=0) + 1
    inter = Interaction(terms, int(data.get("range", rng_default)), d)
    if chain_desc:
        region = _chain_region(chain_desc)
    else:
        region = Region(min(all_sites), max(all_sites))
    return inter, region


def dump_interaction(terms: Sequence[dict], chain: dict, range_: int | None = None) -> dict:
    """Assemble the JSON document accepted by :func:`load_interaction`."""
    doc = {"version": INTERACTION_SCHEMA_VERSION, "chain": dict(chain), "terms": list(terms)}
    if range_ is not None:
        doc["range"] = int(range_)
    return doc
