"""Hastings-type filter function omega_gamma and its derived kernels.

The filter is the normalized infinite product

    omega_1(t) = c * prod_{n>=1} (sin(a_n t) / (a_n t))**2,
    a_n = a_1 / (n ln(n)**2)  (n >= 2),  sum_n a_n = 1/2,

truncated after ``n_terms`` factors, and ``omega_gamma(t) = gamma * omega_1(gamma t)``.
Every sinc**2 factor has a triangular Fourier transform of half-width 2 a_n, so
the truncated product has Fourier support inside ``[-2 S_N, 2 S_N]`` with
``S_N = sum_{n<=N} a_n < 1/2``.

All integrals are done in the scaled variable of omega_1, on composite
Gauss-Legendre panels.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.special import bernoulli

__all__ = [
    "FilterParams",
    "FilterFunction",
    "compute_a1",
    "a_n",
    "gauss_legendre_panels",
]

# |x| below which sinc(x) is replaced by its series 1 - x^2/6
SINC_SERIES_THRESHOLD = 1e-4
# largest a_n t handled by the log-sinc power series in the product tail
_LOGSINC_SERIES_MAX = 0.5
_LOGSINC_ORDER = 10
# kappa = delta_e / gamma below which the flow kernel uses its Taylor form
KERNEL_SERIES_THRESHOLD = 1e-8
# divided differences of the Fourier transform switch to a derivative below this spacing
_DIVDIFF_THRESHOLD = 1e-5
_PANEL_WIDTH = 0.25
_TABLE_STEP = 1.0 / 2048


def _sum_tail_terms(n: int) -> tuple[float, float]:
    """Euler-Maclaurin estimate of sum_{m>=n} 1/(m ln(m)^2) and its error bound."""
    log_n = math.log(n)
    f = 1.0 / (n * log_n**2)
    fprime = -(log_n + 2.0) / (n**2 * log_n**3)
    # sum_{m>=n} f(m) = int_n^inf f + f(n)/2 - f'(n)/12 + R,  |R| <= |f'(n)|/12
    estimate = 1.0 / log_n + 0.5 * f - fprime / 12.0
    return estimate, abs(fprime) / 12.0


def compute_a1(tail_tol: float = 1e-12, cutoff: int | None = None) -> float:
    """Return a_1 such that sum_{n>=1} a_n = 1/2.

    The series S = sum_{n>=2} 1/(n ln(n)^2) is summed exactly up to ``cutoff``
    and closed with an Euler-Maclaurin tail whose remainder is bounded by
    |f'(cutoff)|/12. If ``cutoff`` is None the smallest power of two meeting
    ``tail_tol`` is used.
    """
    if not tail_tol > 0:
        raise ValueError("tail_tol must be positive")
    if cutoff is None:
        cutoff = 1024
        while _sum_tail_terms(cutoff + 1)[1] > 0.1 * tail_tol:
            cutoff *= 2
    elif cutoff < 2:
        raise ValueError("cutoff must be at least 2")
    n = np.arange(2, cutoff + 1, dtype=float)
    head = math.fsum(1.0 / (n * np.log(n) ** 2))
    tail, err = _sum_tail_terms(cutoff + 1)
    # d a1 / d S = -a1/(1+S), so the bound on S carries over with a factor < 1
    if err > tail_tol:
        raise ValueError(f"cutoff {cutoff} cannot reach tail_tol={tail_tol:g}")
    return 0.5 / (1.0 + head + tail)


def a_n(n, a1: float):
    """Coefficient a_n of the filter product; accepts scalars or integer arrays."""
    n_arr = np.asarray(n)
    if np.any(n_arr < 1):
        raise ValueError("a_n is defined for n >= 1")
    nf = n_arr.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(n_arr == 1, a1, a1 / (nf * np.log(nf) ** 2))
    return float(out) if out.ndim == 0 else out


def gauss_legendre_panels(lo: float, hi: float, width: float, nodes: int):
    """Nodes and weights of composite Gauss-Legendre on [lo, hi].

    Panels have width at most ``width``; the last one is not shortened, the
    panel count is rounded up and all panels are equal.
    """
    if hi <= lo:
        return np.empty(0), np.empty(0)
    count = max(1, math.ceil((hi - lo) / width - 1e-12))
    h = (hi - lo) / count
    x, w = np.polynomial.legendre.leggauss(nodes)
    left = lo + h * np.arange(count)
    t = (left[:, None] + 0.5 * h * (x[None, :] + 1.0)).ravel()
    wt = np.broadcast_to(0.5 * h * w, (count, nodes)).ravel().copy()
    return t, wt


@dataclass(frozen=True)
class FilterParams:
    """Truncation and quadrature controls for the filter function.

    ``t_cut`` is measured in the scaled variable of omega_1 (time x energy);
    ``quad_nodes`` is the Gauss-Legendre order per panel of width 1/4.
    """

    a1: float | None = None
    n_terms: int = 10_000
    t_cut: float = 200.0
    quad_nodes: int = 8
    tail_tol: float = 1e-10

    def __post_init__(self):
        if self.a1 is None:
            object.__setattr__(self, "a1", _default_a1())
        if not (self.a1 > 0 and 2.0 / 7.0 < 2.0 * self.a1 < 1.0):
            raise ValueError(f"a1={self.a1} violates 2*a1 in (2/7, 1)")
        if self.n_terms < 2:
            raise ValueError("n_terms must be >= 2")
        if not self.t_cut > 0:
            raise ValueError("t_cut must be positive")
        if self.quad_nodes < 2:
            raise ValueError("quad_nodes must be >= 2")
        if not self.tail_tol > 0:
            raise ValueError("tail_tol must be positive")

    def to_dict(self) -> dict:
        return {
            "a1": self.a1,
            "n_terms": self.n_terms,
            "t_cut": self.t_cut,
            "quad_nodes": self.quad_nodes,
            "tail_tol": self.tail_tol,
        }


@functools.lru_cache(maxsize=1)
def _default_a1() -> float:
    return compute_a1()


def _logsinc_coefficients(order: int) -> np.ndarray:
    # log(sin x / x) = sum_k (-1)^k 2^{2k} B_{2k} / (2k (2k)!) x^{2k}
    b = bernoulli(2 * order)
    return np.array(
        [(-1) ** kk * 2.0 ** (2 * kk) * b[2 * kk] / (2 * kk * math.factorial(2 * kk)) for kk in range(1, order + 1)]
    )


def sinc(x):
    """sin(x)/x with the short series near the origin."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < SINC_SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x * x / 6.0, np.sin(safe) / safe)


class FilterFunction:
    """omega_gamma for a fixed gap parameter, with cached normalization.

    The instance is immutable once built: the normalization constant, the
    moment and the Fourier tables are computed on first use and then reused.
    """

    def __init__(self, params: FilterParams | None = None, gamma: float = 1.0):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        self.params = params if params is not None else FilterParams()
        self.gamma = float(gamma)
        n = np.arange(1, self.params.n_terms + 1)
        self._a = a_n(n, self.params.a1)
        # a_n is decreasing from n = 2 on; keep an index ordering by size
        self._order = np.argsort(-self._a, kind="stable")
        a_sorted = self._a[self._order]
        powers = a_sorted[None, :] ** (2 * np.arange(1, _LOGSINC_ORDER + 1))[:, None]
        # suffix sums: _power_tail[k, j] = sum_{i >= j} a_(i)^{2(k+1)}
        suffix = np.cumsum(powers[:, ::-1], axis=1)[:, ::-1]
        self._power_tail = np.concatenate([suffix, np.zeros((_LOGSINC_ORDER, 1))], axis=1)
        self._a_sorted = a_sorted
        self._logsinc = _logsinc_coefficients(_LOGSINC_ORDER)

    # -- the unnormalized product --------------------------------------------

    @property
    def support_edge(self) -> float:
        """Half-width of the Fourier support of omega_1 (truncated product)."""
        return 2.0 * float(np.sum(self._a))

    def product(self, t) -> np.ndarray:
        """prod_{n <= n_terms} sinc(a_n t)**2, evaluated without normalization."""
        t = np.abs(np.asarray(t, dtype=float))
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        out = np.empty_like(t)
        if t.size:
            tmax = float(t.max())
            thr = _LOGSINC_SERIES_MAX / tmax if tmax > 0 else np.inf
            n_exact = int(np.searchsorted(-self._a_sorted, -thr, side="left"))
            head = self._a_sorted[:n_exact]
            for sl in _chunks(t.size, max(1, 4_000_000 // max(n_exact, 1))):
                tt = t[sl]
                exact = np.prod(sinc(tt[:, None] * head[None, :]) ** 2, axis=1)
                t2 = tt * tt
                series = np.zeros_like(tt)
                tpow = np.ones_like(tt)
                for k in range(_LOGSINC_ORDER):
                    tpow = tpow * t2
                    series += self._logsinc[k] * self._power_tail[k, n_exact] * tpow
                out[sl] = exact * np.exp(2.0 * series)
        return out[0] if scalar else out

    def product_direct(self, t) -> np.ndarray:
        """The same product computed factor by factor (slow reference path)."""
        t = np.atleast_1d(np.abs(np.asarray(t, dtype=float)))
        out = np.empty_like(t)
        for i, tt in enumerate(t):
            out[i] = np.prod(sinc(self._a * tt) ** 2)
        return out

    def product_tail_bound(self, x: float) -> float:
        """Rigorous bound on int_x^inf prod(...) dt from sinc(y)^2 <= min(1, y^-2)."""
        x = float(x)
        if x <= 0:
            raise ValueError("x must be positive")
        m = np.arange(1, min(self.params.n_terms, 4096) + 1)
        log_prod = np.cumsum(-2.0 * np.log(self._a_sorted[: m.size] * x))
        log_bound = log_prod + math.log(x) - np.log(2 * m - 1.0)
        return float(np.exp(np.min(log_bound)))

    # -- normalization -------------------------------------------------------

    def _nodes(self, lo: float, hi: float, width: float = _PANEL_WIDTH, nodes: int | None = None):
        return gauss_legendre_panels(lo, hi, width, nodes or self.params.quad_nodes)

    @cached_property
    def _half_grid(self):
        t, w = self._nodes(0.0, self.params.t_cut)
        return t, w, self.product(t)

    @cached_property
    def _normalization(self) -> tuple[float, float]:
        t, w, p = self._half_grid
        q = 2.0 * float(np.dot(w, p))
        tail = 2.0 * self.product_tail_bound(self.params.t_cut)
        c = 1.0 / (q + tail)
        t2, w2 = self._nodes(0.0, self.params.t_cut, nodes=2 * self.params.quad_nodes)
        q2 = 2.0 * float(np.dot(w2, self.product(t2)))
        tol = c * tail + c * abs(q - q2)
        if c * tail > self.params.tail_tol:
            raise ValueError(
                f"tail mass {c * tail:.3e} beyond t_cut={self.params.t_cut} exceeds "
                f"tail_tol={self.params.tail_tol:.1e}; increase t_cut"
            )
        return c, tol

    @property
    def c(self) -> float:
        return self._normalization[0]

    def normalization_c(self) -> float:
        """Constant c with int omega_1 = 1 (quadrature on [-t_cut, t_cut] plus tail bound)."""
        return self._normalization[0]

    @property
    def normalization_tol(self) -> float:
        """Reported error of c-normalized integrals: tail mass plus quadrature-refinement change."""
        return self._normalization[1]

    def total_mass(self) -> float:
        """Quadrature of omega_gamma over the truncated domain [-t_cut/gamma, t_cut/gamma]."""
        t, w, p = self._half_grid
        return 2.0 * self.c * float(np.dot(w, p))

    def truncation_error(self, t) -> np.ndarray:
        """Upper bound on -log of the omitted factors prod_{n > n_terms} sinc(a_n t)^2.

        Uses ln sinc(x)^2 >= -x^2/3 - x^4/45 ... bounded by -(x^2/3)/(1 - x^2/10) for small x,
        with the tail sum of a_n^2 taken from an integral bound.
        """
        t = np.asarray(t, dtype=float)
        n = self.params.n_terms
        # sum_{m>n} 1/(m ln m)^2 <= int_n^inf dx / (x ln x)^2 <= 1/(n ln(n)^2)
        s2 = self.params.a1**2 / (n * math.log(n) ** 2)
        x2 = t * t * s2
        return x2 / 3.0 / np.maximum(1.0 - x2 / 10.0, 1e-300)

    # -- point values --------------------------------------------------------

    def omega1(self, t):
        """omega_1(t) = c * truncated product."""
        return self.c * self.product(t)

    def omega_gamma(self, t):
        """omega_gamma(t) = gamma * omega_1(gamma t)."""
        t = np.asarray(t, dtype=float)
        return self.gamma * self.omega1(self.gamma * t)

    def w1(self, x):
        """W_1(x) = int_x^inf omega_1; beyond t_cut only the rigorous tail bound is returned."""
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("W is defined for x >= 0")
        scalar = x.ndim == 0
        xs = np.atleast_1d(x)
        out = np.empty_like(xs)
        t_cut = self.params.t_cut
        tail = self.c * self.product_tail_bound(t_cut)
        for i, xx in enumerate(xs):
            if xx >= t_cut:
                out[i] = self.c * self.product_tail_bound(xx) if xx > 0 else 0.5
            else:
                t, w = self._nodes(xx, t_cut)
                out[i] = self.c * float(np.dot(w, self.product(t))) + tail
        return out[0] if scalar else out

    def w_gamma(self, x):
        """W_gamma(x) = W_1(gamma x), the omega_gamma mass to the right of x."""
        return self.w1(self.gamma * np.asarray(x, dtype=float))

    # -- Fourier side --------------------------------------------------------

    def fourier_omega1(self, kappa):
        """int omega_1(t) e^{i kappa t} dt by direct quadrature (real; omega_1 is even)."""
        kappa = np.asarray(kappa, dtype=float)
        scalar = kappa.ndim == 0
        ks = np.atleast_1d(kappa)
        out = np.empty(ks.shape, dtype=float)
        kmax = float(np.max(np.abs(ks))) if ks.size else 0.0
        width = min(_PANEL_WIDTH, 1.0 / kmax) if kmax > 0 else _PANEL_WIDTH
        if width < _PANEL_WIDTH:
            t, w = self._nodes(0.0, self.params.t_cut, width=width)
            p = self.product(t)
        else:
            t, w, p = self._half_grid
        wp = 2.0 * self.c * w * p
        for sl in _chunks(ks.size, max(1, 2_000_000 // max(t.size, 1))):
            out[sl] = np.cos(np.outer(ks[sl], t)) @ wp
        return out[0] if scalar else out

    def fourier_omega(self, k):
        """hat omega_gamma(k) = int omega_gamma(t) e^{ikt} dt = hat omega_1(k/gamma), by quadrature.

        Returned as complex for interface uniformity; the imaginary part is zero
        because the symmetric quadrature of an even density is used.
        """
        k = np.asarray(k, dtype=float)
        return (self.fourier_omega1(k / self.gamma)).astype(complex)

    @cached_property
    def _tables(self):
        edge = self.support_edge
        kappa = np.arange(0.0, edge + _TABLE_STEP, _TABLE_STEP)
        kappa = kappa[kappa <= edge]
        kappa = np.append(kappa, edge)
        t, w, p = self._half_grid
        wp = 2.0 * self.c * w * p
        arg = np.outer(kappa, t)
        fhat = np.cos(arg) @ wp
        # (1 - hat omega(kappa)) / kappa^2 without cancellation
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(kappa[:, None] > 0, np.sin(0.5 * arg) / kappa[:, None], 0.5 * t[None, :])
        rel = 2.0 * (s * s) @ wp
        # the mass defect beyond t_cut, modelled as sitting near t_cut: it adds
        # defect (1 - exp(-(kappa t_cut)^2 / 2)) / kappa^2, finite at kappa = 0 and
        # equal to defect / kappa^2 long before the support edge, where rel = 1/kappa^2
        defect = 1.0 - self.total_mass()
        tc2 = self.params.t_cut**2
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(kappa > 0, -np.expm1(-0.5 * tc2 * kappa**2) / np.maximum(kappa, 1e-300) ** 2, 0.5 * tc2)
        rel = rel + defect * extra
        return (
            make_interp_spline(kappa, fhat, k=5),
            make_interp_spline(kappa, rel, k=5),
        )

    @cached_property
    def second_moment1(self) -> float:
        """int omega_1(t) t^2 dt."""
        t, w, p = self._half_grid
        return 2.0 * self.c * float(np.dot(w, p * t * t))

    def fourier_weight(self, k) -> np.ndarray:
        """Fast hat omega_gamma(k) for operator use.

        Interpolates a quadrature table inside the Fourier support of the
        truncated product and returns exactly 0 outside it.
        """
        k = np.asarray(k, dtype=float)
        kappa = np.abs(k) / self.gamma
        fhat, _ = self._tables
        inside = kappa < self.support_edge
        out = np.zeros_like(kappa)
        if np.any(inside):
            out[inside] = fhat(kappa[inside])
        return out

    def fourier_weight_derivative(self, k) -> np.ndarray:
        """d/dk of :meth:`fourier_weight`."""
        k = np.asarray(k, dtype=float)
        kappa = np.abs(k) / self.gamma
        fhat, _ = self._tables
        inside = kappa < self.support_edge
        out = np.zeros_like(kappa)
        if np.any(inside):
            out[inside] = fhat(kappa[inside], 1) * np.sign(k[inside]) / self.gamma
        return out

    def fourier_divided_difference(self, x, y) -> np.ndarray:
        """(hat omega(x) - hat omega(y)) / (x - y), with the derivative on the diagonal."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        diff = x - y
        close = np.abs(diff) < _DIVDIFF_THRESHOLD * self.gamma
        out = np.empty(x.shape)
        far = ~close
        if np.any(far):
            out[far] = (self.fourier_weight(x[far]) - self.fourier_weight(y[far])) / diff[far]
        if np.any(close):
            out[close] = self.fourier_weight_derivative(0.5 * (x[close] + y[close]))
        return out

    def flow_kernel(self, delta_e):
        """K_gamma(dE) = int dt omega_gamma(t) int_0^t du e^{i u dE} = i (1 - hat omega_gamma(dE)) / dE.

        Purely imaginary and odd; equal to i/dE outside the Fourier support.
        """
        d = np.asarray(delta_e, dtype=float)
        scalar = d.ndim == 0
        d = np.atleast_1d(d)
        kappa = d / self.gamma
        ak = np.abs(kappa)
        _, rel = self._tables
        edge = self.support_edge
        val = np.empty_like(kappa)
        series = ak < KERNEL_SERIES_THRESHOLD
        inside = (~series) & (ak < edge)
        outside = ak >= edge
        # K = i kappa * rel(kappa) / gamma, rel = (1 - hat omega_1) / kappa^2
        val[series] = kappa[series] * float(rel(0.0)) / self.gamma
        if np.any(inside):
            val[inside] = kappa[inside] * rel(ak[inside]) / self.gamma
        val[outside] = 1.0 / d[outside]
        out = 1j * val
        return out[0] if scalar else out

    def flow_kernel_direct(self, delta_e, inner_nodes: int = 16):
        """Reference K_gamma by a genuine double quadrature over t and u (slow oracle)."""
        d = np.atleast_1d(np.asarray(delta_e, dtype=float))
        kmax = float(np.max(np.abs(d))) / self.gamma if d.size else 0.0
        width = min(_PANEL_WIDTH, 1.0 / kmax) if kmax > 0 else _PANEL_WIDTH
        t, w = self._nodes(0.0, self.params.t_cut, width=width)
        # omega_gamma(t) dt in original time units
        wp = self.c * w * self.product(t)
        t = t / self.gamma
        # inner integral over u in [0, t] on panels of width <= min(1/(4 gamma), 1/|dE|)
        # inner integral over u in [0, t_j], accumulated interval by interval between t nodes
        xg, wg = np.polynomial.legendre.leggauss(inner_nodes)
        edges = np.concatenate([[0.0], t])
        h = np.diff(edges)
        u = (edges[:-1, None] + 0.5 * h[:, None] * (xg[None, :] + 1.0))
        uw = 0.5 * h[:, None] * wg[None, :]
        out = np.empty(d.shape, dtype=complex)
        for i, de in enumerate(d):
            inner = np.cumsum(np.sum(uw * np.exp(1j * u * de), axis=1))
            # t < 0 contributes -conj of the t > 0 inner integral
            out[i] = np.dot(wp, inner - np.conj(inner))
        return out[0] if out.size == 1 and np.ndim(delta_e) == 0 else out

    def time_weights(self, delta_max: float):
        """Nodes t_j (original time, both signs) and weights w_j omega_gamma(t_j) for time-domain integrals.

        The panel width is narrowed so that e^{i t delta} is resolved for |delta| <= delta_max.
        """
        kmax = delta_max / self.gamma
        width = min(_PANEL_WIDTH, 1.0 / kmax) if kmax > 0 else _PANEL_WIDTH
        t, w = self._nodes(0.0, self.params.t_cut, width=width)
        wp = self.c * w * self.product(t)
        return np.concatenate([-t[::-1], t]) / self.gamma, np.concatenate([wp[::-1], wp])

    # -- decay envelopes -----------------------------------------------------

    @property
    def eta(self) -> float:
        return 2.0 * self.params.a1

    @property
    def c1(self) -> float:
        return 27.0 / 14.0 * self.c * math.e**4

    def omega_envelope(self, t):
        """c1 (t/ln^2 t) exp(-eta t/ln^2 t), valid for t > e."""
        t = np.asarray(t, dtype=float)
        r = t / np.log(t) ** 2
        return self.c1 * r * np.exp(-self.eta * r)

    def w_envelope(self, x):
        """c1 (x/ln^2 x)^2 exp(-eta x/ln^2 x) for x > e^9, else 1."""
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = x / np.log(x) ** 2
            big = self.c1 * r * r * np.exp(-self.eta * r)
        return np.where(x > math.e**9, big, 1.0)

    # -- tabulation ----------------------------------------------------------

    def write_time_table(self, path: str | Path, t_grid) -> None:
        t_grid = np.asarray(t_grid, dtype=float)
        om = self.omega_gamma(t_grid)
        wg = self.w_gamma(np.abs(t_grid))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "omega_gamma", "W_gamma"])
            for row in zip(t_grid, om, wg):
                writer.writerow([fmt17(v) for v in row])

    def write_fourier_table(self, path: str | Path, k_grid) -> None:
        k_grid = np.asarray(k_grid, dtype=float)
        fh_vals = self.fourier_omega(k_grid)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "re_fourier", "im_fourier"])
            for k, v in zip(k_grid, fh_vals):
                writer.writerow([fmt17(k), fmt17(v.real), fmt17(v.imag)])


def fmt17(v: float) -> str:
    return f"{float(v):.17g}"


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))
