"""Generalized Pareto distribution: CDF, likelihood, threshold selection,
maximum-likelihood fitting and Q-Q diagnostics for peaks-over-threshold data.

The location parameter is fixed at zero throughout; every function here
operates on excesses over a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, root

XI_EPS = 1e-9
XI_RANGE = (-0.5, 1.0)
MIN_EXCESSES = 5


class InsufficientTailError(ValueError):
    """Raised when too few exceedances remain to fit a tail model."""


class GpdFitError(RuntimeError):
    """Raised when the likelihood maximization fails; carries best-so-far params."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class GpdParams:
    sigma: float
    xi: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"GPD scale must be positive and finite, got {self.sigma!r}")
        if not math.isfinite(self.xi):
            raise ValueError(f"GPD shape must be finite, got {self.xi!r}")

    @property
    def upper_bound(self) -> float:
        """Right end of the support (inf unless xi < 0)."""
        if self.xi < -XI_EPS:
            return -self.sigma / self.xi
        return math.inf


@dataclass(frozen=True)
class ExceedanceSample:
    threshold_u: float
    excesses: np.ndarray = field(repr=False)
    source_count: int

    def __post_init__(self):
        exc = np.asarray(self.excesses, dtype=float)
        if exc.ndim != 1:
            raise ValueError("excesses must be one-dimensional")
        if np.any(exc < 0) or not np.all(np.isfinite(exc)):
            raise ValueError("excesses must be finite and nonnegative")
        exc.setflags(write=False)
        object.__setattr__(self, "excesses", exc)

    @property
    def n_excess(self) -> int:
        return int(self.excesses.size)


def _is_exponential(xi: float) -> bool:
    return abs(xi) < XI_EPS


def gpd_cdf(x, params: GpdParams):
    """Distribution function of the GPD at excess ``x`` (scalar or array).

    For ``xi < 0`` values at or beyond the support bound ``-sigma/xi`` map to
    exactly 1.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("gpd_cdf requires finite x")
    if np.any(arr < 0):
        raise ValueError("gpd_cdf is defined for x >= 0 only")
    sigma, xi = params.sigma, params.xi
    z = arr / sigma
    if _is_exponential(xi):
        out = -np.expm1(-z)
    else:
        t = xi * z
        with np.errstate(divide="ignore", invalid="ignore"):
            inside = t > -1.0
            out = np.where(inside, -np.expm1(-np.log1p(np.where(inside, t, 0.0)) / xi), 1.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def gpd_ppf(p, params: GpdParams):
    """Inverse CDF: the excess whose GPD probability is ``p``."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr < 0) | (arr >= 1)):
        raise ValueError("gpd_ppf requires 0 <= p < 1")
    sigma, xi = params.sigma, params.xi
    tail = -np.log1p(-arr)  # -log(1 - p)
    if _is_exponential(xi):
        out = sigma * tail
    else:
        out = sigma * np.expm1(xi * tail) / xi
    return float(out) if np.ndim(out) == 0 else out


def _log_likelihood(x: np.ndarray, sigma: float, xi: float) -> float:
    if sigma <= 0 or not math.isfinite(sigma):
        return -math.inf
    n = x.size
    if _is_exponential(xi):
        return -n * math.log(sigma) - float(x.sum()) / sigma
    t = xi * x / sigma
    if np.any(t <= -1.0):
        return -math.inf
    return -n * math.log(sigma) - (1.0 + 1.0 / xi) * float(np.log1p(t).sum())


def gpd_log_likelihood(excesses, params: GpdParams) -> float:
    """Sum of GPD log densities; ``-inf`` if any excess lies outside the support."""
    x = np.asarray(excesses, dtype=float)
    if x.size == 0:
        raise ValueError("log-likelihood of an empty sample is undefined")
    if np.any(x < 0):
        raise ValueError("excesses must be nonnegative")
    return _log_likelihood(x, params.sigma, params.xi)


def select_threshold(distances, eta: float = 0.2, min_excess: int = MIN_EXCESSES) -> ExceedanceSample:
    """Peaks-over-threshold split of ``distances``.

    Distances are sorted in descending order and the threshold is the entry
    at zero-based position ``ceil(eta * n)``, so roughly the top ``eta``
    fraction lies strictly above it. Ties with the threshold are not counted
    as exceedances.
    """
    d = np.asarray(distances, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("distances must be nonempty")
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    n = d.size
    k = math.ceil(eta * n - 1e-9)
    if k < min_excess:
        raise InsufficientTailError(
            f"eta*n = {eta * n:g} leaves fewer than {min_excess} exceedances (n={n})"
        )
    desc = np.sort(d)[::-1]
    u = float(desc[min(k, n - 1)])
    excesses = d[d > u] - u
    if excesses.size == 0 or excesses.size < min(min_excess, k):
        raise InsufficientTailError(
            f"only {excesses.size} distances exceed the threshold {u:g}"
        )
    return ExceedanceSample(threshold_u=u, excesses=np.sort(excesses), source_count=n)


def _golden_max(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200):
    """Maximize a unimodal function on [lo, hi] by golden-section search."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    e = a + inv_phi * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(max_iter):
        if abs(b - a) <= tol * (1.0 + abs(a) + abs(b)):
            break
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + inv_phi * (b - a)
            fe = f(e)
    return (c, fc) if fc >= fe else (e, fe)


def _profile_sigma(x: np.ndarray, xi: float):
    """Best scale for a fixed shape, searched over log(sigma)."""
    xmax = float(x.max())
    mean = float(x.mean())
    lo = 1e-12 * max(mean, 1e-300)
    if xi < 0:
        lo = max(lo, -xi * xmax * (1.0 + 1e-12))
    hi = max(50.0 * mean, 10.0 * xmax, 2.0 * lo)
    log_s, ll = _golden_max(lambda ls: _log_likelihood(x, math.exp(ls), xi), math.log(lo), math.log(hi))
    return math.exp(log_s), ll


def _score(x: np.ndarray, sigma: float, xi: float) -> np.ndarray:
    """Gradient of the log-likelihood in (sigma, xi)."""
    n = x.size
    t = x / sigma
    w = 1.0 + xi * t
    d_sigma = -n / sigma + (1.0 + xi) / sigma * float(np.sum(t / w))
    if abs(xi) < 1e-7:
        # second-order series of the shape derivative around xi = 0
        d_xi = float(np.sum(-(t - t * t / 2) - 2 * xi * (t ** 3 / 3 - t * t / 2)))
    else:
        d_xi = float(np.sum(np.log1p(xi * t))) / (xi * xi) - (1.0 + 1.0 / xi) * float(np.sum(t / w))
    return np.array([d_sigma, d_xi])


def _polish(x: np.ndarray, sigma: float, xi: float, ll: float, xi_range) -> tuple[float, float, float]:
    """Solve the score equations from a nearby start.

    Likelihood values resolve the optimum only to about sqrt(eps); the score
    pins it down to near machine precision. The start is kept unless the root
    is close, interior and no worse.
    """
    try:
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            res = root(
                lambda th: _score(x, th[0], th[1]) / x.size,
                np.array([sigma, xi]),
                method="hybr",
                options={"xtol": 1e-14},
            )
    except (FloatingPointError, ValueError, ZeroDivisionError):
        return sigma, xi, ll
    if not res.success or not np.all(np.isfinite(res.x)):
        return sigma, xi, ll
    s_new, xi_new = float(res.x[0]), float(res.x[1])
    if s_new <= 0 or not xi_range[0] < xi_new < xi_range[1]:
        return sigma, xi, ll
    if abs(s_new - sigma) > 1e-3 * sigma or abs(xi_new - xi) > 1e-3:
        return sigma, xi, ll
    ll_new = _log_likelihood(x, s_new, xi_new)
    if not ll_new >= ll - 1e-10 * max(1.0, abs(ll)):
        return sigma, xi, ll
    return s_new, xi_new, ll_new


def fit_gpd_mle(
    sample,
    xi_range: tuple[float, float] = XI_RANGE,
    grid_step: float = 0.05,
    max_iter: int = 2000,
) -> GpdParams:
    """Maximum-likelihood GPD fit to the excesses of ``sample``.

    A profile-likelihood grid over the shape (scale found per shape by
    golden-section search) seeds a bounded Nelder-Mead refinement, finished
    by a root solve of the score equations. The shape is constrained to
    ``xi_range``.
    """
    x = np.asarray(sample.excesses if isinstance(sample, ExceedanceSample) else sample, dtype=float)
    if x.size < MIN_EXCESSES:
        raise InsufficientTailError(f"need at least {MIN_EXCESSES} excesses, got {x.size}")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("excesses must be finite and nonnegative")
    if float(x.max()) <= 0.0:
        raise InsufficientTailError("all excesses are zero")

    xi_lo, xi_hi = xi_range
    n_grid = int(round((xi_hi - xi_lo) / grid_step)) + 1
    best = (-math.inf, None, None)
    for xi in np.linspace(xi_lo, xi_hi, n_grid):
        sigma, ll = _profile_sigma(x, float(xi))
        if ll > best[0]:
            best = (ll, sigma, float(xi))
    if best[1] is None:
        raise GpdFitError("no feasible starting point on the shape grid")
    ll0, sigma0, xi0 = best

    def neg_ll(theta):
        log_s, xi = theta
        if not xi_lo <= xi <= xi_hi:
            return math.inf
        return -_log_likelihood(x, math.exp(log_s), xi)

    res = minimize(
        neg_ll,
        x0=np.array([math.log(sigma0), xi0]),
        method="Nelder-Mead",
        bounds=[(None, None), (xi_lo, xi_hi)],
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": max_iter, "maxfev": 2 * max_iter},
    )
    candidates = [(ll0, sigma0, xi0)]
    if np.all(np.isfinite(res.x)) and math.isfinite(res.fun):
        candidates.append((-float(res.fun), math.exp(float(res.x[0])), float(res.x[1])))
    ll, sigma, xi = max(candidates, key=lambda c: c[0])
    # a polishing pass on sigma at the chosen shape
    sigma_p, ll_p = _profile_sigma(x, xi)
    if ll_p > ll:
        sigma, ll = sigma_p, ll_p
    sigma, xi, ll = _polish(x, sigma, xi, ll, xi_range)
    params = GpdParams(sigma=sigma, xi=xi)
    if not res.success and res.status not in (0, 2):
        raise GpdFitError(f"refinement did not converge: {res.message}", best=params)
    return params


def qq_points(sample, params: GpdParams) -> np.ndarray:
    """Q-Q pairs ``(theoretical, empirical)`` with plotting positions (i - 0.5)/n.

    Returns an array of shape (n, 2), sorted by empirical quantile.
    """
    x = np.sort(np.asarray(sample.excesses if isinstance(sample, ExceedanceSample) else sample, dtype=float))
    if x.size == 0:
        raise ValueError("sample must be nonempty")
    n = x.size
    probs = (np.arange(1, n + 1) - 0.5) / n
    theoretical = np.atleast_1d(gpd_ppf(probs, params))
    return np.column_stack([theoretical, x])


def qq_correlation(points: np.ndarray) -> float:
    """Pearson correlation between the two Q-Q coordinates."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        return 1.0
    return float(np.corrcoef(pts[:, 0], pts[:, 1])[0, 1])
