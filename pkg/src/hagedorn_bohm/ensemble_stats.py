"""Born sampling and the statistics measured on Bohmian ensembles.

All reductions over paths go through ``math.fsum`` or sorting so results do
not depend on how an ensemble was split across workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ContractViolation, EnvelopeError, QuadratureError
from .hagedorn import PacketParams, PacketTable, as_multi_index, envelope_constants, quadrature_grid
from .potential import taylor_remainder

Z95 = 1.959963984540054


# -- sampling -------------------------------------------------------------------------

def born_sample(p: PacketParams, k, N: int, seed: int | np.random.Generator = 0,
                safety: float = 1.1, batch: int = 4096) -> np.ndarray:
    """N i.i.d. positions from |phi_k|^2 (shape (N, d)).

    k = 0 uses the exact Gaussian with covariance (eps/2) Re(A A*); higher
    k uses rejection sampling under the fitted envelope with a Gaussian
    proposal.
    """
    k = as_multi_index(k, p.dim)
    if N < 0:
        raise ContractViolation("sample count must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = p.dim
    cov = 0.5 * p.eps * (p.A @ p.A.conj().T).real
    if sum(k) == 0:
        L = np.linalg.cholesky(cov)
        return p.a + rng.standard_normal((N, d)) @ L.T
    # work at eps = 1, a = eta = 0; positions rescale by sqrt(eps)
    ref = PacketParams(1.0, np.zeros(d), np.zeros(d), p.A, p.B)
    C, c = envelope_constants(p, k)
    n = sum(k)
    r_star = (-c + math.sqrt(c * c + 8 * n * c)) / (2 * c)
    M = safety * C ** 2 * (2 * math.pi / c) ** (d / 2) * (1 + r_star) ** (2 * n) * math.exp(-0.5 * c * r_star ** 2)
    if 1.0 / M < 1e-3:
        raise EnvelopeError(f"acceptance rate {1 / M:.1e} too low; refit the envelope")
    sd = 1.0 / math.sqrt(c)
    out = []
    have = 0
    while have < N:
        y = sd * rng.standard_normal((batch, d))
        u = rng.random(batch)
        r2 = np.sum(y * y, axis=-1)
        g = (2 * math.pi / c) ** (-d / 2) * np.exp(-0.5 * c * r2)
        target = np.abs(PacketTable(ref, y, n).value(k)) ** 2
        ratio = target / (M * g)
        if np.any(ratio > 1):
            raise EnvelopeError("density exceeds the rejection envelope; refit with a larger safety factor")
        keep = y[u < ratio]
        out.append(keep)
        have += len(keep)
    y = np.concatenate(out)[:N]
    return p.a + math.sqrt(p.eps) * y


# -- per-path reductions --------------------------------------------------------------

def max_deviation(ens, traj) -> np.ndarray:
    """max_t |Q(t) - a(t)| per path on the ensemble mesh; inf for aborted paths."""
    a = np.asarray(traj.position(ens.t)).reshape(len(ens.t), 1, -1)
    dev = np.linalg.norm(ens.Q - a, axis=-1)
    out = np.max(dev, axis=0)
    out[~ens.completed] = np.inf
    return out


def max_velocity_deviation(ens, traj) -> np.ndarray:
    """max_t |v(Q(t), t) - eta(t)| per path; inf for aborted paths."""
    eta = np.asarray(traj.momentum(ens.t)).reshape(len(ens.t), 1, -1)
    dev = np.linalg.norm(ens.v - eta, axis=-1)
    out = np.max(dev, axis=0)
    out[~ens.completed] = np.inf
    return out


def binomial_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval."""
    if n == 0:
        return 0.0, 1.0
    ph = successes / n
    den = 1 + z * z / n
    mid = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def deviation_stat(ens, traj, R: float) -> dict:
    """Empirical P(max_t |Q - a| <= R sqrt(eps)); aborted paths count as failures."""
    dev = max_deviation(ens, traj)
    n = len(dev)
    inside = int(np.count_nonzero(dev <= R * math.sqrt(ens.eps)))
    prob = inside / n
    lo, hi = binomial_interval(inside, n)
    return {"R": float(R), "prob": prob, "sigma": math.sqrt(prob * (1 - prob) / n),
            "ci_low": lo, "ci_high": hi, "successes": inside, "n": n}


def calibrate_radius(ens, traj, level: float = 0.95) -> float:
    """Smallest R with empirical coverage >= level."""
    scaled = np.sort(max_deviation(ens, traj) / math.sqrt(ens.eps))
    i = int(math.ceil(level * len(scaled))) - 1
    return float(scaled[max(i, 0)])


def _window_index(t, dt_win):
    spacing = t[1] - t[0]
    m = dt_win / spacing
    if abs(m - round(m)) > 1e-9:
        raise ContractViolation("window must be a multiple of the record spacing")
    return int(round(m))


def averaged_velocity_stat(ens, traj, dt_win: float) -> np.ndarray:
    """max over t in [dt, T - dt] of |Qbar' - abar'| with centred differences of width 2 dt."""
    T = ens.t[-1] - ens.t[0]
    if not 0 < dt_win <= T / 2 + 1e-12:
        raise ContractViolation("window must satisfy 0 < dt <= T/2")
    m = _window_index(ens.t, dt_win)
    a = np.asarray(traj.position(ens.t)).reshape(len(ens.t), 1, -1)
    vbar = (ens.Q[2 * m:] - ens.Q[:-2 * m]) / (2 * dt_win)
    ebar = (a[2 * m:] - a[:-2 * m]) / (2 * dt_win)
    dev = np.linalg.norm(vbar - ebar, axis=-1)
    out = np.max(dev, axis=0)
    out[~ens.completed] = np.inf
    return out


def node_proximity_stat(ens, quantiles=(0.01, 0.05, 0.5)) -> dict:
    """Quantiles of min_t eps^(d/4) |psi(Q, t)| over the ensemble."""
    vals = ens.min_amp
    out = {f"q{int(round(100 * q)):02d}": float(np.quantile(vals, q)) for q in quantiles}
    out["min"] = float(np.min(vals))
    out["aborted"] = int(np.count_nonzero(~ens.completed))
    return out


@dataclass
class EnsembleResult:
    eps: float
    max_dev: np.ndarray
    max_vel_dev: np.ndarray
    min_amp: np.ndarray
    aborted: int
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.max_dev) == len(self.max_vel_dev) == len(self.min_amp)):
            raise ContractViolation("per-path arrays differ in length")
        if not 0 <= self.aborted <= len(self.max_dev):
            raise ContractViolation("abort count inconsistent with ensemble size")

    @property
    def n(self) -> int:
        return len(self.max_dev)

    @property
    def completed(self) -> int:
        return self.n - self.aborted

    @classmethod
    def from_ensemble(cls, ens, traj, seed=None) -> "EnsembleResult":
        return cls(ens.eps, max_deviation(ens, traj), max_velocity_deviation(ens, traj), ens.min_amp.copy(),
                   int(np.count_nonzero(~ens.completed)), seed)

    def coverage(self, R: float) -> float:
        return float(np.count_nonzero(self.max_dev <= R * math.sqrt(self.eps))) / self.n

    def scaled_quantile(self, q: float) -> float:
        """Quantile of max deviation / sqrt(eps); aborted paths sort to +inf."""
        return float(np.quantile(self.max_dev / math.sqrt(self.eps), q, method="inverted_cdf"))


# -- flux bound -----------------------------------------------------------------------

def _unit_sphere(d: int, n: int):
    """Directions and weights for integrating over the unit sphere in R^d."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        phi = 2 * math.pi * np.arange(n) / n
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1), np.full(n, 2 * math.pi / n)
    mu, wmu = np.polynomial.legendre.leggauss(n)
    nphi = 2 * n
    phi = 2 * math.pi * np.arange(nphi) / nphi
    MU, PHI = np.meshgrid(mu, phi, indexing="ij")
    s = np.sqrt(1 - MU ** 2)
    dirs = np.stack([s * np.cos(PHI), s * np.sin(PHI), MU], axis=-1).reshape(-1, 3)
    w = (wmu[:, None] * np.full(nphi, 2 * math.pi / nphi)[None, :]).ravel()
    return dirs, w


def _time_nodes(T: float, panels: int, order: int = 4, t0: float = 0.0):
    g, w = np.polynomial.legendre.leggauss(order)
    edges = t0 + np.linspace(0.0, T, panels + 1)
    h = np.diff(edges)
    t = (edges[:-1, None] + 0.5 * h[:, None] * (g[None, :] + 1)).ravel()
    wt = (0.5 * h[:, None] * w[None, :]).ravel()
    return t, wt


def ball_tail(p: PacketParams, k, R: float, n_radial: int = 400) -> float:
    """P(|x - a| > R sqrt(eps)) under |phi_k|^2, by radial quadrature."""
    k = as_multi_index(k, p.dim)
    d = p.dim
    _, c = envelope_constants(p, k)
    n = sum(k)
    r_max = R + math.sqrt(2.0 / c) * (9.0 + math.sqrt(n + 1))
    ref = PacketParams(1.0, np.zeros(d), np.zeros(d), p.A, p.B)
    g, w = np.polynomial.legendre.leggauss(n_radial)
    r = R + 0.5 * (r_max - R) * (g + 1)
    wr = 0.5 * (r_max - R) * w
    dirs, wd = _unit_sphere(d, 48)
    y = r[:, None, None] * dirs[None, :, :]
    dens = np.abs(PacketTable(ref, y.reshape(-1, d), n).value(k)).reshape(len(r), len(wd)) ** 2
    return math.fsum((dens * (wr * r ** (d - 1))[:, None] * wd[None, :]).ravel())


def _flux_integral(b, traj, R, T, panels, n_ang):
    eps = b.eps
    d = b.dim
    t, wt = _time_nodes(T, panels)
    dirs, wd = _unit_sphere(d, n_ang)
    st = traj.state(t)
    a = np.asarray(st.a).reshape(len(t), d)
    eta = np.asarray(st.eta).reshape(len(t), d)
    rad = R * math.sqrt(eps)
    x = a[:, None, :] + rad * dirs[None, :, :]
    tt = np.repeat(t, len(wd))
    psi, grad = b.fields(x.reshape(-1, d), tt)
    psi = psi.reshape(len(t), len(wd))
    grad = grad.reshape(len(t), len(wd), d)
    j = eps * (psi.conj()[..., None] * grad).imag
    rel = j - (np.abs(psi) ** 2)[..., None] * eta[:, None, :]
    normal = np.abs(np.sum(rel * dirs[None, :, :], axis=-1))
    integrand = normal * rad ** (d - 1)
    return math.fsum((integrand * wt[:, None] * wd[None, :]).ravel())


def flux_bound(b, traj, R: float, T: float, rtol: float = 0.01, panels: int = 16,
               n_ang: int = 16, max_refine: int = 8) -> dict:
    """Initial-ball tail plus the relative flux through the moving sphere.

    The surface and time quadratures are refined by doubling until the flux
    term changes by less than ``rtol``.
    """
    if b.kind != "semiclassical":
        raise ContractViolation("flux bound needs the semiclassical backend")
    if R <= 0 or T <= 0:
        raise ContractViolation("R and T must be positive")
    p0 = traj.packet(traj.t_start, b.eps)
    tail = ball_tail(p0, b.k, R)
    prev = _flux_integral(b, traj, R, T, panels, n_ang)
    for _ in range(max_refine):
        panels *= 2
        n_ang = n_ang * 2 if b.dim > 1 else n_ang
        cur = _flux_integral(b, traj, R, T, panels, n_ang)
        scale = max(abs(cur), 1e-300)
        if abs(cur - prev) <= rtol * scale or abs(cur - prev) < 1e-14:
            return {"R": float(R), "tail": tail, "flux": cur, "bound": tail + cur,
                    "panels": panels, "n_ang": n_ang}
        prev = cur
    raise QuadratureError("flux quadrature did not converge")


def exit_stat(ens, traj, R: float) -> dict:
    """Empirical probability that a path is outside the moving ball at some mesh time."""
    s = deviation_stat(ens, traj, R)
    prob = 1.0 - s["prob"]
    return {"R": float(R), "prob": prob, "sigma": s["sigma"], "n": s["n"]}


# -- rates and norms ----------------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int


def rate_fit(values, eps_list) -> RateFit:
    """Least-squares slope of log(value) against log(eps) with a 95% t interval."""
    y = np.asarray(values, dtype=float)
    e = np.asarray(eps_list, dtype=float)
    if y.shape != e.shape or y.ndim != 1:
        raise ContractViolation("values and eps must be matching 1D sequences")
    if len(y) < 4:
        raise ContractViolation("rate fit needs at least 4 points")
    if np.any(~np.isfinite(y)) or np.any(y <= 0) or np.any(e <= 0):
        raise ContractViolation("rate fit needs positive finite values")
    X = np.log(e)
    Y = np.log(y)
    res = stats.linregress(X, Y)
    half = stats.t.ppf(0.975, len(y) - 2) * res.stderr
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr),
                   float(res.slope - half), float(res.slope + half), len(y))


def remainder_norm(p: PacketParams, V, m: int, k=0, spacing: float = 0.25, reach: float = 8.0) -> float:
    """|| V_m(., a) phi_k ||_2 by quadrature on a packet-adapted grid."""
    k = as_multi_index(k, p.dim)
    x, w = quadrature_grid(p, k, spacing, reach)
    table = PacketTable(p, x, sum(k))
    phi = table.value(k)
    norm = math.fsum(np.abs(phi) ** 2 * w)
    if abs(norm - 1) > 1e-6:
        raise QuadratureError(f"norm deficit {abs(norm - 1):.2e}; refine the quadrature grid")
    rem = taylor_remainder(V, x, p.a, m)
    return math.sqrt(math.fsum(np.abs(rem * phi) ** 2 * w))


# -- goodness of fit ------------------------------------------------------------------

def chi2_against_cdf(samples, cdf_x, cdf_vals, n_bins: int = 50) -> dict:
    """Pearson chi-square of 1D samples against a tabulated CDF, equal-probability bins."""
    samples = np.asarray(samples, dtype=float).ravel()
    cdf_vals = np.asarray(cdf_vals, dtype=float)
    cdf_vals = cdf_vals / cdf_vals[-1]
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    edges = np.interp(qs, cdf_vals, cdf_x)
    probs = np.diff(np.concatenate([[0.0], np.interp(edges, cdf_x, cdf_vals), [1.0]]))
    counts = np.bincount(np.searchsorted(edges, samples), minlength=n_bins)
    expected = probs * len(samples)
    chi2 = float(math.fsum((counts - expected) ** 2 / expected))
    dof = n_bins - 1
    return {"chi2": chi2, "dof": dof, "p_value": float(stats.chi2.sf(chi2, dof))}


def density_cdf(x, density):
    """Cumulative trapezoid of a sampled 1D density (x increasing)."""
    x = np.asarray(x, dtype=float)
    density = np.asarray(density, dtype=float)
    inc = 0.5 * (density[1:] + density[:-1]) * np.diff(x)
    return x, np.concatenate([[0.0], np.cumsum(inc)])


def grid_cdf(w, refine: int = 8):
    """CDF of |psi|^2 for a 1D grid wave, interpolated onto a finer mesh."""
    if w.grid.dim != 1:
        raise ContractViolation("grid CDF is one-dimensional")
    (ax,) = w.grid.axes()
    dx = float(w.grid.dx[0])
    fine = np.arange(ax[0] + 4 * dx, ax[-1] - 4 * dx, dx / refine)
    dens = np.abs(w.local(fine[:, None])[0]) ** 2
    return density_cdf(fine, dens)
