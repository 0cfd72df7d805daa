"""Smooth potentials with closed-form derivatives up to fourth order.

Every family returns the full (symmetric) derivative tensor D^n V(x) of shape
``x.shape[:-1] + (d,) * n``.  Taylor remainders and the bounded-derivative
check are built on top of those tensors.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation

MAX_ORDER = 4
FAMILIES = ("free", "harmonic", "cosine", "gaussian_well")
BOUNDED_FAMILIES = ("free", "cosine", "gaussian_well")
POLYNOMIAL_DEGREE = {"free": 0, "harmonic": 2}

_DEFAULT_PARAMS = {
    "free": (),
    "harmonic": (1.0,),
    "cosine": (1.0, 1.0),
    "gaussian_well": (1.0, 1.0),
}


def _hermite_e(n, u):
    # probabilists' Hermite polynomials He_0..He_4
    if n == 0:
        return np.ones_like(u)
    if n == 1:
        return u
    if n == 2:
        return u * u - 1.0
    if n == 3:
        return u * (u * u - 3.0)
    return (u * u - 6.0) * u * u + 3.0


def _gauss_derivative_sup(n):
    """sup_u |d^n/du^n exp(-u^2/2)| for n <= 4."""
    if n == 1:
        return math.exp(-0.5)
    if n == 3:
        u = math.sqrt(3.0 - math.sqrt(6.0))
        return abs(u * (u * u - 3.0)) * math.exp(-0.5 * u * u)
    return (1.0, None, 1.0, None, 3.0)[n]


def _index_counts(index, d):
    counts = [0] * d
    for j in index:
        counts[j] += 1
    return counts


@dataclass(frozen=True)
class PotentialModel:
    """A potential V on R^d.

    ``family`` is one of :data:`FAMILIES`; sums are expressed through
    ``components`` (family is then ``"sum"``).  Parameters:

    * harmonic: ``(w,)`` or ``(w_1, ..., w_d)`` with V = sum_j w_j x_j^2 / 2
    * cosine: ``(c, kappa)`` with V = c * sum_j cos(kappa x_j)
    * gaussian_well: ``(c, s)`` with V = -c * exp(-|x|^2 / (2 s^2))
    """

    family: str
    dim: int
    params: tuple = ()
    components: tuple = field(default=())

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ContractViolation(f"dimension must be 1, 2 or 3, got {self.dim}")
        if self.family == "sum":
            if not self.components:
                raise ContractViolation("sum potential needs components")
            for c in self.components:
                if c.dim != self.dim:
                    raise ContractViolation("component dimension mismatch")
            return
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown potential family {self.family!r}")
        params = tuple(float(p) for p in self.params) or _DEFAULT_PARAMS[self.family]
        if self.family == "harmonic" and len(params) not in (1, self.dim):
            raise ContractViolation("harmonic takes 1 or d frequencies squared")
        if self.family in ("cosine", "gaussian_well") and len(params) != 2:
            raise ContractViolation(f"{self.family} takes 2 parameters")
        if self.family == "gaussian_well" and params[1] <= 0:
            raise ContractViolation("gaussian_well width must be positive")
        object.__setattr__(self, "params", params)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def create(cls, spec: str, dim: int, params: Sequence = ()) -> "PotentialModel":
        """Build from an id like ``"cosine"`` or ``"cosine+gaussian_well"``.

        For sums ``params`` is a sequence of per-component parameter tuples.
        """
        names = [s.strip() for s in spec.split("+")]
        if len(names) == 1:
            return cls(names[0], dim, tuple(params))
        params = list(params) or [()] * len(names)
        if len(params) != len(names):
            raise ContractViolation("one parameter group per summand required")
        comps = tuple(cls(n, dim, tuple(p)) for n, p in zip(names, params))
        return cls("sum", dim, (), comps)

    @property
    def bounded(self) -> bool:
        if self.family == "sum":
            return all(c.bounded for c in self.components)
        return self.family in BOUNDED_FAMILIES

    @property
    def degree(self) -> int | None:
        """Polynomial degree for polynomial families, else None."""
        if self.family == "sum":
            degs = [c.degree for c in self.components]
            return None if any(v is None for v in degs) else max(degs)
        return POLYNOMIAL_DEGREE.get(self.family)

    @property
    def C_V(self) -> float | None:
        """Declared bound on max_{|alpha|<=4} sup |D^alpha V|; None if unbounded."""
        if self.family == "sum":
            vals = [c.C_V for c in self.components]
            return None if any(v is None for v in vals) else float(sum(vals))
        if self.family == "free":
            return 0.0
        if self.family == "harmonic":
            return None
        c, s = self.params
        if self.family == "cosine":
            return abs(c) * max(1.0, abs(s)) ** MAX_ORDER
        best = 0.0
        for n in range(MAX_ORDER + 1):
            for alpha in itertools.product(range(n + 1), repeat=self.dim):
                if sum(alpha) != n:
                    continue
                val = math.prod(_gauss_derivative_sup(a) for a in alpha) / s**n
                best = max(best, val)
        return abs(c) * best

    # -- evaluation -------------------------------------------------------------
    def __call__(self, x):
        return self.derivative(x, 0)

    def derivative(self, x, order: int):
        """Tensor D^order V at ``x`` (shape ``(..., d)``)."""
        if not isinstance(order, (int, np.integer)) or not 0 <= order <= MAX_ORDER:
            raise ContractViolation(f"derivative order must be in 0..{MAX_ORDER}, got {order}")
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ContractViolation(f"positions must have trailing dimension {self.dim}")
        if not np.all(np.isfinite(x)):
            raise ContractViolation("non-finite position")
        d = self.dim
        out_shape = x.shape[:-1] + (d,) * order
        if self.family == "sum":
            return sum(c.derivative(x, order) for c in self.components)
        if self.family == "free":
            return np.zeros(out_shape)
        if self.family == "harmonic":
            w = np.broadcast_to(np.asarray(self.params), (d,))
            if order == 0:
                return 0.5 * np.sum(w * x * x, axis=-1)
            if order == 1:
                return w * x
            if order == 2:
                return np.broadcast_to(np.diag(w), out_shape).copy()
            return np.zeros(out_shape)
        if self.family == "cosine":
            c, kappa = self.params
            vals = c * kappa**order * np.cos(kappa * x + order * math.pi / 2)
            if order == 0:
                return np.sum(vals, axis=-1)
            out = np.zeros(out_shape)
            for j in range(d):
                out[(Ellipsis,) + (j,) * order] = vals[..., j]
            return out
        # gaussian_well
        c, s = self.params
        u = x / s
        g = np.exp(-0.5 * u * u)
        # one-dimensional factors d^n/dx^n exp(-x^2/2s^2), n = 0..order
        fac = [((-1.0) ** n / s**n) * _hermite_e(n, u) * g for n in range(order + 1)]
        if order == 0:
            return -c * np.prod(g, axis=-1)
        out = np.empty(out_shape)
        cache = {}
        for index in itertools.product(range(d), repeat=order):
            counts = tuple(_index_counts(index, d))
            if counts not in cache:
                prod = np.ones(x.shape[:-1])
                for j, n in enumerate(counts):
                    prod = prod * fac[n][..., j]
                cache[counts] = -c * prod
            out[(Ellipsis,) + index] = cache[counts]
        return out


def eval_derivatives(V: PotentialModel, x, order: int):
    """All D^alpha V(x) with |alpha| = order, as a symmetric tensor."""
    return V.derivative(x, order)


def _contract(tensor, h, times):
    # contract the trailing ``times`` axes of ``tensor`` with the vector h
    for _ in range(times):
        shape = h.shape[:-1] + (1,) * (tensor.ndim - h.ndim) + h.shape[-1:]
        tensor = np.sum(tensor * h.reshape(shape), axis=-1)
    return tensor


def _select(tensor, directions, batch_ndim):
    # pick the leading tensor axes (after the batch axes) along fixed directions
    for j in directions:
        tensor = tensor[(slice(None),) * batch_ndim + (j,)]
    return tensor


def taylor_remainder(V: PotentialModel, x, a, m: int, alpha: Sequence[int] | None = None):
    """m-th Taylor remainder V_m(x, a) = V(x) - sum_{|b|<m} D^b V(a) (x-a)^b / b!.

    With ``alpha`` given, returns D^alpha_x V_m(x, a), computed through the
    identity D^alpha V_m = (D^alpha V)_{m-|alpha|}.
    """
    if m < 1:
        raise ContractViolation("remainder order m must be >= 1")
    alpha = tuple(alpha) if alpha is not None else (0,) * V.dim
    if len(alpha) != V.dim or min(alpha) < 0:
        raise ContractViolation("alpha must be a multi-index of length d")
    r = sum(alpha)
    if m - 1 > MAX_ORDER or r > MAX_ORDER:
        raise ContractViolation(f"orders beyond {MAX_ORDER} are not available")
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    x, a = np.broadcast_arrays(x, a)
    h = x - a
    directions = [j for j, n in enumerate(alpha) for _ in range(n)]
    nb = x.ndim - 1
    value = _select(V.derivative(x, r), directions, nb)
    if V.degree is not None and m > V.degree:
        # the Taylor polynomial reproduces a polynomial exactly
        return np.zeros_like(value)
    for n in range(r, m):
        term = _select(V.derivative(a, n), directions, nb)
        term = _contract(term, h, n - r)
        value = value - term / math.factorial(n - r)
    return value


@dataclass(frozen=True)
class GVReport:
    max_abs: tuple
    C_V: float
    passed: bool
    bounded_family: bool


def check_GV(V: PotentialModel, box, grid: int = 101, C_V: float | None = None,
             chunk: int = 20000) -> GVReport:
    """Sampled sup-norm estimates of D^alpha V, |alpha| <= 4, on a box.

    ``box`` is ``(lo, hi)`` (scalars or per-axis).  Unbounded families are
    reported with a warning rather than rejected.
    """
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (V.dim,)) for b in box)
    if np.any(hi < lo) or grid < 1:
        raise ContractViolation("empty sampling box")
    axes = [np.linspace(l, u, grid) for l, u in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, V.dim)
    maxima = [0.0] * (MAX_ORDER + 1)
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        for n in range(MAX_ORDER + 1):
            maxima[n] = max(maxima[n], float(np.max(np.abs(V.derivative(block, n)))))
    bound = C_V if C_V is not None else (V.C_V if V.C_V is not None else 1.0)
    passed = max(maxima) <= bound * (1 + 1e-12)
    if not passed:
        warnings.warn(f"potential {V.family!r} exceeds C_V={bound} on the sampled box "
                      f"(max |D^a V| = {max(maxima):.3g}); admitted anyway", stacklevel=2)
    return GVReport(tuple(maxima), bound, passed, V.bounded)
