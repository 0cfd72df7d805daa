"""Hagedorn wave packets: construction, pointwise evaluation, moments.

Conventions (position x, momentum p = -i eps grad):

    phi_0(x) = (pi eps)^(-d/4) det(A)^(-1/2)
               exp(-<x-a, B A^-1 (x-a)> / (2 eps) + i <eta, x-a> / eps)

and phi_k = (k!)^(-1/2) (raising)^k phi_0.  Packets are evaluated with the
three-term ladder

    sqrt(k_j + 1) phi_{k+e_j} = [sqrt(2/eps) A^-1 (x-a) phi_k
                                 - A^-1 conj(A) (sqrt(k_l) phi_{k-e_l})_l]_j

and derivatives with (p - eta) phi_k = i sqrt(eps/2) (B r_k - conj(B) l_k),
where r_k = (sqrt(k_j+1) phi_{k+e_j})_j and l_k = (sqrt(k_j) phi_{k-e_j})_j.

Values are carried internally multiplied by eps^(d/4) so that they stay O(1)
for small eps.  Every routine accepts batched parameters: ``a`` of shape
``(..., d)`` and ``A`` of shape ``(..., d, d)`` broadcast against positions.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, InadmissibleError, QuadratureError

K_MAX = 6
ADMISSIBLE_TOL = 1e-8


def validate_admissible(A, B):
    """Residuals (||A^T B - B^T A||_F, ||A^* B + B^* A - 2 I||_F)."""
    A = np.asarray(A, dtype=complex)
    B = np.asarray(B, dtype=complex)
    if A.shape != B.shape or A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ContractViolation(f"need square matrices of equal shape, got {A.shape} and {B.shape}")
    At = np.swapaxes(A, -1, -2)
    Bt = np.swapaxes(B, -1, -2)
    eye = np.eye(A.shape[-1])
    r_sym = np.linalg.norm(At @ B - Bt @ A, axis=(-2, -1))
    r_norm = np.linalg.norm(At.conj() @ B + Bt.conj() @ A - 2 * eye, axis=(-2, -1))
    if r_sym.ndim == 0:
        return float(r_sym), float(r_norm)
    return r_sym, r_norm


def multi_indices(dim: int, level: int) -> list[tuple[int, ...]]:
    """All k in N^dim with |k| == level, in lexicographically descending order."""
    out = [k for k in itertools.product(range(level, -1, -1), repeat=dim) if sum(k) == level]
    return out


@functools.lru_cache(maxsize=None)
def index_set(dim: int, kmax: int) -> tuple[tuple[int, ...], ...]:
    return tuple(k for n in range(kmax + 1) for k in multi_indices(dim, n))


def as_multi_index(k, dim: int) -> tuple[int, ...]:
    if np.isscalar(k):
        # a bare 0 is the ground state in any dimension
        k = (int(k),) if dim == 1 else ((0,) * dim if k == 0 else None)
    if k is None or len(k) != dim or min(k) < 0:
        raise ContractViolation(f"multi-index must be {dim} nonnegative integers")
    return tuple(int(v) for v in k)


@dataclass(frozen=True)
class PacketParams:
    """State of a Hagedorn packet family.

    ``logdet`` is the branch of log det A used for det(A)^(-1/2); ``None``
    selects the principal branch.  ``S`` is the action entering the phase
    exp(i S / eps) of the phased packet.
    """

    eps: float
    a: np.ndarray
    eta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    S: float | np.ndarray = 0.0
    logdet: complex | np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.asarray(self.eps) > 0):
            raise ContractViolation("eps must be positive")
        a = np.asarray(self.a, dtype=float)
        a = a.reshape(a.shape or (1,))
        eta = np.asarray(self.eta, dtype=float).reshape(a.shape)
        d = a.shape[-1]
        A = np.asarray(self.A, dtype=complex)
        B = np.asarray(self.B, dtype=complex)
        if A.ndim < 2:
            A = A.reshape(a.shape[:-1] + (d, d))
            B = B.reshape(a.shape[:-1] + (d, d))
        if A.shape[-2:] != (d, d) or B.shape != A.shape:
            raise ContractViolation("A, B must be d x d")
        if d not in (1, 2, 3):
            raise ContractViolation("dimension must be 1, 2 or 3")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def dim(self) -> int:
        return self.a.shape[-1]

    @classmethod
    def standard(cls, eps, a, eta, dim=None, S=0.0) -> "PacketParams":
        """Coherent packet with A = B = identity."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        d = dim or a.shape[-1]
        a = np.broadcast_to(a, (d,)).copy()
        eye = np.eye(d, dtype=complex)
        return cls(eps, a, np.broadcast_to(np.asarray(eta, float), (d,)).copy(), eye, eye.copy(), S)

    def residuals(self):
        return validate_admissible(self.A, self.B)

    def check(self, tol: float = ADMISSIBLE_TOL):
        r_sym, r_norm = self.residuals()
        if np.max(r_sym) >= tol or np.max(r_norm) >= tol:
            raise InadmissibleError(f"(A, B) not admissible: residuals {np.max(r_sym):.2e}, {np.max(r_norm):.2e}")
        cond = np.linalg.cond(self.A)
        if not np.all(np.isfinite(cond)) or np.max(cond) > 1e12:
            raise InadmissibleError("A is singular")

    def to_record(self, k=None) -> dict:
        """Serializable form: (eps, a, eta, Re/Im A and B row-major, S, k)."""
        rec = {
            "eps": float(self.eps),
            "a": self.a.tolist(),
            "eta": self.eta.tolist(),
            "A_re": self.A.real.ravel().tolist(),
            "A_im": self.A.imag.ravel().tolist(),
            "B_re": self.B.real.ravel().tolist(),
            "B_im": self.B.imag.ravel().tolist(),
            "S": float(self.S),
        }
        if k is not None:
            rec["k"] = list(as_multi_index(k, self.dim))
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PacketParams":
        d = len(rec["a"])
        A = (np.asarray(rec["A_re"]) + 1j * np.asarray(rec["A_im"])).reshape(d, d)
        B = (np.asarray(rec["B_re"]) + 1j * np.asarray(rec["B_im"])).reshape(d, d)
        return cls(rec["eps"], rec["a"], rec["eta"], A, B, rec.get("S", 0.0))


def _ladder(phi0, u, mix, indices, position, d):
    # three-term recurrence; linear in phi0, so phi0 = 1 yields the polynomial factors
    shape = np.broadcast_shapes(np.shape(phi0), u.shape[:-1])
    vals = np.empty((len(indices),) + shape, dtype=complex)
    vals[0] = phi0
    for n, k in enumerate(indices[1:], start=1):
        j = next(i for i, v in enumerate(k) if v > 0)
        low = list(k)
        low[j] -= 1
        low = tuple(low)
        acc = u[..., j] * vals[position[low]]
        for l in range(d):
            if low[l] > 0:
                lower = list(low)
                lower[l] -= 1
                acc = acc - mix[..., j, l] * math.sqrt(low[l]) * vals[position[tuple(lower)]]
        vals[n] = acc / math.sqrt(low[j] + 1)
    return vals


class PacketTable:
    """phi_k' for all |k'| <= kmax at a batch of positions.

    ``scaled[i]`` holds eps^(d/4) phi_{k_i}(x) with k_i = ``indices[i]``.
    """

    def __init__(self, p: PacketParams, x, kmax: int, phased: bool = False,
                 adm_tol: float | None = ADMISSIBLE_TOL):
        # adm_tol=None skips the check for callers that already monitor (A, B)
        if adm_tol is not None:
            p.check(adm_tol)
        x = np.asarray(x, dtype=float)
        d = p.dim
        if x.shape[-1:] != (d,):
            raise ContractViolation(f"positions must have trailing dimension {d}")
        self.params = p
        self.dim = d
        self.kmax = kmax
        self.indices = index_set(d, kmax)
        self.position = {k: i for i, k in enumerate(self.indices)}
        eps = np.asarray(p.eps, dtype=float)
        self._eps = eps
        h = x - p.a
        Ainv = np.linalg.inv(p.A)
        BAinv = p.B @ Ainv
        quad = np.einsum("...i,...ij,...j->...", h, BAinv, h)
        lin = np.einsum("...i,...i->...", p.eta, h)
        if p.logdet is None:
            logdet = np.log(np.linalg.det(p.A))
        else:
            logdet = np.asarray(p.logdet, dtype=complex)
        expo = -quad / (2 * eps) + 1j * lin / eps - 0.5 * logdet
        if phased:
            expo = expo + 1j * np.asarray(p.S) / eps
        phi0 = math.pi ** (-d / 4) * np.exp(expo)
        u = np.sqrt(2 / eps)[..., None] * np.einsum("...ij,...j->...i", Ainv, h)
        mix = Ainv @ p.A.conj()
        self.scaled = _ladder(phi0, u, mix, self.indices, self.position, d)
        self._scale = eps ** (-d / 4)

    def scaled_value(self, k) -> np.ndarray:
        return self.scaled[self.position[as_multi_index(k, self.dim)]]

    def value(self, k) -> np.ndarray:
        return self._scale * self.scaled_value(k)

    def _neighbours(self, k):
        # r_k and l_k ladder vectors, scaled, stacked on the last axis
        d = self.dim
        r, l = [], []
        for j in range(d):
            up = list(k)
            up[j] += 1
            r.append(math.sqrt(k[j] + 1) * self.scaled[self.position[tuple(up)]])
            if k[j] > 0:
                down = list(k)
                down[j] -= 1
                l.append(math.sqrt(k[j]) * self.scaled[self.position[tuple(down)]])
            else:
                l.append(np.zeros_like(self.scaled[0]))
        return np.stack(r, axis=-1), np.stack(l, axis=-1)

    def scaled_gradient(self, k) -> np.ndarray:
        """eps^(d/4) grad phi_k; needs kmax >= |k| + 1."""
        k = as_multi_index(k, self.dim)
        if sum(k) + 1 > self.kmax:
            raise ContractViolation("table too shallow for gradient")
        p = self.params
        eps = self._eps[..., None]
        r, l = self._neighbours(k)
        lift = np.einsum("...ij,...j->...i", p.B, r) - np.einsum("...ij,...j->...i", p.B.conj(), l)
        return (1j / eps) * p.eta * self.scaled_value(k)[..., None] - lift / np.sqrt(2 * eps)

    def gradient(self, k) -> np.ndarray:
        return self._scale[..., None] * self.scaled_gradient(k)

    def scaled_hessian(self, k) -> np.ndarray:
        """eps^(d/4) D^2 phi_k (last two axes); needs kmax >= |k| + 2."""
        k = as_multi_index(k, self.dim)
        if sum(k) + 2 > self.kmax:
            raise ContractViolation("table too shallow for Hessian")
        p = self.params
        d = self.dim
        eps = self._eps[..., None, None]
        g = self.scaled_gradient(k)
        gr, gl = [], []
        for j in range(d):
            up = list(k)
            up[j] += 1
            gr.append(math.sqrt(k[j] + 1) * self.scaled_gradient(tuple(up)))
            if k[j] > 0:
                down = list(k)
                down[j] -= 1
                gl.append(math.sqrt(k[j]) * self.scaled_gradient(tuple(down)))
            else:
                gl.append(np.zeros_like(g))
        # gr[m][..., l] = sqrt(k_m+1) d_l phi_{k+e_m}
        Gr = np.stack(gr, axis=-2)
        Gl = np.stack(gl, axis=-2)
        lift = np.einsum("...im,...ml->...il", p.B, Gr) - np.einsum("...im,...ml->...il", p.B.conj(), Gl)
        return (1j / eps) * p.eta[..., :, None] * g[..., None, :] - lift / np.sqrt(2 * eps)


def _table(p, x, depth, phased, adm_tol=ADMISSIBLE_TOL):
    return PacketTable(p, x, depth, phased=phased, adm_tol=adm_tol)


def _check_k(k, dim, kmax):
    k = as_multi_index(k, dim)
    if sum(k) > kmax:
        raise ContractViolation(f"|k| = {sum(k)} exceeds k_max = {kmax}")
    return k


def eval_ground(p: PacketParams, x, phased: bool = False):
    """phi_0(x); times exp(i S / eps) when ``phased``."""
    return _table(p, x, 0, phased).value((0,) * p.dim)


def eval_packet(p: PacketParams, k, x, phased: bool = False, kmax: int = K_MAX):
    k = _check_k(k, p.dim, kmax)
    return _table(p, x, sum(k), phased).value(k)


def eval_gradient(p: PacketParams, k, x, phased: bool = False, kmax: int = K_MAX):
    k = _check_k(k, p.dim, kmax)
    return _table(p, x, sum(k) + 1, phased).gradient(k)


def eval_hessian(p: PacketParams, k, x, phased: bool = False, kmax: int = K_MAX):
    k = _check_k(k, p.dim, kmax)
    t = _table(p, x, sum(k) + 2, phased)
    return t._scale[..., None, None] * t.scaled_hessian(k)


# -- envelope -------------------------------------------------------------------

def _envelope_points(dim, c, n):
    """Reference points in y = (x - a) / sqrt(eps): a dense core plus log-spaced rays far out."""
    half = math.sqrt(2.0 / c) * (6.0 + math.sqrt(n))
    pts = {1: 4001, 2: 301, 3: 61}[dim]
    ax = np.linspace(-half, half, pts)
    core = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    radii = np.geomspace(half, 1e4, 200)
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif dim == 2:
        phi = np.linspace(0, 2 * math.pi, 256, endpoint=False)
        dirs = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    else:
        z = np.random.default_rng(0).normal(size=(600, 3))
        dirs = np.concatenate([z / np.linalg.norm(z, axis=-1, keepdims=True), np.eye(3), -np.eye(3)])
    rays = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, dim)
    return np.concatenate([core, rays])


@functools.lru_cache(maxsize=256)
def _fit_envelope(k: tuple, A_bytes: bytes, B_bytes: bytes, dim: int):
    A = np.frombuffer(A_bytes, dtype=complex).reshape(dim, dim)
    B = np.frombuffer(B_bytes, dtype=complex).reshape(dim, dim)
    AAs = (A @ A.conj().T).real
    c = 1.0 / float(np.max(np.linalg.eigvalsh(AAs)))
    n = sum(k)
    y = _envelope_points(dim, c, n)
    r = np.linalg.norm(y, axis=-1)
    # |phi_k| = |P_k(y)| |phi_0(y)| at eps = 1, a = eta = 0; the Gaussian ratio
    # |phi_0| exp(c r^2 / 2) is formed in log space so the far rays do not underflow
    Ainv = np.linalg.inv(A)
    BAinv = (B @ Ainv).real
    excess = BAinv - c * np.eye(dim)
    logg = -0.5 * np.einsum("mi,ij,mj->m", y, excess, y)
    g0 = math.pi ** (-dim / 4) * abs(np.linalg.det(A)) ** -0.5
    u = math.sqrt(2.0) * y @ Ainv.T
    indices = index_set(dim, n)
    position = {kk: i for i, kk in enumerate(indices)}
    poly = np.abs(_ladder(np.ones(len(y)), u, Ainv @ A.conj(), indices, position, dim)[position[k]])
    ratio = g0 * poly * np.exp(logg - n * np.log1p(r))
    # the sup may sit at r -> infinity; the far rays reach it to within n / r_max
    return float(np.max(ratio)) * (1 + 1e-12 + 2e-4 * n), c


def envelope_constants(p: PacketParams, k):
    """Fitted (C_k, c_k) of the envelope for packet shape (k, A)."""
    k = as_multi_index(k, p.dim)
    A = np.ascontiguousarray(p.A, dtype=complex)
    B = np.ascontiguousarray(p.B, dtype=complex)
    return _fit_envelope(k, A.tobytes(), B.tobytes(), p.dim)


def envelope(p: PacketParams, k, x):
    """C eps^(-d/4) (1 + |x-a|/sqrt(eps))^|k| exp(-c |x-a|^2 / (2 eps)) >= |phi_k(x)|."""
    k = as_multi_index(k, p.dim)
    C, c = envelope_constants(p, k)
    r = np.linalg.norm(np.asarray(x, dtype=float) - p.a, axis=-1) / math.sqrt(p.eps)
    return C * p.eps ** (-p.dim / 4) * (1 + r) ** sum(k) * np.exp(-0.5 * c * r * r)


# -- moments --------------------------------------------------------------------

def quadrature_grid(p: PacketParams, k, spacing: float = 0.35, reach: float = 6.5):
    """Uniform tensor grid around a adapted to the packet's covariance."""
    AAs = (p.A @ p.A.conj().T).real
    lam = np.linalg.eigvalsh(AAs)
    n = sum(as_multi_index(k, p.dim))
    h = spacing * math.sqrt(lam[0])
    half = math.sqrt(lam[-1]) * (reach + 1.5 * math.sqrt(n + 1))
    m = int(math.ceil(half / h))
    ax = np.arange(-m, m + 1) * h * math.sqrt(p.eps)
    axes = [ax + p.a[j] for j in range(p.dim)]
    x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p.dim)
    return x, (h * math.sqrt(p.eps)) ** p.dim


def moments(p: PacketParams, k, spacing: float = 0.35, reach: float = 6.5) -> dict:
    """Expectations and central position moments of |phi_k|^2 up to order 4."""
    k = _check_k(k, p.dim, K_MAX)
    x, w = quadrature_grid(p, k, spacing, reach)
    table = PacketTable(p, x, sum(k) + 1)
    phi = table.value(k)
    dens = np.abs(phi) ** 2 * w
    norm = math.fsum(dens)
    if abs(norm - 1) > 1e-6:
        raise QuadratureError(f"norm deficit {abs(norm - 1):.2e}; refine the quadrature grid")
    grad = table.gradient(k)
    mean_x = np.array([math.fsum(dens * x[:, j]) for j in range(p.dim)]) / norm
    pphi = -1j * p.eps * grad
    mean_p = np.array([math.fsum((np.conj(phi) * pphi[:, j]).real * w) for j in range(p.dim)]) / norm
    h = x - mean_x
    central = {}
    for order in range(2, 5):
        for alpha in multi_indices(p.dim, order):
            mono = np.prod(h ** np.asarray(alpha), axis=-1)
            central[alpha] = math.fsum(dens * mono) / norm
    cov = np.empty((p.dim, p.dim))
    for i in range(p.dim):
        for j in range(p.dim):
            alpha = [0] * p.dim
            alpha[i] += 1
            alpha[j] += 1
            cov[i, j] = central[tuple(alpha)]
    return {"norm": norm, "mean_x": mean_x, "mean_p": mean_p, "cov_x": cov, "central": central}


def position_moment_norm(p: PacketParams, k, alpha: Sequence[int]) -> float:
    """||(x - a)^alpha phi_k||_2 by quadrature."""
    k = _check_k(k, p.dim, K_MAX)
    x, w = quadrature_grid(p, k)
    phi = PacketTable(p, x, sum(k)).value(k)
    mono = np.prod((x - p.a) ** np.asarray(alpha), axis=-1)
    return math.sqrt(math.fsum(np.abs(mono * phi) ** 2 * w))
