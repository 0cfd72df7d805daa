"""Strang split-step Fourier solver for i eps d/dt psi = (-eps^2/2 Lap + V) psi.

Periodic grids in d = 1, 2.  Snapshots (:class:`GridWave`) give pointwise
access to psi and its spectral derivatives, either through exact
trigonometric interpolation or a fast demodulated local Lagrange stencil.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .errors import BoundaryLeak, ContractViolation
from .hagedorn import PacketParams, PacketTable, as_multi_index
from .potential import PotentialModel

LEAK_ABORT = 1e-10


def _next_pow2(n: float) -> int:
    return 1 << max(4, int(math.ceil(math.log2(max(n, 1.0)))))


@dataclass(frozen=True)
class GridSpec:
    """Periodic box ``center +- L`` with ``N`` points per axis."""

    dim: int
    center: tuple
    L: tuple
    N: tuple
    dt: float = 1e-3

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ContractViolation("grid solver supports d = 1, 2 only")
        for name in ("center", "L", "N"):
            val = getattr(self, name)
            val = tuple(np.broadcast_to(np.asarray(val), (self.dim,)).tolist())
            object.__setattr__(self, name, val)
        for n in self.N:
            if n < 8 or n & (n - 1):
                raise ContractViolation("points per axis must be a power of two")

    @property
    def dx(self) -> np.ndarray:
        return 2 * np.asarray(self.L) / np.asarray(self.N)

    @property
    def cell(self) -> float:
        return float(np.prod(self.dx))

    def axes(self) -> list[np.ndarray]:
        return [c - l + np.arange(n) * (2 * l / n) for c, l, n in zip(self.center, self.L, self.N)]

    def points(self) -> np.ndarray:
        """Grid nodes, shape ``N + (d,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def wavenumbers(self) -> list[np.ndarray]:
        return [2 * np.pi * np.fft.fftfreq(n, d=dx) for n, dx in zip(self.N, self.dx)]

    def resolves(self, eps: float, eta_max: float) -> bool:
        dx_ok = np.all(self.dx <= math.sqrt(eps) / 4 * (1 + 1e-12))
        kcut = np.pi / self.dx
        return bool(dx_ok and np.all(kcut >= 8 * (eta_max + math.sqrt(eps)) / eps * (1 - 1e-12)))

    @classmethod
    def auto(cls, traj, eps: float, k=0, dt: float = 1e-3, margin: float = 12.0,
             times=None) -> "GridSpec":
        """Box enclosing the classical path plus ``margin * sqrt(eps) * (1 + |k|) * max |A|``.

        The packet width is proportional to the spectral norm of A(t), so the
        margin follows the largest spread reached along the path.
        """
        d = traj.dim
        ts = np.linspace(traj.t_start, traj.t_end, 401) if times is None else np.asarray(times)
        st = traj.state(ts)
        a = np.atleast_2d(st.a)
        eta_max = float(np.max(np.abs(st.eta)))
        n = sum(as_multi_index(k, d))
        lo, hi = a.min(axis=0), a.max(axis=0)
        center = 0.5 * (lo + hi)
        spread = float(np.max(np.linalg.norm(np.asarray(st.A).reshape(-1, d, d), ord=2, axis=(-2, -1))))
        half = 0.5 * (hi - lo) + margin * math.sqrt(eps) * (1 + n) * max(spread, 1.0)
        half = np.ceil(half * 2) / 2
        dx_req = min(math.sqrt(eps) / 4, math.pi * eps / (8 * (eta_max + math.sqrt(eps))))
        N = tuple(_next_pow2(2 * h / dx_req) for h in half)
        return cls(d, tuple(center), tuple(half), N, dt)


@dataclass(frozen=True, eq=False)
class GridWave:
    grid: GridSpec
    psi: np.ndarray
    t: float
    eps: float

    @cached_property
    def spectrum(self) -> np.ndarray:
        return np.fft.fftn(self.psi)

    def _kgrid(self):
        return np.meshgrid(*self.grid.wavenumbers(), indexing="ij")

    @cached_property
    def gradient(self) -> np.ndarray:
        """Spectral gradient on the grid, shape ``N + (d,)``."""
        ks = self._kgrid()
        comps = [np.fft.ifftn(1j * k * self.spectrum) for k in ks]
        return np.stack(comps, axis=-1)

    @cached_property
    def laplacian(self) -> np.ndarray:
        k2 = sum(k * k for k in self._kgrid())
        return np.fft.ifftn(-k2 * self.spectrum)

    @cached_property
    def carrier(self) -> np.ndarray:
        """Mean wavenumber <p>/eps, used to demodulate before local interpolation."""
        w = np.abs(self.spectrum) ** 2
        return np.array([float(np.sum(w * k) / np.sum(w)) for k in self._kgrid()])

    def norm(self) -> float:
        return math.sqrt(math.fsum(np.abs(self.psi.ravel()) ** 2) * self.grid.cell)

    def edge_amplitude(self, width: int = 2) -> float:
        m = 0.0
        for ax in range(self.grid.dim):
            lo = np.take(self.psi, range(width), axis=ax)
            hi = np.take(self.psi, range(-width, 0), axis=ax)
            m = max(m, float(np.max(np.abs(lo))), float(np.max(np.abs(hi))))
        return m

    # -- pointwise access -------------------------------------------------------
    def _check_inside(self, x):
        g = self.grid
        lo = np.asarray(g.center) - np.asarray(g.L) + 4 * g.dx
        hi = np.asarray(g.center) + np.asarray(g.L) - 5 * g.dx
        if np.any(x < lo) or np.any(x > hi):
            raise ContractViolation("query point outside the box interior")

    def _modes(self, x, deriv_axis=None):
        g = self.grid
        x = np.asarray(x, dtype=float).reshape(-1, g.dim)
        self._check_inside(x)
        coeff = self.spectrum / np.prod(g.N)
        out = coeff
        factors = []
        for ax, (k, n, x0) in enumerate(zip(g.wavenumbers(), g.N, [a[0] for a in g.axes()])):
            kk = k.copy()
            if n % 2 == 0:
                kk[n // 2] = 0.0  # Nyquist mode: real cosine carries no derivative
            ph = np.exp(1j * np.outer(x[:, ax] - x0, k))
            if n % 2 == 0:
                ph[:, n // 2] = np.cos((x[:, ax] - x0) * k[n // 2])
            if deriv_axis == ax:
                ph = ph * (1j * kk)
            factors.append(ph)
        if g.dim == 1:
            return factors[0] @ out
        return np.einsum("mi,ij,mj->m", factors[0], out, factors[1])

    def value_at(self, x) -> np.ndarray:
        """Band-limited (trigonometric) interpolant of psi at ``x`` (shape (M, d))."""
        return self._modes(x)

    def gradient_at(self, x) -> np.ndarray:
        return np.stack([self._modes(x, ax) for ax in range(self.grid.dim)], axis=-1)

    @cached_property
    def _demodulated(self):
        ph = np.exp(-1j * np.tensordot(self.grid.points(), self.carrier, axes=([-1], [0])))
        vals = self.psi * ph
        grads = self.gradient * ph[..., None]
        lap = self.laplacian * ph
        return np.concatenate([vals[..., None], grads, lap[..., None]], axis=-1)

    def local(self, x, order: int = 12):
        """Fast stencil interpolation of (psi, grad psi, Lap psi) at ``x``.

        Lagrange interpolation of ``order`` points per axis applied to the
        demodulated fields exp(-i kappa x) (psi, grad psi, Lap psi), where
        kappa is the mean wavenumber.  Returns arrays of shape (M,),
        (M, d), (M,).
        """
        g = self.grid
        x = np.asarray(x, dtype=float).reshape(-1, g.dim)
        self._check_inside(x)
        data = self._demodulated
        x0 = np.asarray(g.center) - np.asarray(g.L)
        pos = (x - x0) / g.dx
        base = np.floor(pos).astype(int) - (order // 2 - 1)
        frac = pos - base
        nodes = np.arange(order)
        weights = []
        for ax in range(g.dim):
            s = frac[:, ax][:, None] - nodes[None, :]
            w = np.empty_like(s)
            for m in range(order):
                others = np.delete(nodes, m)
                w[:, m] = np.prod(s[:, others], axis=1) / np.prod(m - others)
            weights.append(w)
        idx = [(base[:, ax][:, None] + nodes[None, :]) % g.N[ax] for ax in range(g.dim)]
        if g.dim == 1:
            block = data[idx[0]]
            out = np.einsum("mi,mic->mc", weights[0], block)
        else:
            block = data[idx[0][:, :, None], idx[1][:, None, :]]
            out = np.einsum("mi,mj,mijc->mc", weights[0], weights[1], block)
        ph = np.exp(1j * (x @ self.carrier))
        # the stored fields are derivatives of psi itself; only re-modulate
        val = out[:, 0] * ph
        grad = out[:, 1:1 + g.dim] * ph[:, None]
        lap = out[:, -1] * ph
        return val, grad, lap

    # -- export -----------------------------------------------------------------
    def save(self, path) -> None:
        """Little-endian float64 interleaved Re/Im (C order) plus ``.hdr`` sidecar."""
        arr = np.empty(self.psi.shape + (2,), dtype="<f8")
        arr[..., 0] = self.psi.real
        arr[..., 1] = self.psi.imag
        arr.tofile(str(path))
        g = self.grid
        with open(str(path) + ".hdr", "w") as fh:
            fh.write(f"d = {g.dim}\n")
            fh.write("N = " + ",".join(str(n) for n in g.N) + "\n")
            fh.write("L = " + ",".join(repr(float(v)) for v in g.L) + "\n")
            fh.write("center = " + ",".join(repr(float(v)) for v in g.center) + "\n")
            fh.write(f"eps = {float(self.eps)!r}\n")
            fh.write(f"t = {float(self.t)!r}\n")
            fh.write("dtype = <f8 interleaved re,im\n")

    @classmethod
    def load(cls, path) -> "GridWave":
        hdr = {}
        with open(str(path) + ".hdr") as fh:
            for line in fh:
                key, _, val = line.partition("=")
                hdr[key.strip()] = val.strip()
        d = int(hdr["d"])
        N = tuple(int(v) for v in hdr["N"].split(","))
        L = tuple(float(v) for v in hdr["L"].split(","))
        center = tuple(float(v) for v in hdr.get("center", ",".join(["0"] * d)).split(","))
        raw = np.fromfile(str(path), dtype="<f8").reshape(N + (2,))
        grid = GridSpec(d, center, L, N)
        return cls(grid, raw[..., 0] + 1j * raw[..., 1], float(hdr["t"]), float(hdr["eps"]))


def wave_from_packet(grid: GridSpec, p: PacketParams, k, t: float = 0.0) -> GridWave:
    """Sample the phased packet exp(iS/eps) phi_k on the grid."""
    k = as_multi_index(k, p.dim)
    pts = grid.points()
    vals = PacketTable(p, pts, sum(k), phased=True).value(k)
    return GridWave(grid, vals, t, p.eps)


class SplitStep:
    """Strang splitting V/2 - T - V/2 with precomputed phase factors."""

    def __init__(self, grid: GridSpec, V: PotentialModel, eps: float, dt: float | None = None):
        if V.dim != grid.dim:
            raise ContractViolation("potential and grid dimensions differ")
        self.grid = grid
        self.eps = eps
        self.dt = grid.dt if dt is None else dt
        pot = V(grid.points())
        self.half_potential = np.exp(-0.5j * self.dt * pot / eps)
        k2 = sum(k * k for k in np.meshgrid(*grid.wavenumbers(), indexing="ij"))
        self.kinetic = np.exp(-0.5j * self.dt * eps * k2)

    def step(self, psi: np.ndarray) -> np.ndarray:
        psi = psi * self.half_potential
        psi = np.fft.ifftn(np.fft.fftn(psi) * self.kinetic)
        return psi * self.half_potential


def iter_propagate(psi0: GridWave, V: PotentialModel, eps: float, n_steps: int,
                   dt: float | None = None, check_every: int = 25) -> Iterator[GridWave]:
    """Yield psi0 and then the state after every step."""
    if not math.isclose(psi0.eps, eps):
        raise ContractViolation("initial wave built for a different eps")
    stepper = SplitStep(psi0.grid, V, eps, dt)
    if psi0.edge_amplitude() > LEAK_ABORT:
        raise BoundaryLeak("initial state touches the box edge; enlarge L")
    psi = psi0.psi
    t0 = psi0.t
    yield psi0
    for n in range(1, n_steps + 1):
        psi = stepper.step(psi)
        w = GridWave(psi0.grid, psi, t0 + n * stepper.dt, eps)
        if n % check_every == 0 or n == n_steps:
            amp = w.edge_amplitude()
            if amp > LEAK_ABORT:
                raise BoundaryLeak(f"|psi| = {amp:.2e} at the box edge at t = {w.t:.4g}; enlarge L")
        yield w


def propagate(psi0: GridWave, V: PotentialModel, eps: float, T: float,
              dt: float | None = None, save_every: int | None = None) -> list[GridWave]:
    """Evolve to time T; returns snapshots every ``save_every`` steps (and at T)."""
    dt = psi0.grid.dt if dt is None else dt
    n_steps = int(round(T / dt))
    if n_steps < 1 or not math.isclose(n_steps * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ContractViolation("T must be a positive multiple of dt")
    save_every = save_every or n_steps
    out = []
    for n, w in enumerate(iter_propagate(psi0, V, eps, n_steps, dt)):
        if n % save_every == 0 or n == n_steps:
            out.append(w)
    return out


def compare_norms(w: GridWave, p: PacketParams, k, phase_aligned: bool = False) -> dict:
    """||psi - Phi_k||_2, sup |psi - Phi_k|, sup |grad psi - grad Phi_k| on the grid."""
    k = as_multi_index(k, p.dim)
    pts = w.grid.points()
    table = PacketTable(p, pts, sum(k) + 1, phased=True, adm_tol=1e-6)
    phi = table.value(k)
    grad_phi = table.gradient(k)
    if phase_aligned:
        ov = np.vdot(phi, w.psi)
        rot = ov / abs(ov) if abs(ov) > 0 else 1.0
        phi = phi * rot
        grad_phi = grad_phi * rot
    diff = w.psi - phi
    gdiff = np.linalg.norm(w.gradient - grad_phi, axis=-1)
    return {
        "L2_diff": math.sqrt(math.fsum(np.abs(diff.ravel()) ** 2) * w.grid.cell),
        "Linf_diff": float(np.max(np.abs(diff))),
        "Linf_grad_diff": float(np.max(gdiff)),
    }


def momentum_moment_norm(w: GridWave, eta, alpha) -> float:
    """||(p - eta)^alpha psi||_2 with p = -i eps grad, via the spectrum."""
    g = w.grid
    ks = np.meshgrid(*g.wavenumbers(), indexing="ij")
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (g.dim,))
    mult = np.ones(g.N)
    for ax, n in enumerate(alpha):
        mult = mult * (w.eps * ks[ax] - eta[ax]) ** n
    # Parseval: sum |f|^2 dx = sum |f_hat|^2 dx / N_total
    f_hat = mult * w.spectrum
    return math.sqrt(math.fsum(np.abs(f_hat.ravel()) ** 2) * g.cell / np.prod(g.N))
