"""Classical centre, variational (A, B) system and action along [0, T].

The combined system

    a' = eta,  eta' = -grad V(a),  A' = i B,  B' = i Hess V(a) A,
    S' = |eta|^2 / 2 - V(a),       (log det A)' = i tr(A^-1 B)

is integrated as one complex vector with an adaptive explicit Runge-Kutta
pair with dense output.  The last channel carries a continuous branch of
log det A so that det(A)^(-1/2) never jumps sheets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import AdmissibilityDrift, ContractViolation, StepUnderflow
from .hagedorn import PacketParams, validate_admissible
from .potential import PotentialModel

ABORT_RESIDUAL = 1e-6


@dataclass(frozen=True)
class ClassicalState:
    t: float
    a: np.ndarray
    eta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    S: float = 0.0
    logdet: complex | None = None

    @property
    def dim(self) -> int:
        return np.shape(self.a)[-1]

    @classmethod
    def from_packet(cls, p: PacketParams, t: float = 0.0) -> "ClassicalState":
        return cls(t, p.a.copy(), p.eta.copy(), p.A.copy(), p.B.copy(), float(p.S), p.logdet)

    def packet(self, eps: float) -> PacketParams:
        return PacketParams(eps, self.a, self.eta, self.A, self.B, self.S, self.logdet)

    def energy(self, V: PotentialModel):
        return 0.5 * np.sum(np.asarray(self.eta) ** 2, axis=-1) + V(self.a)


def admissibility_residual(s: ClassicalState):
    return validate_admissible(s.A, s.B)


def quadratic_hamiltonian_coeffs(s: ClassicalState, V: PotentialModel) -> dict:
    """Coefficients of the second-order Taylor polynomial of V about a."""
    a = np.asarray(s.a, dtype=float)
    return {"value": V.derivative(a, 0), "gradient": V.derivative(a, 1), "hessian": V.derivative(a, 2)}


def _pack(s: ClassicalState) -> np.ndarray:
    logdet = s.logdet if s.logdet is not None else np.log(np.linalg.det(s.A))
    return np.concatenate([np.asarray(s.a, complex), np.asarray(s.eta, complex),
                           np.asarray(s.A, complex).ravel(), np.asarray(s.B, complex).ravel(),
                           [s.S, logdet]])


def _unpack(y: np.ndarray, d: int):
    # y has shape (n,) or (n, m); returns real a, eta, S and complex A, B, logdet
    a = y[:d].real
    eta = y[d:2 * d].real
    A = y[2 * d:2 * d + d * d]
    B = y[2 * d + d * d:2 * d + 2 * d * d]
    S = y[2 * d + 2 * d * d].real
    logdet = y[2 * d + 2 * d * d + 1]
    if y.ndim == 1:
        return a, eta, A.reshape(d, d), B.reshape(d, d), S, logdet
    m = y.shape[1]
    return (a.T, eta.T, np.moveaxis(A.reshape(d, d, m), -1, 0),
            np.moveaxis(B.reshape(d, d, m), -1, 0), S, logdet)


def _rhs(V: PotentialModel, d: int):
    def f(t, y):
        a, eta, A, B, S, _ = _unpack(y, d)
        grad = V.derivative(a, 1)
        hess = V.derivative(a, 2)
        dA = 1j * B
        dB = 1j * hess @ A
        dS = 0.5 * eta @ eta - V.derivative(a, 0)
        dlog = 1j * np.trace(np.linalg.solve(A, B))
        return np.concatenate([eta, -grad, dA.ravel(), dB.ravel(), [dS, dlog]])
    return f


class ClassicalTrajectory:
    """Dense classical solution with interpolation accessors.

    ``t`` holds the accepted-step mesh; calling :meth:`state` or
    :meth:`packet` at arbitrary (array) times uses the integrator's
    continuous extension.
    """

    def __init__(self, V: PotentialModel, d: int, sol, t_mesh, y_mesh, tol: float):
        self.V = V
        self.dim = d
        self.tol = tol
        self._sol = sol
        self.t = np.asarray(t_mesh)
        self.y = y_mesh
        self.t_start = float(self.t[0])
        self.t_end = float(self.t[-1])

    def _eval(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = min(self.t_start, self.t_end), max(self.t_start, self.t_end)
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ContractViolation("time outside the integrated horizon")
        if t.ndim == 0:
            return self._sol(float(t))
        flat = t.ravel()
        uniq, inverse = np.unique(flat, return_inverse=True)
        vals = self._sol(uniq) if len(uniq) > 1 else self._sol(float(uniq[0]))[:, None]
        return vals[:, inverse]

    def state(self, t) -> ClassicalState:
        y = self._eval(t)
        a, eta, A, B, S, logdet = _unpack(y, self.dim)
        return ClassicalState(t, a, eta, A, B, S, logdet)

    def packet(self, t, eps: float) -> PacketParams:
        """Packet parameters at time(s) ``t``; batched when ``t`` is an array."""
        return self.state(t).packet(eps)

    def position(self, t):
        return self.state(t).a

    def momentum(self, t):
        return self.state(t).eta

    def mesh_states(self) -> ClassicalState:
        a, eta, A, B, S, logdet = _unpack(self.y, self.dim)
        return ClassicalState(self.t, a, eta, A, B, S, logdet)

    def residuals(self):
        s = self.mesh_states()
        return validate_admissible(s.A, s.B)

    def energy(self, t=None):
        s = self.mesh_states() if t is None else self.state(t)
        return s.energy(self.V)

    def to_csv(self, path, times=None):
        """Write (t, a, eta, Re/Im A, Re/Im B, S) rows, full double precision."""
        s = self.mesh_states() if times is None else self.state(np.asarray(times, float))
        t = np.atleast_1d(s.t)
        d = self.dim
        pairs = [(i, j) for i in range(d) for j in range(d)]
        header = (["t"] + [f"a{j}" for j in range(d)] + [f"eta{j}" for j in range(d)]
                  + [f"A_re{i}{j}" for i, j in pairs] + [f"A_im{i}{j}" for i, j in pairs]
                  + [f"B_re{i}{j}" for i, j in pairs] + [f"B_im{i}{j}" for i, j in pairs] + ["S"])
        a = np.atleast_2d(s.a)
        eta = np.atleast_2d(s.eta)
        A = np.asarray(s.A).reshape(-1, d * d)
        B = np.asarray(s.B).reshape(-1, d * d)
        S = np.atleast_1d(s.S)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for n in range(len(t)):
                row = [t[n], *a[n], *eta[n], *A[n].real, *A[n].imag, *B[n].real, *B[n].imag, S[n]]
                w.writerow([repr(float(v)) for v in row])


def integrate_flow(init: ClassicalState, V: PotentialModel, T: float, tol: float = 1e-10,
                   method: str = "DOP853") -> ClassicalTrajectory:
    """Integrate from ``init.t`` to ``init.t + T`` (T < 0 integrates backwards)."""
    d = init.dim
    if V.dim != d:
        raise ContractViolation("potential and state dimensions differ")
    if T == 0 or not np.isfinite(T):
        raise ContractViolation("horizon must be finite and nonzero")
    r_sym, r_norm = admissibility_residual(init)
    if max(r_sym, r_norm) >= 1e-8:
        raise ContractViolation(f"initial (A, B) not admissible ({r_sym:.2e}, {r_norm:.2e})")
    y0 = _pack(init)
    t0 = float(init.t)
    sol = solve_ivp(_rhs(V, d), (t0, t0 + T), y0, method=method, rtol=tol, atol=tol,
                    dense_output=True)
    if sol.status != 0:
        raise StepUnderflow(f"classical integration failed: {sol.message}")
    _, _, A, B, _, _ = _unpack(sol.y, d)
    r_sym, r_norm = validate_admissible(A, B)
    worst = int(np.argmax(np.maximum(r_sym, r_norm)))
    if max(r_sym[worst], r_norm[worst]) > ABORT_RESIDUAL:
        raise AdmissibilityDrift(
            f"admissibility residual {max(r_sym[worst], r_norm[worst]):.2e} at t={sol.t[worst]:.4g}")
    return ClassicalTrajectory(V, d, sol.sol, sol.t, sol.y, tol)
