"""Bohmian velocity field and trajectory ensembles over two wave backends.

``SemiclassicalBackend`` evaluates the phased packet Phi_k along a classical
trajectory in closed form; ``ExactBackend`` reads grid snapshots of the
Schrodinger solution.  Paths follow dQ/dt = eps Im(grad psi / psi).

Node proximity is measured in the scale-free unit eps^(d/4) |psi|.  Paths
whose amplitude drops below ``node_floor`` are stopped and flagged, never
regularized.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NodeProximity
from .hagedorn import PacketTable, as_multi_index
from .reference_solver import GridWave, iter_propagate

NODE_FLOOR = 1e-6
COMPLETED, NODE_ABORT = 0, 1
STATUS_NAMES = {COMPLETED: "completed", NODE_ABORT: "node_abort"}


class SemiclassicalBackend:
    """psi = exp(iS/eps) phi_k(A(t), B(t), eps, a(t), eta(t), x)."""

    kind = "semiclassical"

    def __init__(self, traj, eps: float, k=0):
        self.traj = traj
        self.eps = float(eps)
        self.dim = traj.dim
        self.k = as_multi_index(k, traj.dim)

    def fields(self, x, t, laplacian: bool = False):
        """(psi, grad psi[, Lap psi]) at positions x (M, d) and times t (scalar or (M,))."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        p = self.traj.packet(t, self.eps)
        depth = sum(self.k) + (2 if laplacian else 1)
        # admissibility is monitored along the flow itself
        table = PacketTable(p, x, depth, phased=True, adm_tol=None)
        psi = table.value(self.k)
        grad = table.gradient(self.k)
        if not laplacian:
            return psi, grad
        hess = table._scale[..., None, None] * table.scaled_hessian(self.k)
        return psi, grad, np.trace(hess, axis1=-2, axis2=-1)


class ExactBackend:
    """Grid snapshots of the Schrodinger-evolved wave, addressed by time."""

    kind = "exact"

    def __init__(self, waves):
        self.waves = list(waves)
        if not self.waves:
            raise ContractViolation("need at least one snapshot")
        self.eps = float(self.waves[0].eps)
        self.dim = self.waves[0].grid.dim
        self.times = np.array([w.t for w in self.waves])

    def wave_at(self, t: float) -> GridWave:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ContractViolation(f"no snapshot at t = {t}")
        return self.waves[i]

    def fields(self, x, t, laplacian: bool = False):
        t = np.asarray(t, dtype=float)
        if t.ndim and np.ptp(t) > 0:
            raise ContractViolation("exact backend evaluates one time at a time")
        w = self.wave_at(float(t.ravel()[0]) if t.ndim else float(t))
        psi, grad, lap = w.local(x)
        return (psi, grad, lap) if laplacian else (psi, grad)


def _velocity_arrays(psi, grad, eps, d):
    amp = np.abs(psi)
    scaled = amp * eps ** (d / 4)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = grad / psi[:, None]
    v = eps * ratio.imag
    # |psi| / |grad |psi||: the length over which the amplitude changes
    dR = np.linalg.norm(ratio.real, axis=-1)
    with np.errstate(divide="ignore"):
        length = np.where(dR > 0, 1.0 / dR, np.inf)
    return v, scaled, length


def velocity(b, x, t, node_floor: float = NODE_FLOOR):
    """v = eps Im(grad psi / psi); raises NodeProximity near nodes."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    psi, grad = b.fields(x.reshape(-1, b.dim), t)
    v, scaled, _ = _velocity_arrays(psi, grad, b.eps, b.dim)
    if np.any(scaled < node_floor):
        raise NodeProximity(float(np.min(scaled)))
    return v[0] if single else v


def quantum_potential(b, x, t, node_floor: float = NODE_FLOOR):
    """V_Q = -(eps^2 / 2) Lap|psi| / |psi|."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    psi, grad, lap = b.fields(x.reshape(-1, b.dim), t, laplacian=True)
    scaled = np.abs(psi) * b.eps ** (b.dim / 4)
    if np.any(scaled < node_floor):
        raise NodeProximity(float(np.min(scaled)))
    ratio = grad / psi[:, None]
    lap_R_over_R = (lap / psi).real + np.sum(ratio.imag ** 2, axis=-1)
    vq = -0.5 * b.eps ** 2 * lap_R_over_R
    return vq[0] if single else vq


@dataclass
class BohmianPath:
    x0: np.ndarray
    t: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    amplitude: np.ndarray
    status: str
    abort_time: float = math.nan


@dataclass
class TrajectoryEnsemble:
    """Paths sampled on a common time mesh.

    ``Q`` and ``v`` have shape (n_t, N, d), ``psi`` (n_t, N).  After a node
    abort the remaining samples of that path are NaN.  ``min_amp`` is the
    running minimum of eps^(d/4) |psi| over every accepted evaluation.
    """

    t: np.ndarray
    x0: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    psi: np.ndarray
    status: np.ndarray
    abort_time: np.ndarray
    min_amp: np.ndarray
    eps: float
    backend: str

    @property
    def n_paths(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def completed(self) -> np.ndarray:
        return self.status == COMPLETED

    def path(self, i: int) -> BohmianPath:
        return BohmianPath(self.x0[i], self.t, self.Q[:, i], self.v[:, i], np.abs(self.psi[:, i]),
                           STATUS_NAMES[int(self.status[i])], float(self.abort_time[i]))

    def header(self) -> list[str]:
        d = self.dim
        return (["path_id", "t"] + [f"Q{j}" for j in range(d)] + [f"v{j}" for j in range(d)]
                + ["abs_psi", "status"])

    def rows(self, ids=None):
        """Rows (path_id, t, Q components, v components, |psi|, status) in full precision."""
        ids = range(self.n_paths) if ids is None else ids
        for i in ids:
            status = STATUS_NAMES[int(self.status[i])]
            for n, t in enumerate(self.t):
                if not np.isfinite(self.Q[n, i, 0]):
                    break
                yield ([int(i), repr(float(t))] + [repr(float(q)) for q in self.Q[n, i]]
                       + [repr(float(q)) for q in self.v[n, i]]
                       + [repr(float(abs(self.psi[n, i]))), status])

    def to_csv(self, path, ids=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            w.writerows(self.rows(ids))

    @classmethod
    def concatenate(cls, parts) -> "TrajectoryEnsemble":
        parts = list(parts)
        first = parts[0]
        return cls(first.t, np.concatenate([p.x0 for p in parts]),
                   np.concatenate([p.Q for p in parts], axis=1),
                   np.concatenate([p.v for p in parts], axis=1),
                   np.concatenate([p.psi for p in parts], axis=1),
                   np.concatenate([p.status for p in parts]),
                   np.concatenate([p.abort_time for p in parts]),
                   np.concatenate([p.min_amp for p in parts]), first.eps, first.backend)


# -- adaptive Dormand-Prince 5(4), independent step control per path ---------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _sample_fields(b, x, t):
    psi, grad = b.fields(x, t)
    v, scaled, length = _velocity_arrays(psi, grad, b.eps, b.dim)
    return v, scaled, length, psi


def _integrate_adaptive(b, x0, t_rec, tol, node_floor, max_iter=200000):
    N, d = x0.shape
    n_rec = len(t_rec)
    T = t_rec[-1] - t_rec[0]
    Q = np.full((n_rec, N, d), np.nan)
    V = np.full((n_rec, N, d), np.nan)
    P = np.full((n_rec, N), np.nan + 0j)
    status = np.zeros(N, dtype=int)
    abort_time = np.full(N, np.nan)
    x = x0.astype(float).copy()
    t = np.full(N, t_rec[0])
    v0, s0, _, psi0 = _sample_fields(b, x, t)
    min_amp = s0.copy()
    amp = s0.copy()
    lip = np.zeros(N)
    Q[0], V[0], P[0] = x, v0, psi0
    nxt = np.ones(N, dtype=int)
    h = np.full(N, min(0.01 * T, t_rec[1] - t_rec[0]))
    k1 = v0
    active = np.ones(N, dtype=bool)
    bad0 = s0 < node_floor
    status[bad0] = NODE_ABORT
    abort_time[bad0] = t_rec[0]
    active &= ~bad0
    hmin = 1e-12 * max(T, 1.0)
    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ti, xi, hi = t[idx], x[idx], h[idx]
        target = t_rec[nxt[idx]]
        hstep = np.minimum(hi, target - ti)
        # low amplitude: keep h below a tenth of 1 / Lip(v), estimated from the stages
        vi = k1[idx]
        low = amp[idx] < 1e-2
        with np.errstate(divide="ignore"):
            cap = np.where(low & (lip[idx] > 0), 0.1 / lip[idx], np.inf)
        hstep = np.minimum(hstep, cap)
        ks = [vi]
        ok = np.ones(idx.size, dtype=bool)
        lip_new = np.zeros(idx.size)
        for s in range(1, 7):
            xs = xi + hstep[:, None] * sum(a * kk for a, kk in zip(_A[s], ks) if a != 0.0)
            vs, scaled, _, _ = _sample_fields(b, xs, ti + _C[s] * hstep)
            ok &= scaled >= node_floor
            vs = np.where(np.isfinite(vs), vs, 0.0)
            dx = np.linalg.norm(xs - xi, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.linalg.norm(vs - vi, axis=-1) / dx
            lip_new = np.maximum(lip_new, np.where(dx > 0, ratio, 0.0))
            ks.append(vs)
        lip[idx] = lip_new
        x_new = xi + hstep[:, None] * sum(a * kk for a, kk in zip(_A[6], ks[:6]) if a != 0.0)
        err_vec = hstep[:, None] * sum(e * kk for e, kk in zip(_E, ks) if e != 0.0)
        scale = tol + tol * np.maximum(np.abs(xi), np.abs(x_new))
        err = np.max(np.abs(err_vec) / scale, axis=-1)
        accept = ok & (err <= 1.0)
        with np.errstate(divide="ignore"):
            fac = np.where(err > 0, 0.9 * err ** -0.2, 5.0)
        fac = np.clip(fac, 0.2, 5.0)
        fac = np.where(ok, fac, 0.25)
        hnew = np.where(accept, np.maximum(hstep, hi * (hstep < hi)) * fac, hstep * np.minimum(fac, 1.0))
        # retain the unconstrained step length when the step was shortened only to hit a mesh time
        hnew = np.where(accept & (hstep < hi), np.maximum(hi, hstep * fac), hnew)
        h[idx] = np.maximum(hnew, 0.0)
        acc = idx[accept]
        if acc.size:
            t_acc = ti[accept] + hstep[accept]
            t[acc] = t_acc
            x[acc] = x_new[accept]
            v_end, s_end, _, psi_end = _sample_fields(b, x[acc], t_acc)
            k1[acc] = v_end
            amp[acc] = s_end
            min_amp[acc] = np.minimum(min_amp[acc], s_end)
            hit = np.abs(t_acc - t_rec[nxt[acc]]) <= 1e-12 * max(1.0, abs(t_rec[-1]))
            rows = acc[hit]
            slots = nxt[rows]
            t[rows] = t_rec[slots]
            Q[slots, rows], V[slots, rows], P[slots, rows] = x[rows], v_end[hit], psi_end[hit]
            nxt[rows] += 1
            active[rows[nxt[rows] == n_rec]] = False
            dead = acc[s_end < node_floor]
            status[dead] = NODE_ABORT
            abort_time[dead] = t[dead]
            active[dead] = False
        tiny = idx[(h[idx] < hmin) & active[idx]]
        status[tiny] = NODE_ABORT
        abort_time[tiny] = t[tiny]
        active[tiny] = False
    else:
        raise ContractViolation("path integration exceeded the iteration budget")
    return Q, V, P, status, abort_time, min_amp


def integrate_ensemble(b: SemiclassicalBackend, x0, T: float, tol: float = 1e-9,
                       n_record: int = 201, node_floor: float = NODE_FLOOR,
                       t0: float = 0.0) -> TrajectoryEnsemble:
    """Adaptive integration of many paths with per-path step control.

    Paths do not share step sizes, so each path's result depends only on
    its own initial point (for a fixed evaluation batch).
    """
    x0 = np.asarray(x0, dtype=float)
    x0 = x0.reshape(-1, b.dim)
    if not np.all(np.isfinite(x0)):
        raise ContractViolation("non-finite initial position")
    if T <= 0:
        raise ContractViolation("horizon must be positive")
    t_rec = t0 + np.linspace(0.0, T, n_record)
    Q, V, P, status, abort_time, min_amp = _integrate_adaptive(b, x0, t_rec, tol, node_floor)
    return TrajectoryEnsemble(t_rec, x0, Q, V, P, status, abort_time, min_amp, b.eps, b.kind)


def integrate_path(b, x0, T: float, tol: float = 1e-9, n_record: int = 201,
                   node_floor: float = NODE_FLOOR) -> BohmianPath:
    x0 = np.asarray(x0, dtype=float).reshape(1, b.dim)
    ens = integrate_ensemble(b, x0, T, tol, n_record, node_floor)
    return ens.path(0)


# -- lockstep integration against the grid solver -------------------------------------

def _rk4_exact(waves, x, eps, d, node_floor):
    w0, w1, w2 = waves
    h = w2.t - w0.t

    def f(w, y):
        psi, grad, _ = w.local(y)
        v, scaled, _ = _velocity_arrays(psi, grad, eps, d)
        return v, scaled, psi

    k1, s1, psi1 = f(w0, x)
    k2, s2, _ = f(w1, x + 0.5 * h * k1)
    k3, s3, _ = f(w1, x + 0.5 * h * k2)
    k4, s4, _ = f(w2, x + h * k3)
    x_new = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    stage_min = np.minimum(np.minimum(s1, s2), np.minimum(s3, s4))
    return x_new, stage_min


def integrate_exact_ensemble(psi0: GridWave, V, eps: float, T: float, x0, dt: float | None = None,
                             record_every: int = 1, node_floor: float = NODE_FLOOR,
                             on_snapshot=None, snapshot_every: int | None = None) -> TrajectoryEnsemble:
    """Propagate the grid wave and move paths with it in lockstep.

    Paths take classical RK4 steps of length 2 dt using the solver states at
    t, t + dt and t + 2 dt.  ``on_snapshot(w)`` is called every
    ``snapshot_every`` solver steps and at T.
    """
    dt = psi0.grid.dt if dt is None else dt
    n_steps = int(round(T / dt))
    if n_steps % 2 or not math.isclose(n_steps * dt, T, rel_tol=1e-9):
        raise ContractViolation("T must be an even multiple of dt")
    x = np.asarray(x0, dtype=float).reshape(-1, psi0.grid.dim).copy()
    N, d = x.shape
    n_rk = n_steps // 2
    rec_idx = list(range(0, n_rk + 1, record_every))
    if rec_idx[-1] != n_rk:
        rec_idx.append(n_rk)
    n_rec = len(rec_idx)
    t_rec = psi0.t + 2 * dt * np.asarray(rec_idx)
    Q = np.full((n_rec, N, d), np.nan)
    Vv = np.full((n_rec, N, d), np.nan)
    P = np.full((n_rec, N), np.nan + 0j)
    status = np.zeros(N, dtype=int)
    abort_time = np.full(N, np.nan)
    snapshot_every = snapshot_every or n_steps

    def record(slot, w, alive):
        psi, grad, _ = w.local(x[alive])
        v, scaled, _ = _velocity_arrays(psi, grad, eps, d)
        Q[slot, alive] = x[alive]
        Vv[slot, alive] = v
        P[slot, alive] = psi
        return scaled

    stream = iter_propagate(psi0, V, eps, n_steps, dt)
    w_prev = next(stream)
    if on_snapshot:
        on_snapshot(w_prev)
    alive = np.ones(N, dtype=bool)
    min_amp = record(0, w_prev, alive)
    bad = min_amp < node_floor
    status[bad], abort_time[bad] = NODE_ABORT, psi0.t
    alive &= ~bad
    slot = 1
    for m in range(1, n_rk + 1):
        w_mid = next(stream)
        w_end = next(stream)
        for n_solver, w in ((2 * m - 1, w_mid), (2 * m, w_end)):
            if on_snapshot and (n_solver % snapshot_every == 0 or n_solver == n_steps):
                on_snapshot(w)
        if alive.any():
            idx = np.flatnonzero(alive)
            x_new, stage_min = _rk4_exact((w_prev, w_mid, w_end), x[idx], eps, d, node_floor)
            min_amp[idx] = np.minimum(min_amp[idx], stage_min)
            dead = stage_min < node_floor
            x[idx[~dead]] = x_new[~dead]
            status[idx[dead]] = NODE_ABORT
            abort_time[idx[dead]] = w_prev.t
            alive[idx[dead]] = False
        if slot < n_rec and m == rec_idx[slot]:
            if alive.any():
                s = record(slot, w_end, alive)
                min_amp[alive] = np.minimum(min_amp[alive], s)
            slot += 1
        w_prev = w_end
    return TrajectoryEnsemble(t_rec, np.asarray(x0, float).reshape(-1, d), Q, Vv, P, status,
                              abort_time, min_amp, eps, "exact")
