"""Periodic Lyapunov and Riccati equations for the (impulsive) transverse LTV.

Provides the quadratic Lyapunov seed x_perp' P(tau) x_perp used by the SoS
layer, the transverse-LQR gain, and the bisection that fixes the initial
verified level.  Periodic boundary values are obtained from the discrete
lifted problem (one-period transition operators), never by long forward
integration, so convergence does not depend on transient decay rates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_discrete_lyapunov

from .transverse import TransverseLTV, transverse_monodromy

ODE_RTOL = 1e-13
ODE_ATOL = 1e-15


class LyapError(RuntimeError):
    pass


class UnstableSystem(LyapError):
    """Spectral radius >= 1: no SPPD solution exists."""


class NoConvergence(LyapError):
    """Periodic sweep failed to converge (system likely not stabilizable)."""


@dataclass
class PeriodicQuadratic:
    """Symmetric periodic positive definite P(tau) on the LTV grid."""

    T: float
    taus: list  # per segment
    P: list  # per segment: (K, k, k)
    Q: np.ndarray
    Qi: np.ndarray | None
    R: np.ndarray | None

    def __post_init__(self):
        self._splines = [
            CubicSpline(t, Pseg, axis=0) if len(t) > 3 else None
            for t, Pseg in zip(self.taus, self.P)
        ]

    def segment_index(self, tau: float) -> int:
        for k, t in enumerate(self.taus):
            if t[0] <= tau <= t[-1]:
                return k
        return len(self.taus) - 1

    def P_at(self, tau: float, seg_idx: int | None = None) -> np.ndarray:
        si = self.segment_index(tau) if seg_idx is None else seg_idx
        sp = self._splines[si]
        if sp is None:
            t = self.taus[si]
            j = int(np.clip(np.searchsorted(t, tau) - 1, 0, len(t) - 2))
            w = (tau - t[j]) / (t[j + 1] - t[j])
            M = (1 - w) * self.P[si][j] + w * self.P[si][j + 1]
        else:
            M = sp(tau)
        return 0.5 * (M + M.T)

    def min_eigenvalue(self, refine: int = 4) -> float:
        """Smallest eigenvalue of P over a ``refine``-times denser grid."""
        worst = np.inf
        for si, t in enumerate(self.taus):
            dense = np.linspace(t[0], t[-1], refine * (len(t) - 1) + 1)
            for tau in dense:
                worst = min(worst, float(np.linalg.eigvalsh(self.P_at(tau, si))[0]))
        return worst


@dataclass
class FeedbackGain:
    """Transverse LQR gain K(tau), m x (n-1), on the LTV grid."""

    T: float
    taus: list
    K: list  # per segment: (Kn, m, k)

    def K_at(self, tau: float, seg_idx: int | None = None) -> np.ndarray:
        if seg_idx is None:
            seg_idx = next(
                (i for i, t in enumerate(self.taus) if t[0] <= tau <= t[-1]),
                len(self.taus) - 1,
            )
        t = self.taus[seg_idx]
        j = int(np.clip(np.searchsorted(t, tau) - 1, 0, len(t) - 2))
        w = (tau - t[j]) / (t[j + 1] - t[j])
        return (1 - w) * self.K[seg_idx][j] + w * self.K[seg_idx][j + 1]


def _as_weight(W, k: int, name: str, definite: bool = False) -> np.ndarray:
    W = np.eye(k) * float(W) if np.isscalar(W) else np.asarray(W, dtype=float)
    if W.shape != (k, k):
        raise LyapError(f"{name} must be {k}x{k}")
    Wsym = 0.5 * (W + W.T)
    lam = np.linalg.eigvalsh(Wsym)[0]
    if definite and lam <= 0:
        raise LyapError(f"{name} must be symmetric positive definite")
    if not definite and lam < -1e-12:
        raise LyapError(f"{name} must be symmetric positive semidefinite")
    return Wsym


def _segment_transition_and_gram(ltv: TransverseLTV, si: int, Q: np.ndarray):
    """Phi over the segment and G = int Phi' Q Phi dt, by one augmented ODE."""
    k = ltv.n - 1
    t0, t1 = ltv.taus[si][0], ltv.taus[si][-1]

    def rhs(t, y):
        Phi = y[: k * k].reshape(k, k)
        dPhi = ltv.A_at(si, t) @ Phi
        dG = Phi.T @ Q @ Phi
        return np.concatenate([dPhi.ravel(), dG.ravel()])

    y0 = np.concatenate([np.eye(k).ravel(), np.zeros(k * k)])
    sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL)
    Phi = sol.y[: k * k, -1].reshape(k, k)
    G = sol.y[k * k :, -1].reshape(k, k)
    return Phi, 0.5 * (G + G.T)


def _refined(taus: np.ndarray, refine: int) -> np.ndarray:
    return np.linspace(taus[0], taus[-1], refine * (len(taus) - 1) + 1)


def _rk4_backward(fun, taus: np.ndarray, P_end: np.ndarray) -> np.ndarray:
    """Fixed-step RK4 from taus[-1] down to taus[0]; values at every knot.

    Fixed steps keep the sweep a smooth function of its terminal value, so
    the periodic Picard iteration contracts to machine precision (adaptive
    steppers wobble at ~1e-10 when the step sequence reshuffles).
    """
    P = P_end.copy()
    out = np.zeros((len(taus),) + P.shape)
    out[-1] = P
    for j in range(len(taus) - 1, 0, -1):
        h = taus[j - 1] - taus[j]  # negative
        k1 = fun(taus[j], P)
        k2 = fun(taus[j] + 0.5 * h, P + 0.5 * h * k1)
        k3 = fun(taus[j] + 0.5 * h, P + 0.5 * h * k2)
        k4 = fun(taus[j - 1], P + h * k3)
        P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[j - 1] = P
    return 0.5 * (out + np.transpose(out, (0, 2, 1)))


def _backward_segment(ltv: TransverseLTV, si: int, P_end: np.ndarray, Q: np.ndarray, refine: int):
    """Integrate -P' = A'P + PA + Q backwards over the segment.

    P is reported on the LTV grid refined ``refine`` times: the downstream
    finite-difference residual oracle needs the denser sampling.
    """
    taus = _refined(ltv.taus[si], refine)

    def rhs(t, P):
        A = ltv.A_at(si, t)
        return -(A.T @ P + P @ A + Q)

    return taus, _rk4_backward(rhs, taus, P_end)


def solve_periodic_lyapunov(
    ltv: TransverseLTV, Q=1.0, Qi=1.0, refine: int = 8
) -> PeriodicQuadratic:
    """Unique SPPD solution of the (jump-)Lyapunov equation.

    Continuous phases satisfy P' + A'P + PA + Q = 0; at impacts
    P(tau_i-) = A_d' P(tau_i+) A_d + Qi.  The periodic boundary value comes
    from a discrete Lyapunov equation on the one-period lifted operators,
    then a couple of Picard polish sweeps remove the remaining quadrature
    error (each backward pass contracts boundary-value error by rho^2 < 1).
    """
    k = ltv.n - 1
    Q = _as_weight(Q, k, "Q")
    has_impacts = len(ltv.A_d) > 0
    Qi_m = _as_weight(Qi, k, "Qi") if has_impacts else None

    Psi = transverse_monodromy(ltv)
    rho = float(np.max(np.abs(np.linalg.eigvals(Psi))))
    if rho >= 1.0:
        raise UnstableSystem(
            f"transverse linearization unstable (spectral radius {rho:.6g} >= 1); "
            "no SPPD solution exists"
        )

    # lifted problem: P0 = C' P0 C + G_tot with C the full-cycle transition
    C = np.eye(k)
    G_tot = np.zeros((k, k))
    for si in range(len(ltv.taus)):
        Phi, G = _segment_transition_and_gram(ltv, si, Q)
        G_tot += C.T @ G @ C
        C = Phi @ C
        if si < len(ltv.A_d):
            G_tot += C.T @ Qi_m @ C
            C = ltv.A_d[si] @ C
    P0 = solve_discrete_lyapunov(C.T, 0.5 * (G_tot + G_tot.T))
    P0 = 0.5 * (P0 + P0.T)

    def sweep(P_start):
        # walk backwards through the cycle: stable integration direction
        segs: list = [None] * len(ltv.taus)
        taus: list = [None] * len(ltv.taus)
        P_plus = P_start
        for si in range(len(ltv.taus) - 1, -1, -1):
            if si < len(ltv.A_d):
                A_d = ltv.A_d[si]
                P_end = A_d.T @ P_plus @ A_d + Qi_m
            else:
                P_end = P_start  # continuous system: P(T) = P(0)
            taus[si], segs[si] = _backward_segment(ltv, si, P_end, Q, refine)
            P_plus = segs[si][0]
        return taus, segs, P_plus

    closure, prev = np.inf, np.inf
    for _ in range(40):
        taus, P_segments, P_new = sweep(P0)
        closure = float(np.linalg.norm(P_new - P0))
        P0 = P_new
        if closure <= 1e-12 or closure > 0.9 * prev:  # converged or at noise floor
            break
        prev = closure

    pq = PeriodicQuadratic(T=ltv.T, taus=taus, P=P_segments, Q=Q, Qi=Qi_m, R=None)
    if pq.min_eigenvalue() <= 0:
        raise LyapError("computed P is not positive definite on the refined grid")
    if closure > 1e-8:
        raise LyapError(f"periodic closure {closure:.2e} exceeds 1e-8")
    return pq


def periodic_lyapunov(ltv: TransverseLTV, Q=1.0) -> PeriodicQuadratic:
    """SPPD solution of P' + A'P + PA + Q = 0 for a continuous-phase LTV."""
    if ltv.A_d:
        raise LyapError("LTV has impacts: use jump_lyapunov")
    return solve_periodic_lyapunov(ltv, Q=Q)


def jump_lyapunov(ltv: TransverseLTV, Q=1.0, Qi=1.0) -> PeriodicQuadratic:
    """SPPD solution of the jump-Lyapunov equation for an impulsive LTV."""
    if not ltv.A_d:
        raise LyapError("LTV has no impacts: use periodic_lyapunov")
    return solve_periodic_lyapunov(ltv, Q=Q, Qi=Qi)


def lyapunov_residual(ltv: TransverseLTV, pq: PeriodicQuadratic) -> float:
    """max Frobenius norm of P' + A'P + PA + Q at interior grid points.

    P' is a 4th-order finite difference on the grid: an oracle independent of
    the backward integration that produced P.
    """
    from .transverse import grid_derivative

    worst = 0.0
    for si, taus in enumerate(pq.taus):
        h = taus[1] - taus[0]
        dP = grid_derivative(pq.P[si], h)
        for j in range(len(taus)):
            A = ltv.A_at(si, taus[j])
            R = dP[j] + A.T @ pq.P[si][j] + pq.P[si][j] @ A + pq.Q
            worst = max(worst, float(np.linalg.norm(R)))
    return worst


# -- jump Riccati ------------------------------------------------------------------


def jump_riccati(
    ltv: TransverseLTV,
    Q=1.0,
    Qi=1.0,
    R=1.0,
    max_cycles: int = 400,
    tol: float = 1e-8,
):
    """SPPD solution of the jump-Riccati equation and the transverse LQR gain.

    -P' = A'P + PA - P B R^-1 B' P + Q between impacts,
    P(tau_i-) = A_d' P(tau_i+) A_d + Qi at impacts, K = R^-1 B' P.

    The backward sweep is iterated over periods until successive cycle-start
    values agree to ``tol``; failure to converge signals a non-stabilizable
    transverse pair.
    """
    k = ltv.n - 1
    m = ltv.m
    if m == 0:
        raise LyapError("model has no inputs")
    Q = _as_weight(Q, k, "Q", definite=True)
    R = _as_weight(R, m, "R", definite=True)
    has_impacts = len(ltv.A_d) > 0
    Qi_m = _as_weight(Qi, k, "Qi", definite=True) if has_impacts else None
    Rinv = np.linalg.inv(R)

    def backward_riccati_segment(si, P_end, refine):
        taus = _refined(ltv.taus[si], refine)

        def rhs(t, P):
            A = ltv.A_at(si, t)
            B = ltv.B_at(si, t)
            return -(A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q)

        P_grid = _rk4_backward(rhs, taus, P_end)
        if not np.all(np.isfinite(P_grid)):
            raise NoConvergence("Riccati sweep blew up (transverse pair not stabilizable)")
        return taus, P_grid

    P0 = Q.copy()
    P_segments: list = [None] * len(ltv.taus)
    taus_ref: list = [None] * len(ltv.taus)
    refine = 8
    for cycle in range(max_cycles):
        # converge the boundary value on the coarse grid, refine on the last pass
        P_plus = P0
        for si in range(len(ltv.taus) - 1, -1, -1):
            if si < len(ltv.A_d):
                A_d = ltv.A_d[si]
                P_end = A_d.T @ P_plus @ A_d + Qi_m
            else:
                P_end = P_plus
            taus_ref[si], P_segments[si] = backward_riccati_segment(si, P_end, refine)
            P_plus = P_segments[si][0]
        drift = float(np.linalg.norm(P_plus - P0))
        P0 = P_plus
        if not np.all(np.isfinite(P0)) or np.linalg.norm(P0) > 1e12:
            raise NoConvergence("Riccati sweep diverged (transverse pair not stabilizable)")
        if drift <= tol:
            break
    else:
        raise NoConvergence(
            f"Riccati periodic sweep did not reach {tol:.1e} in {max_cycles} cycles"
        )

    pq = PeriodicQuadratic(T=ltv.T, taus=taus_ref, P=P_segments, Q=Q, Qi=Qi_m, R=R)
    K_segments = []
    for si, taus in enumerate(pq.taus):
        Kseg = np.zeros((len(taus), m, k))
        for j in range(len(taus)):
            Kseg[j] = Rinv @ ltv.B_at(si, taus[j]).T @ pq.P[si][j]
        K_segments.append(Kseg)
    gain = FeedbackGain(T=ltv.T, taus=[t.copy() for t in pq.taus], K=K_segments)

    rho = closed_loop_spectral_radius(ltv, gain)
    if rho >= 1.0:
        raise NoConvergence(f"closed-loop spectral radius {rho:.4f} >= 1 after LQR design")
    return pq, gain


def closed_loop_gain_ltv(ltv: TransverseLTV, gain: FeedbackGain) -> TransverseLTV:
    """LTV of the closed loop: A - B K on the grid, impacts unchanged."""
    A_cl = []
    for si in range(len(ltv.taus)):
        A = ltv.A[si].copy()
        for j, tau in enumerate(ltv.taus[si]):
            A[j] = A[j] - ltv.B[si][j] @ gain.K_at(tau, si)
        A_cl.append(A)
    return TransverseLTV(
        n=ltv.n,
        m=ltv.m,
        T=ltv.T,
        taus=[t.copy() for t in ltv.taus],
        A=A_cl,
        B=[np.zeros_like(B) for B in ltv.B],
        A_d=[M.copy() for M in ltv.A_d],
        phases=list(ltv.phases),
    )


def closed_loop_spectral_radius(ltv: TransverseLTV, gain: FeedbackGain) -> float:
    Psi = transverse_monodromy(closed_loop_gain_ltv(ltv, gain))
    return float(np.max(np.abs(np.linalg.eigvals(Psi))))


# -- level bisection ---------------------------------------------------------------


def bisect_level(
    verifier,
    rho_min: float = 1e-8,
    rho_max: float = 1e4,
    rel_width: float = 0.01,
) -> float:
    """Largest verified level in [rho_min, rho_max], to 1% relative width.

    ``verifier(rho) -> bool`` is probed by bisection on the geometric mean;
    the result is the largest rho observed to pass.  Raises when even
    rho_min fails.
    """
    if not verifier(rho_min):
        raise LyapError(f"verifier fails at rho_min = {rho_min:g}")
    if verifier(rho_max):
        return rho_max
    lo, hi = rho_min, rho_max
    while (hi - lo) > rel_width * lo:
        mid = math.sqrt(lo * hi)
        if verifier(mid):
            lo = mid
        else:
            hi = mid
    return lo


# -- serialization -----------------------------------------------------------------


def quadratic_to_json(pq: PeriodicQuadratic) -> dict:
    def tri(M):
        k = M.shape[0]
        return [[M[i][j] for j in range(i + 1)] for i in range(k)]

    return {
        "T": pq.T,
        "Q": pq.Q.tolist(),
        "Qi": None if pq.Qi is None else pq.Qi.tolist(),
        "R": None if pq.R is None else pq.R.tolist(),
        "segments": [
            {"tau": t.tolist(), "P_lower": [tri(P) for P in Pseg]}
            for t, Pseg in zip(pq.taus, pq.P)
        ],
    }


def quadratic_from_json(obj: dict) -> PeriodicQuadratic:
    taus, Ps = [], []
    for s in obj["segments"]:
        t = np.asarray(s["tau"], dtype=float)
        k = len(s["P_lower"][0])
        Pseg = np.zeros((len(t), k, k))
        for idx, tri in enumerate(s["P_lower"]):
            for i in range(k):
                for j in range(i + 1):
                    Pseg[idx, i, j] = tri[i][j]
                    Pseg[idx, j, i] = tri[i][j]
        taus.append(t)
        Ps.append(Pseg)
    return PeriodicQuadratic(
        T=float(obj["T"]),
        taus=taus,
        P=Ps,
        Q=np.asarray(obj["Q"], dtype=float),
        Qi=None if obj["Qi"] is None else np.asarray(obj["Qi"], dtype=float),
        R=None if obj["R"] is None else np.asarray(obj["R"], dtype=float),
    )


def gain_to_json(gain: FeedbackGain) -> dict:
    return {
        "T": gain.T,
        "segments": [
            {"tau": t.tolist(), "K": Kseg.tolist()} for t, Kseg in zip(gain.taus, gain.K)
        ],
    }


def gain_from_json(obj: dict) -> FeedbackGain:
    taus = [np.asarray(s["tau"], dtype=float) for s in obj["segments"]]
    Ks = [np.asarray(s["K"], dtype=float) for s in obj["segments"]]
    return FeedbackGain(T=float(obj["T"]), taus=taus, K=Ks)
