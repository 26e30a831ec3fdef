"""Transversal surface families, moving bases, and transverse dynamics.

Builds the family of hyperplanes S(tau) = {y : z(tau).(y - x*(tau)) = 0}
along a periodic orbit, the rotating orthonormal basis Pi(tau) on each
hyperplane, the exact nonlinear dynamics of (x_perp, tau), their
linearization (A, B, A_d), and the coordinate maps between x and
(x_perp, tau).  For hybrid orbits the surfaces at impact times are aligned
with the switching planes, carried as distinct grid points tau_i- / tau_i+.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import hybridmodel as hm
from . import polyalg as pa
from .hybridmodel import HybridModel
from .odeflow import PeriodicOrbit
from .polyalg import Polynomial, PolynomialVector

ORTHO_TOL = 1e-10  # Pi z = 0 and Pi Pi' = I must hold to this accuracy
ALIGN_TOL = 1e-9
W_MARGIN = 1e-3  # min over the grid of 1 - |w'z|
DEFAULT_BLEND_FRACTION = 0.15


class SurfaceError(ValueError):
    """Transversality, alignment or basis construction failure."""


class CoordinateBreakdown(RuntimeError):
    """The tau-dot denominator is non-positive: outside the well-posed tube."""


def build_basis(z, w=None, eta=None) -> np.ndarray:
    """Rows xi_2'..xi_n' of the moving basis orthogonal to ``z``.

    For n = 2 the planar rule [-z2, z1] is used and ``w`` is ignored.  For
    n >= 3 the basis comes from rotating a fixed orthonormal frame (first
    element w) in the plane spanned by w and z:

        xi_j = eta_j - (eta_j . z) / (1 + eta_1 . z) * (eta_1 + z).
    """
    z = np.asarray(z, dtype=float).ravel()
    n = z.shape[0]
    if n == 2:
        return np.array([[-z[1], z[0]]])
    if w is None:
        raise SurfaceError("basis for n >= 3 needs the seed vector w")
    if eta is None:
        eta = frame_from_w(w)
    denom = 1.0 + float(eta[0] @ z)
    if denom <= 1e-8:
        raise SurfaceError("w is (numerically) antipodal to z; rotation undefined")
    corr = (eta[0] + z) / denom
    rows = [eta[j] - float(eta[j] @ z) * corr for j in range(1, n)]
    return np.array(rows)


def frame_from_w(w) -> np.ndarray:
    """Deterministic orthonormal frame with first row w (Householder image of I)."""
    w = np.asarray(w, dtype=float).ravel()
    n = w.shape[0]
    e1 = np.zeros(n)
    e1[0] = 1.0
    v = e1 - w
    nv = np.linalg.norm(v)
    if nv < 1e-14:
        return np.eye(n)
    v = v / nv
    H = np.eye(n) - 2.0 * np.outer(v, v)
    return H.T  # rows H e_j; first row is w


def pick_w(z_grid, seed: int = 0, margin: float = W_MARGIN, max_draws: int = 10_000) -> np.ndarray:
    """Random unit vector never near +-z on the grid; seeded and reproducible."""
    Z = np.atleast_2d(np.asarray(z_grid, dtype=float))
    n = Z.shape[1]
    if n < 3:
        raise SurfaceError("pick_w applies to n >= 3 (planar systems use the explicit rule)")
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        w = rng.normal(size=n)
        w /= np.linalg.norm(w)
        if np.min(1.0 - np.abs(Z @ w)) >= margin:
            return w
    raise SurfaceError(f"no admissible w after {max_draws} draws: degenerate z grid")


# -- finite differences on a uniform grid ---------------------------------------


def grid_derivative(values: np.ndarray, h: float) -> np.ndarray:
    """d/dtau along axis 0: 4th-order centered interior, one-sided at the ends."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    K = v.shape[0]
    if K < 5:
        # fall back to 2nd order on tiny grids
        out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
        out[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
        out[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h)
        return out
    out[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    # 4th-order one-sided stencils at and next to the boundary
    c0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / (12 * h)
    c1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / (12 * h)
    out[0] = np.tensordot(c0, v[:5], axes=(0, 0))
    out[1] = np.tensordot(c1, v[:5], axes=(0, 0))
    out[-1] = -np.tensordot(c0, v[-5:][::-1], axes=(0, 0))
    out[-2] = -np.tensordot(c1, v[-5:][::-1], axes=(0, 0))
    return out


# -- surface family ---------------------------------------------------------------


@dataclass
class FamilySegment:
    phase: int
    taus: np.ndarray  # (K,)
    z: np.ndarray  # (K, n)
    dz: np.ndarray  # (K, n)
    Pi: np.ndarray  # (K, n-1, n)
    dPi: np.ndarray  # (K, n-1, n)
    xs: np.ndarray  # (K, n) orbit states at the grid
    fs: np.ndarray  # (K, n) field values on the orbit
    us: np.ndarray  # (K, m)

    def locate(self, tau: float) -> int:
        return int(np.clip(np.searchsorted(self.taus, tau, side="right") - 1, 0, len(self.taus) - 2))


@dataclass
class SurfaceFamily:
    """z(tau), Pi(tau) and their grid derivatives along the orbit."""

    n: int
    m: int
    T: float
    z_spec: str
    segments: list
    w: np.ndarray | None
    delta: float  # min over the grid of z'f (transversality margin)

    def segment_index(self, tau: float) -> int:
        for k, seg in enumerate(self.segments):
            if seg.taus[0] <= tau <= seg.taus[-1]:
                return k
        return len(self.segments) - 1

    def wrap(self, tau: float) -> float:
        # tau = T is kept distinct from tau = 0: the pre- and post-impact
        # surfaces at the period boundary carry different data
        if tau == self.T:
            return tau
        t = math.fmod(tau, self.T)
        return t + self.T if t < 0 else t

    def z_at(self, tau: float, seg_idx: int | None = None) -> np.ndarray:
        tau = self.wrap(tau)
        seg = self.segments[self.segment_index(tau) if seg_idx is None else seg_idx]
        j = seg.locate(tau)
        t0, t1 = seg.taus[j], seg.taus[j + 1]
        wgt = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
        z = (1 - wgt) * seg.z[j] + wgt * seg.z[j + 1]
        nz = np.linalg.norm(z)
        if nz < 0.5:
            raise SurfaceError("z interpolation degenerate (adjacent normals nearly antipodal)")
        return z / nz

    def dz_at(self, tau: float, seg_idx: int | None = None) -> np.ndarray:
        tau = self.wrap(tau)
        seg = self.segments[self.segment_index(tau) if seg_idx is None else seg_idx]
        j = seg.locate(tau)
        t0, t1 = seg.taus[j], seg.taus[j + 1]
        wgt = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
        return (1 - wgt) * seg.dz[j] + wgt * seg.dz[j + 1]

    def Pi_at(self, tau: float, seg_idx: int | None = None) -> np.ndarray:
        # rebuilt from z via the deterministic formula: exactly orthonormal
        return build_basis(self.z_at(tau, seg_idx), self.w)

    def grid_pairs(self):
        """(segment, index) pairs in tau order over the whole period."""
        for k, seg in enumerate(self.segments):
            for j in range(len(seg.taus)):
                yield k, j


def _check_family_invariants(fam: SurfaceFamily, model: HybridModel, delta_min: float) -> None:
    for seg in fam.segments:
        norms = np.linalg.norm(seg.z, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise SurfaceError("z grid is not unit length")
        zf = np.einsum("ki,ki->k", seg.z, seg.fs)
        if np.min(zf) <= delta_min:
            raise SurfaceError(
                f"transversality violation: min z'f = {np.min(zf):.3e} <= {delta_min:.3e}"
            )
        for j in range(len(seg.taus)):
            P = seg.Pi[j]
            if np.max(np.abs(P @ seg.z[j])) > ORTHO_TOL:
                raise SurfaceError("Pi z != 0 on the grid")
            if np.max(np.abs(P @ P.T - np.eye(fam.n - 1))) > ORTHO_TOL:
                raise SurfaceError("Pi Pi' != I on the grid")
        if fam.w is not None:
            if np.min(1.0 - np.abs(seg.z @ fam.w)) < W_MARGIN * 0.5:
                raise SurfaceError("w too close to +-z on the grid")
    # alignment at impacts: end of segment k pairs with start of segment k+1
    phases = [model.phases[seg.phase] for seg in fam.segments]
    for k, seg in enumerate(fam.segments):
        ph = phases[k]
        if ph.surface is None:
            continue
        c_minus = ph.surface.c_minus / np.linalg.norm(ph.surface.c_minus)
        if 1.0 - abs(float(seg.z[-1] @ c_minus)) > ALIGN_TOL:
            raise SurfaceError(
                f"alignment violation: z(tau_{k}^-) is not parallel to c_minus "
                "(use a blended or optimized z for hybrid models)"
            )
        nxt = fam.segments[(k + 1) % len(fam.segments)]
        c_plus = ph.surface.c_plus / np.linalg.norm(ph.surface.c_plus)
        if 1.0 - abs(float(nxt.z[0] @ c_plus)) > ALIGN_TOL:
            raise SurfaceError(f"alignment violation: z(tau_{k}^+) is not parallel to c_plus")


def _bump(s: float) -> float:
    """C-infinity ramp: 1 at s=0, 0 for s>=1, all derivatives vanish at s=1."""
    if s <= 0.0:
        return 1.0
    if s >= 1.0:
        return 0.0
    return math.exp(-(s * s) / (1.0 - s * s))


def _blend_to_targets(taus, z_orth, z_start, z_end, fraction):
    """Smooth blend of the orthogonal grid into exact endpoint targets.

    The ramp is C-infinity at the inner joins so the downstream transverse
    linearization stays smooth there (kinks in z propagate into A(tau) and
    defeat the finite-difference residual oracle of the Lyapunov solver).
    """
    a, b = taus[0], taus[-1]
    h = fraction * (b - a)
    out = np.array(z_orth, dtype=float)
    for j, t in enumerate(taus):
        mu_a = _bump((t - a) / h) if z_start is not None else 0.0
        mu_b = _bump((b - t) / h) if z_end is not None else 0.0
        v = (1.0 - mu_a - mu_b) * z_orth[j]
        if z_start is not None:
            v = v + mu_a * z_start
        if z_end is not None:
            v = v + mu_b * z_end
        nv = np.linalg.norm(v)
        if nv < 0.1:
            raise SurfaceError("blend degenerated: impact normal nearly opposes the flow direction")
        out[j] = v / nv
    return out


def make_surfaces(
    orbit: PeriodicOrbit,
    model: HybridModel,
    z_spec="auto",
    w=None,
    seed: int = 0,
    delta_min: float | None = None,
    blend_fraction: float = DEFAULT_BLEND_FRACTION,
) -> SurfaceFamily:
    """Construct the surface family on the orbit's knot grid.

    ``z_spec`` is "orthogonal" (z = f/|f|; rejected on hybrid models whose
    impact normals do not line up), "blend" (orthogonal in the interior,
    rotated into the switching-plane normals at impacts), "auto" (orthogonal
    for continuous models, blend for hybrid ones), or an explicit list of
    per-segment z grids matching the orbit knots.
    """
    n, m = model.n, model.m
    if n < 2:
        raise SurfaceError("transverse coordinates need n >= 2")
    hybrid = model.is_hybrid
    if z_spec == "auto":
        z_spec = "blend" if hybrid else "orthogonal"

    seg_z = []
    for k, seg in enumerate(orbit.segments):
        fnorm = np.linalg.norm(seg.fs, axis=1)
        z_orth = seg.fs / fnorm[:, None]
        if isinstance(z_spec, str) and z_spec in ("orthogonal", "blend"):
            if z_spec == "orthogonal" or not hybrid:
                seg_z.append(z_orth)
            else:
                ph = model.phases[seg.phase]
                prev_ph = model.phases[orbit.segments[k - 1].phase]
                z_end = None
                if ph.surface is not None:
                    c = ph.surface.c_minus / np.linalg.norm(ph.surface.c_minus)
                    z_end = c if float(c @ seg.fs[-1]) > 0 else -c
                z_start = None
                if prev_ph.surface is not None:
                    c = prev_ph.surface.c_plus / np.linalg.norm(prev_ph.surface.c_plus)
                    z_start = c if float(c @ seg.fs[0]) > 0 else -c
                seg_z.append(_blend_to_targets(seg.ts, z_orth, z_start, z_end, blend_fraction))
        else:
            grid = np.asarray(z_spec[k], dtype=float)
            if grid.shape != seg.xs.shape:
                raise SurfaceError(
                    f"explicit z grid for segment {k} has shape {grid.shape}, "
                    f"expected {seg.xs.shape}"
                )
            norms = np.linalg.norm(grid, axis=1)
            seg_z.append(grid / norms[:, None])

    if n >= 3 and w is None:
        w = pick_w(np.vstack(seg_z), seed=seed)
    w = None if n == 2 else np.asarray(w, dtype=float)

    segments = []
    for seg, zg in zip(orbit.segments, seg_z):
        h = seg.ts[1] - seg.ts[0]
        dz = grid_derivative(zg, h)
        Pi = np.array([build_basis(zg[j], w) for j in range(len(seg.ts))])
        dPi = grid_derivative(Pi, h)
        segments.append(
            FamilySegment(
                phase=seg.phase,
                taus=seg.ts.copy(),
                z=zg,
                dz=dz,
                Pi=Pi,
                dPi=dPi,
                xs=seg.xs.copy(),
                fs=seg.fs.copy(),
                us=seg.us.copy(),
            )
        )
    min_f = min(float(np.min(np.linalg.norm(seg.fs, axis=1))) for seg in orbit.segments)
    if delta_min is None:
        delta_min = 1e-3 * min_f
    delta = min(
        float(np.min(np.einsum("ki,ki->k", seg.z, seg.fs))) for seg in segments
    )
    fam = SurfaceFamily(
        n=n,
        m=m,
        T=orbit.T,
        z_spec=z_spec if isinstance(z_spec, str) else "explicit",
        segments=segments,
        w=w,
        delta=delta,
    )
    _check_family_invariants(fam, model, delta_min)
    return fam


# -- coordinate maps -----------------------------------------------------------


def tau_project(
    fam: SurfaceFamily,
    orbit: PeriodicOrbit,
    x,
    tau_hint: float,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> float:
    """Solve z(tau).(x - x*(tau)) = 0 by safeguarded Newton near ``tau_hint``."""
    x = np.asarray(x, dtype=float).ravel()
    tau = fam.wrap(tau_hint)
    si = fam.segment_index(tau)
    seg = fam.segments[si]

    def resid(t):
        z = fam.z_at(t, si)
        return float(z @ (x - orbit.interp(t)))

    lo, hi = seg.taus[0], seg.taus[-1]
    r = resid(tau)
    for _ in range(max_iter):
        if abs(r) <= tol:
            out = fam.wrap(tau)
            return out if out < fam.T else 0.0
        z = fam.z_at(tau, si)
        dz = fam.dz_at(tau, si)
        xs = orbit.interp(tau)
        j = seg.locate(tau)
        f = seg.fs[j]  # slope accuracy only affects the Newton rate
        drdt = float(dz @ (x - xs)) - float(z @ f)
        if drdt == 0.0:
            break
        step = -r / drdt
        t_new = float(np.clip(tau + step, lo, hi))
        r_new = resid(t_new)
        k = 0
        while abs(r_new) >= abs(r) and k < 40:
            t_new = 0.5 * (t_new + tau)
            r_new = resid(t_new)
            k += 1
        if k >= 40:
            break
        tau, r = t_new, r_new
    raise CoordinateBreakdown(
        f"tau projection did not converge near hint {tau_hint:.6f} (residual {r:.2e})"
    )


def to_transverse(fam: SurfaceFamily, orbit: PeriodicOrbit, x, tau_hint: float):
    """Map x -> (x_perp, tau) with tau from the surface-membership equation."""
    tau = tau_project(fam, orbit, x, tau_hint)
    Pi = fam.Pi_at(tau)
    x_perp = Pi @ (np.asarray(x, dtype=float) - orbit.interp(tau))
    return x_perp, tau


def from_transverse(fam: SurfaceFamily, orbit: PeriodicOrbit, x_perp, tau: float) -> np.ndarray:
    tau = fam.wrap(tau)
    return orbit.interp(tau) + fam.Pi_at(tau).T @ np.asarray(x_perp, dtype=float)


# -- exact transverse dynamics ---------------------------------------------------


def _grid_data(fam: SurfaceFamily, seg_idx: int, j: int):
    seg = fam.segments[seg_idx]
    return seg.z[j], seg.dz[j], seg.Pi[j], seg.dPi[j], seg.xs[j], seg.fs[j], seg.us[j]


def transverse_rhs(
    fam: SurfaceFamily,
    orbit: PeriodicOrbit,
    model: HybridModel,
    x_perp,
    tau: float,
    seg_idx: int | None = None,
    gain=None,
):
    """Exact (x_perp-dot, tau-dot, numerator, denominator) at (x_perp, tau).

    x_perp-dot = tau-dot [dPi/dtau] Pi' x_perp + Pi f(x* + Pi' x_perp)
                 - Pi f(x*) tau-dot,
    tau-dot    = z'f(x* + Pi' x_perp) / (z'f(x*) - dz'Pi' x_perp).

    Numerator and denominator of tau-dot are returned separately.  With
    ``gain`` K given, the input is u = u* - K x_perp (transverse feedback).
    """
    x_perp = np.asarray(x_perp, dtype=float).ravel()
    if seg_idx is None:
        tau = fam.wrap(tau)
        si = fam.segment_index(tau)
    else:
        si = seg_idx
    seg = fam.segments[si]
    tau = float(np.clip(tau, seg.taus[0], seg.taus[-1]))
    z = fam.z_at(tau, si)
    dz = fam.dz_at(tau, si)
    Pi = build_basis(z, fam.w)
    xs = orbit.interp(tau)
    j = seg.locate(tau)
    t0, t1 = seg.taus[j], seg.taus[j + 1]
    wgt = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
    us = (1 - wgt) * seg.us[j] + wgt * seg.us[j + 1]
    u_star = us if model.m else None
    fs = hm.eval_field(model, seg.phase, xs, u_star)
    y = xs + Pi.T @ x_perp
    u = None
    if model.m:
        u = us - (gain @ x_perp if gain is not None else 0.0)
    f_y = hm.eval_field(model, seg.phase, y, u)
    n_val = float(z @ f_y)
    d_val = float(z @ fs) - float(dz @ (Pi.T @ x_perp))
    if d_val <= 0.0:
        raise CoordinateBreakdown(f"tau-dot denominator {d_val:.3e} <= 0 at tau={tau:.6f}")
    tau_dot = n_val / d_val
    if fam.n == 2:
        first = np.zeros(1)
    else:
        dPi = (1 - wgt) * seg.dPi[j] + wgt * seg.dPi[j + 1]
        first = tau_dot * (dPi @ (Pi.T @ x_perp))
    xp_dot = first + Pi @ f_y - (Pi @ fs) * tau_dot
    return xp_dot, tau_dot, n_val, d_val


@dataclass
class TransverseLTV:
    """Transverse linearization: A(tau), B(tau) per segment, A_d per impact.

    Off-grid values come from C2 cubic-spline interpolation: the periodic
    Lyapunov/Riccati sweeps need a twice-differentiable A(tau) or the
    finite-difference residual oracle stalls at the interpolation kinks.
    """

    n: int
    m: int
    T: float
    taus: list  # per segment
    A: list  # per segment: (K, n-1, n-1)
    B: list  # per segment: (K, n-1, m)
    A_d: list  # per impact: (n-1, n-1)
    phases: list

    def __post_init__(self):
        self._A_sp: dict = {}
        self._B_sp: dict = {}

    def _interp(self, cache, grids, seg_idx, tau):
        taus = self.taus[seg_idx]
        if len(taus) >= 4:
            if seg_idx not in cache:
                from scipy.interpolate import CubicSpline

                cache[seg_idx] = CubicSpline(taus, grids[seg_idx], axis=0)
            return cache[seg_idx](tau)
        j = int(np.clip(np.searchsorted(taus, tau, side="right") - 1, 0, len(taus) - 2))
        t0, t1 = taus[j], taus[j + 1]
        wgt = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
        return (1 - wgt) * grids[seg_idx][j] + wgt * grids[seg_idx][j + 1]

    def A_at(self, seg_idx: int, tau: float) -> np.ndarray:
        return self._interp(self._A_sp, self.A, seg_idx, tau)

    def B_at(self, seg_idx: int, tau: float) -> np.ndarray:
        return self._interp(self._B_sp, self.B, seg_idx, tau)


def transverse_linearization(
    fam: SurfaceFamily, orbit: PeriodicOrbit, model: HybridModel
) -> TransverseLTV:
    """Closed-form A(tau) (and B(tau) for m > 0) on the grid, plus impact maps.

    A = [dPi/dtau] Pi' + Pi (df/dx) Pi' - Pi f(x*) (z'(df/dx)Pi' + dz'Pi')/(z'f);
    the first term is identically zero for planar systems, and Pi f(x*) = 0
    for orthogonal surfaces, reproducing the standard simplifications.
    """
    n, m = fam.n, fam.m
    A_all, B_all, taus_all, phases = [], [], [], []
    for si, seg in enumerate(fam.segments):
        K = len(seg.taus)
        A = np.zeros((K, n - 1, n - 1))
        B = np.zeros((K, n - 1, m))
        for j in range(K):
            z, dz, Pi, dPi, xs, fs, us = _grid_data(fam, si, j)
            Jx, Ju = hm.field_jacobian(model, seg.phase, xs, us if m else None)
            zf = float(z @ fs)
            dtau_dxp = (z @ Jx @ Pi.T + dz @ Pi.T) / zf
            first = np.zeros((n - 1, n - 1)) if n == 2 else dPi @ Pi.T
            A[j] = first + Pi @ Jx @ Pi.T - np.outer(Pi @ fs, dtau_dxp)
            if m:
                dtau_du = (z @ Ju) / zf
                B[j] = Pi @ Ju - np.outer(Pi @ fs, dtau_du)
        A_all.append(A)
        B_all.append(B)
        taus_all.append(seg.taus.copy())
        phases.append(seg.phase)
    A_d = [impact_linearization(fam, orbit, model, i) for i in range(len(orbit.impacts))]
    return TransverseLTV(
        n=n, m=m, T=fam.T, taus=taus_all, A=A_all, B=B_all, A_d=A_d, phases=phases
    )


def _impact_frames(fam: SurfaceFamily, i: int):
    """(Pi-, x*-, Pi+, x*+) for impact i = end of segment i."""
    seg_minus = fam.segments[i]
    seg_plus = fam.segments[(i + 1) % len(fam.segments)]
    return seg_minus.Pi[-1], seg_minus.xs[-1], seg_plus.Pi[0], seg_plus.xs[0]


def impact_update(fam: SurfaceFamily, orbit: PeriodicOrbit, model: HybridModel, x_perp_minus, i: int):
    """Exact transverse jump x_perp+ = Pi+ [Delta(x*- + Pi-' x_perp-) - x*+]."""
    Pi_m, xs_m, Pi_p, xs_p = _impact_frames(fam, i)
    phase = orbit.impacts[i].phase
    delta = model.phases[phase].delta
    y = xs_m + Pi_m.T @ np.asarray(x_perp_minus, dtype=float)
    return Pi_p @ (delta.evaluate(y) - xs_p)


def impact_linearization(fam: SurfaceFamily, orbit: PeriodicOrbit, model: HybridModel, i: int):
    """A_d = Pi+ (dDelta/dx) Pi-' at the orbit's pre-impact point."""
    Pi_m, xs_m, Pi_p, _ = _impact_frames(fam, i)
    phase = orbit.impacts[i].phase
    D = model.phases[phase].delta.jacobian_at(xs_m)
    return Pi_p @ D @ Pi_m.T


def transverse_monodromy(ltv: TransverseLTV, rtol: float = 1e-10, atol: float = 1e-12):
    """Monodromy of the impulsive LTV: transition through A(tau), A_d at impacts."""
    from scipy.integrate import solve_ivp

    k = ltv.n - 1
    Psi = np.eye(k)
    for si in range(len(ltv.taus)):
        t0, t1 = ltv.taus[si][0], ltv.taus[si][-1]

        def rhs(t, y, si=si):
            return (ltv.A_at(si, t) @ y.reshape(k, k)).ravel()

        sol = solve_ivp(rhs, (t0, t1), np.eye(k).ravel(), method="DOP853", rtol=rtol, atol=atol)
        Phi = sol.y[:, -1].reshape(k, k)
        Psi = Phi @ Psi
        if si < len(ltv.A_d):
            Psi = ltv.A_d[si] @ Psi
    return Psi


# -- per-sample polynomial data for the SoS layer --------------------------------


@dataclass
class TauSampleData:
    """Everything the SoS conditions need at one tau sample, as polynomials in x_perp.

    ``numer``/``denom`` are n(x_perp), d(x_perp) of tau-dot; ``bracket`` is the
    vector multiplying dV/dx_perp in the denominator-cleared derivative:
    n [dPi/dtau]Pi' x_perp + d Pi f(x* + Pi' x_perp) - Pi f(x*) n.
    """

    tau: float
    seg_idx: int
    grid_idx: int
    nvars: int
    numer: Polynomial
    denom: Polynomial
    bracket: tuple
    zf_star: float
    taylor_degree: int | None


def tau_sample_data(
    fam: SurfaceFamily,
    orbit: PeriodicOrbit,
    model: HybridModel,
    seg_idx: int,
    grid_idx: int,
    taylor_degree: int = 5,
    gain=None,
) -> TauSampleData:
    """Build the x_perp-polynomials of the transverse dynamics at one grid point.

    Non-polynomial fields are Taylor-polynomialized about (x*(tau), u*(tau)) to
    ``taylor_degree``.  With ``gain`` K, the affine feedback u = u* - K x_perp
    is substituted, so the result describes the closed loop at this sample.
    """
    seg = fam.segments[seg_idx]
    z, dz, Pi, dPi, xs, fs, us = _grid_data(fam, seg_idx, grid_idx)
    n, m = fam.n, fam.m
    k = n - 1
    center = np.concatenate([xs, us]) if m else xs
    fpoly = hm.phase_field_polynomial(model, seg.phase, center, taylor_degree)
    used_taylor = taylor_degree if model.phases[seg.phase].atoms else None
    # substitution [x; u] = [x* + Pi' xp; u* - K xp]
    M = Pi.T
    b = xs
    if m:
        Kmat = np.zeros((m, k)) if gain is None else np.asarray(gain, dtype=float)
        M = np.vstack([Pi.T, -Kmat])
        b = np.concatenate([xs, us])
    f_sub = fpoly.substitute_affine(M, b)

    numer = pa.dot(z, f_sub.components)
    zf_star = float(z @ fs)
    denom = Polynomial.from_linear(-(dz @ Pi.T), zf_star)
    Pif_sub = [pa.dot(Pi[j], f_sub.components) for j in range(k)]
    Pif_star = Pi @ fs
    dPiPiT = np.zeros((k, k)) if n == 2 else dPi @ Pi.T
    bracket = []
    for j in range(k):
        lin = Polynomial.from_linear(dPiPiT[j], 0.0)
        term = pa.mul(numer, lin) if n > 2 else Polynomial.zero(k)
        term = pa.add(term, pa.mul(denom, Pif_sub[j]))
        term = pa.add(term, numer.scale(-float(Pif_star[j])))
        bracket.append(term)
    return TauSampleData(
        tau=float(seg.taus[grid_idx]),
        seg_idx=seg_idx,
        grid_idx=grid_idx,
        nvars=k,
        numer=numer,
        denom=denom,
        bracket=tuple(bracket),
        zf_star=zf_star,
        taylor_degree=used_taylor,
    )


# -- JSON dump -----------------------------------------------------------------


def family_to_json(fam: SurfaceFamily) -> dict:
    return {
        "n": fam.n,
        "m": fam.m,
        "T": fam.T,
        "z_spec": fam.z_spec,
        "delta": fam.delta,
        "w": None if fam.w is None else fam.w.tolist(),
        "segments": [
            {
                "phase": seg.phase,
                "tau": seg.taus.tolist(),
                "z": seg.z.tolist(),
                "dz": seg.dz.tolist(),
                "Pi": seg.Pi.tolist(),
                "dPi": seg.dPi.tolist(),
                "x": seg.xs.tolist(),
                "f": seg.fs.tolist(),
                "u": seg.us.tolist(),
            }
            for seg in fam.segments
        ],
    }


def family_from_json(obj: dict) -> SurfaceFamily:
    segments = []
    for s in obj["segments"]:
        K = len(s["tau"])
        segments.append(
            FamilySegment(
                phase=int(s["phase"]),
                taus=np.asarray(s["tau"], dtype=float),
                z=np.asarray(s["z"], dtype=float),
                dz=np.asarray(s["dz"], dtype=float),
                Pi=np.asarray(s["Pi"], dtype=float),
                dPi=np.asarray(s["dPi"], dtype=float),
                xs=np.asarray(s["x"], dtype=float),
                fs=np.asarray(s["f"], dtype=float),
                us=np.asarray(s["u"], dtype=float).reshape(K, -1),
            )
        )
    return SurfaceFamily(
        n=int(obj["n"]),
        m=int(obj["m"]),
        T=float(obj["T"]),
        z_spec=str(obj["z_spec"]),
        segments=segments,
        w=None if obj["w"] is None else np.asarray(obj["w"], dtype=float),
        delta=float(obj["delta"]),
    )


def save_family(fam: SurfaceFamily, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(family_to_json(fam), fh, indent=2)
        fh.write("\n")


def load_family(path: str) -> SurfaceFamily:
    with open(path, "r", encoding="utf-8") as fh:
        return family_from_json(json.load(fh))
