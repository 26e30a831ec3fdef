"""Numerical flows of hybrid models: event-aware integration, periodic-orbit
refinement by shooting, and monodromy/Floquet computation.

Integration is backed by scipy's DOP853 with surface crossings localized by
the solver's root finder and accepted only where the guard is nonnegative.
Orbits store a fixed knot grid with states and field values per continuous
segment; the dense interpolant is cubic Hermite on that grid, so an orbit
reloaded from JSON reproduces exactly the same interpolant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from . import hybridmodel as hm
from .hybridmodel import HybridModel

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12
EVENT_TOL = 1e-10
MAX_IMPACTS = 10_000
GRAZE_REL = 1e-6  # non-grazing threshold, relative to |f|
DEFAULT_KNOTS = 1024  # Hermite intervals per continuous segment


class FlowError(RuntimeError):
    """Integration failure: non-finite state, step underflow, or impact overflow."""


class OrbitError(RuntimeError):
    """Shooting did not converge or the refined orbit violates an invariant."""


@dataclass
class ImpactRecord:
    time: float
    phase: int
    x_pre: np.ndarray
    x_post: np.ndarray


@dataclass
class FlowResult:
    """Outcome of one (possibly multi-phase) integration run."""

    t_final: float
    x_final: np.ndarray
    phase_final: int
    event: int | None  # phase index whose exit surface stopped integration
    ts: np.ndarray
    xs: np.ndarray
    phases: np.ndarray  # phase index per sample
    impacts: list = field(default_factory=list)


def _rhs(model: HybridModel, phase: int, feedback):
    f = hm.compile_field(model, phase)
    if model.m == 0:
        return lambda t, x: f(x)
    if feedback is None:
        zeros = np.zeros(model.m)
        return lambda t, x: f(np.concatenate([x, zeros]))
    return lambda t, x: f(np.concatenate([x, np.atleast_1d(feedback(x))]))


def integrate(
    model: HybridModel,
    phase: int,
    x0,
    t_span,
    feedback=None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    t_eval=None,
) -> FlowResult:
    """Flow one continuous phase until the surface is hit or time runs out.

    ``t_span`` is either a duration or a (t0, tf) pair.  A surface crossing is
    localized to |c.x - d| <= 1e-10 and accepted only when the guard g >= 0;
    rejected crossings are stepped over and integration continues.
    """
    t0, tf = (0.0, float(t_span)) if np.isscalar(t_span) else map(float, t_span)
    if tf <= t0:
        raise ValueError("t_span must have positive duration")
    x0 = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x0)):
        raise FlowError("non-finite initial state")
    ph = model.phases[phase]
    rhs = _rhs(model, phase, feedback)

    events = []
    if ph.surface is not None:
        s = ph.surface

        def crossing(t, x, c=s.c_minus, d=s.d_minus):
            return float(np.dot(c, x)) - d

        crossing.terminal = True
        crossing.direction = 0
        events.append(crossing)

    ts_parts, xs_parts = [], []
    t, x = t0, x0
    nudge = max(1e-12, 1e-10 * (tf - t0))
    while True:
        seg_eval = None
        if t_eval is not None:
            seg_eval = np.asarray([te for te in np.atleast_1d(t_eval) if t <= te <= tf])
            if seg_eval.size == 0:
                seg_eval = None
        sol = solve_ivp(
            rhs,
            (t, tf),
            x,
            method="DOP853",
            events=events or None,
            rtol=rtol,
            atol=atol,
            dense_output=True,
            t_eval=seg_eval,
        )
        if not sol.success and sol.status != 1:
            raise FlowError(f"integration failed: {sol.message}")
        if sol.t.size:
            ts_parts.append(sol.t)
            xs_parts.append(sol.y.T)
        hit = sol.status == 1 and sol.t_events[0].size > 0
        if not hit:
            t_fin = tf
            x_fin = sol.sol(tf) if sol.t.size == 0 or sol.t[-1] != tf else sol.y[:, -1]
            ts = np.concatenate(ts_parts) if ts_parts else np.array([t_fin])
            xs = np.vstack(xs_parts) if xs_parts else x_fin[None, :]
            return FlowResult(
                t_final=t_fin,
                x_final=np.asarray(x_fin, dtype=float),
                phase_final=phase,
                event=None,
                ts=ts,
                xs=xs,
                phases=np.full(ts.shape, phase),
            )
        te = float(sol.t_events[0][0])
        xe = np.asarray(sol.y_events[0][0], dtype=float)
        guard_val = ph.surface.guard(xe)
        resid = abs(float(np.dot(ph.surface.c_minus, xe)) - ph.surface.d_minus)
        if resid > EVENT_TOL:
            raise FlowError(f"event localization residual {resid:.2e} exceeds {EVENT_TOL:.1e}")
        if guard_val >= 0.0:
            ts = np.concatenate(ts_parts) if ts_parts else np.array([te])
            xs = np.vstack(xs_parts) if xs_parts else xe[None, :]
            return FlowResult(
                t_final=te,
                x_final=xe,
                phase_final=phase,
                event=phase,
                ts=ts,
                xs=xs,
                phases=np.full(ts.shape, phase),
            )
        # crossing outside the guard set: step just past it and keep going
        t_next = te + nudge
        if t_next >= tf:
            x_fin = sol.sol(tf)
            ts = np.concatenate(ts_parts)
            xs = np.vstack(xs_parts)
            return FlowResult(
                t_final=tf,
                x_final=np.asarray(x_fin, dtype=float),
                phase_final=phase,
                event=None,
                ts=ts,
                xs=xs,
                phases=np.full(ts.shape, phase),
            )
        x = np.asarray(sol.sol(t_next), dtype=float)
        t = t_next


def hybrid_flow(
    model: HybridModel,
    x0,
    duration: float,
    feedback=None,
    phase0: int = 0,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    max_impacts: int = MAX_IMPACTS,
) -> FlowResult:
    """Alternate continuous flow and impact maps for ``duration`` time units."""
    t, x, phase = 0.0, np.asarray(x0, dtype=float).ravel(), phase0
    ts_all, xs_all, ph_all, impacts = [], [], [], []
    while t < duration:
        res = integrate(model, phase, x, (t, duration), feedback=feedback, rtol=rtol, atol=atol)
        ts_all.append(res.ts)
        xs_all.append(res.xs)
        ph_all.append(np.full(res.ts.shape, phase))
        if res.event is None:
            t, x = res.t_final, res.x_final
            break
        if len(impacts) >= max_impacts:
            raise FlowError(f"more than {max_impacts} impacts: probable Zeno or modeling error")
        x_pre = res.x_final
        x_post = model.phases[phase].delta.evaluate(x_pre)
        impacts.append(ImpactRecord(time=res.t_final, phase=phase, x_pre=x_pre, x_post=x_post))
        t, x = res.t_final, x_post
        phase = model.next_phase(phase)
    return FlowResult(
        t_final=t,
        x_final=x,
        phase_final=phase,
        event=None,
        ts=np.concatenate(ts_all),
        xs=np.vstack(xs_all),
        phases=np.concatenate(ph_all),
        impacts=impacts,
    )


# -- periodic orbits ------------------------------------------------------------


def _hermite_eval(t, t0, t1, x0, x1, f0, f1):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * x0 + h10 * h * f0 + h01 * x1 + h11 * h * f1


@dataclass
class OrbitSegment:
    """One continuous piece of the orbit: knots, states, slopes, controls."""

    phase: int
    ts: np.ndarray
    xs: np.ndarray
    fs: np.ndarray
    us: np.ndarray  # shape (K, m); zero columns when m = 0

    def interp(self, t: float) -> np.ndarray:
        ts = self.ts
        if t <= ts[0]:
            return self.xs[0].copy()
        if t >= ts[-1]:
            return self.xs[-1].copy()
        j = int(np.searchsorted(ts, t, side="right") - 1)
        return _hermite_eval(
            t, ts[j], ts[j + 1], self.xs[j], self.xs[j + 1], self.fs[j], self.fs[j + 1]
        )

    def interp_u(self, t: float) -> np.ndarray:
        if self.us.shape[1] == 0:
            return np.zeros(0)
        j = int(np.clip(np.searchsorted(self.ts, t, side="right") - 1, 0, len(self.ts) - 2))
        w = (t - self.ts[j]) / (self.ts[j + 1] - self.ts[j])
        return (1 - w) * self.us[j] + w * self.us[j + 1]


@dataclass
class PeriodicOrbit:
    """Sampled T-periodic solution with piecewise-Hermite dense interpolant."""

    T: float
    n: int
    m: int
    segments: list
    impacts: list  # ImpactRecord at segment ends (empty for continuous orbits)
    closure: float  # |x(T+) - x(0)|
    anchor: int  # coordinate fixed by the shooting phase condition

    @property
    def impact_times(self) -> list:
        return [rec.time for rec in self.impacts]

    def wrap(self, t: float) -> float:
        # t = T stays at the period end: for hybrid orbits the pre-impact
        # state there differs from x(0)
        if t == self.T:
            return t
        tau = math.fmod(t, self.T)
        return tau + self.T if tau < 0 else tau

    def segment_index(self, tau: float) -> int:
        tau = self.wrap(tau) if tau != self.T else tau
        for k, seg in enumerate(self.segments):
            if seg.ts[0] <= tau <= seg.ts[-1]:
                return k
        return len(self.segments) - 1

    def interp(self, t: float) -> np.ndarray:
        tau = self.wrap(t)
        return self.segments[self.segment_index(tau)].interp(tau)

    def interp_u(self, t: float) -> np.ndarray:
        tau = self.wrap(t)
        return self.segments[self.segment_index(tau)].interp_u(tau)

    def knots(self) -> np.ndarray:
        return np.concatenate([seg.ts for seg in self.segments])

    def states(self) -> np.ndarray:
        return np.vstack([seg.xs for seg in self.segments])

    def distance_to(self, x) -> float:
        """Distance from x to the orbit point set, via the knot polyline."""
        d = self.states() - np.asarray(x, dtype=float)[None, :]
        return float(np.sqrt(np.min(np.sum(d * d, axis=1))))


def orbit_to_json(orbit: PeriodicOrbit) -> dict:
    return {
        "T": orbit.T,
        "n": orbit.n,
        "m": orbit.m,
        "closure": orbit.closure,
        "anchor": orbit.anchor,
        "segments": [
            {
                "phase": seg.phase,
                "t": seg.ts.tolist(),
                "x": seg.xs.tolist(),
                "f": seg.fs.tolist(),
                "u": seg.us.tolist(),
            }
            for seg in orbit.segments
        ],
        "impacts": [
            {
                "time": rec.time,
                "phase": rec.phase,
                "x_pre": rec.x_pre.tolist(),
                "x_post": rec.x_post.tolist(),
            }
            for rec in orbit.impacts
        ],
    }


def orbit_from_json(obj: dict) -> PeriodicOrbit:
    segments = [
        OrbitSegment(
            phase=int(s["phase"]),
            ts=np.asarray(s["t"], dtype=float),
            xs=np.asarray(s["x"], dtype=float),
            fs=np.asarray(s["f"], dtype=float),
            us=np.asarray(s["u"], dtype=float).reshape(len(s["t"]), -1),
        )
        for s in obj["segments"]
    ]
    impacts = [
        ImpactRecord(
            time=float(r["time"]),
            phase=int(r["phase"]),
            x_pre=np.asarray(r["x_pre"], dtype=float),
            x_post=np.asarray(r["x_post"], dtype=float),
        )
        for r in obj["impacts"]
    ]
    return PeriodicOrbit(
        T=float(obj["T"]),
        n=int(obj["n"]),
        m=int(obj["m"]),
        segments=segments,
        impacts=impacts,
        closure=float(obj["closure"]),
        anchor=int(obj["anchor"]),
    )


def load_orbit(path: str) -> PeriodicOrbit:
    with open(path, "r", encoding="utf-8") as fh:
        return orbit_from_json(json.load(fh))


def save_orbit(orbit: PeriodicOrbit, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(orbit_to_json(orbit), fh, indent=2)
        fh.write("\n")


def _check_orbit_invariants(model: HybridModel, orbit: PeriodicOrbit) -> None:
    scale = max(float(np.max(np.abs(seg.xs))) for seg in orbit.segments)
    for seg in orbit.segments:
        fn = np.linalg.norm(seg.fs, axis=1)
        if np.min(fn) <= 1e-8 * (1.0 + scale):
            raise OrbitError(
                "shooting diverged: f(x*(t)) vanishes along the orbit "
                "(converged to an equilibrium, not a limit cycle)"
            )
    for rec in orbit.impacts:
        ph = model.phases[rec.phase]
        s = ph.surface
        f_pre = hm.eval_field(model, rec.phase, rec.x_pre, np.zeros(model.m) if model.m else None)
        nxt = model.next_phase(rec.phase)
        f_post = hm.eval_field(model, nxt, rec.x_post, np.zeros(model.m) if model.m else None)
        graze_pre = abs(float(np.dot(s.c_minus, f_pre)))
        graze_post = abs(float(np.dot(s.c_plus, f_post)))
        if graze_pre <= GRAZE_REL * np.linalg.norm(f_pre):
            raise OrbitError(f"grazing impact at t={rec.time:.6f}: |c-.f| = {graze_pre:.2e}")
        if graze_post <= GRAZE_REL * np.linalg.norm(f_post):
            raise OrbitError(f"grazing entry at t={rec.time:.6f}: |c+.f| = {graze_post:.2e}")
        if s.guard(rec.x_pre) < -1e-9:
            raise OrbitError(f"impact at t={rec.time:.6f} violates the guard")
    hm.validate_impact_points(model, [(rec.phase, rec.x_pre) for rec in orbit.impacts])


def _sample_segment(model, phase, x_start, t_start, t_end, knots, rtol, atol) -> OrbitSegment:
    # event detection is intentionally off: the segment ends exactly at the
    # impact time, and sampling must reach it regardless of roundoff
    ts = np.linspace(t_start, t_end, knots + 1)
    rhs = _rhs(model, phase, None)
    sol = solve_ivp(rhs, (t_start, t_end), x_start, method="DOP853", rtol=rtol, atol=atol, t_eval=ts)
    if not sol.success:
        raise FlowError(f"orbit resampling failed: {sol.message}")
    xs = sol.y.T.copy()
    u0 = np.zeros(model.m) if model.m else None
    fs = np.array([hm.eval_field(model, phase, x, u0) for x in xs])
    us = np.zeros((len(ts), model.m))
    return OrbitSegment(phase=phase, ts=ts, xs=xs, fs=fs, us=us)


def find_orbit(
    model: HybridModel,
    x_guess,
    T_guess: float | None = None,
    anchor: int | None = None,
    knots: int = DEFAULT_KNOTS,
    tol: float = 1e-11,
    max_iter: int = 50,
    rtol: float = 1e-12,
    atol: float = 1e-14,
) -> PeriodicOrbit:
    """Refine a periodic orbit by Newton shooting.

    Continuous models shoot on (x(T) - x(0)) with one anchored coordinate,
    using the monodromy matrix as the Jacobian.  Hybrid models shoot
    impact-to-impact: a Newton fixed point of the post-impact return map on
    the entry hyperplane, with finite-difference derivatives.
    """
    x_guess = np.asarray(x_guess, dtype=float).ravel()
    if model.is_hybrid:
        return _find_orbit_hybrid(model, x_guess, knots, tol, max_iter, rtol, atol)
    if T_guess is None:
        raise OrbitError("continuous orbits need a period guess")
    return _find_orbit_continuous(model, x_guess, float(T_guess), anchor, knots, tol, max_iter, rtol, atol)


def _flow_and_stm(model, phase, x0, T, rtol, atol):
    n = model.n
    f = hm.compile_field(model, phase)
    J = hm.compile_state_jacobian(model, phase)
    pad = np.zeros(model.m)

    def rhs(t, y):
        x = y[:n]
        xu = np.concatenate([x, pad]) if model.m else x
        X = y[n:].reshape(n, n)
        return np.concatenate([f(xu), (J(xu) @ X).ravel()])

    y0 = np.concatenate([x0, np.eye(n).ravel()])
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise FlowError(f"variational integration failed: {sol.message}")
    yT = sol.y[:, -1]
    return yT[:n], yT[n:].reshape(n, n)


def _find_orbit_continuous(model, x0, T, anchor, knots, tol, max_iter, rtol, atol):
    n = model.n
    u0 = np.zeros(model.m) if model.m else None
    if anchor is None:
        anchor = int(np.argmax(np.abs(hm.eval_field(model, 0, x0, u0))))
    free = [i for i in range(n) if i != anchor]
    x, Tcur = x0.copy(), T
    rn = np.inf
    for _ in range(max_iter):
        xT, Psi = _flow_and_stm(model, 0, x, Tcur, rtol, atol)
        res = xT - x
        rn = float(np.linalg.norm(res))
        if rn <= tol:
            break
        fT = hm.eval_field(model, 0, xT, u0)
        Jm = np.column_stack([(Psi - np.eye(n))[:, free], fT])
        # least squares handles the singular Jacobian of orbit continua
        step, *_ = np.linalg.lstsq(Jm, -res, rcond=None)
        if not np.all(np.isfinite(step)):
            raise OrbitError("shooting diverged: non-finite Newton step")
        scale = 1.0
        for _ in range(30):
            x_new = x.copy()
            x_new[free] += scale * step[:-1]
            T_new = Tcur + scale * step[-1]
            if T_new > 0.1 * T:
                try:
                    # candidates may escape to infinity on unstable cycles
                    xT_new, _ = _flow_and_stm(model, 0, x_new, T_new, rtol, atol)
                except FlowError:
                    xT_new = None
                if xT_new is not None and np.linalg.norm(xT_new - x_new) < rn:
                    x, Tcur = x_new, T_new
                    break
            scale *= 0.5
        else:
            raise OrbitError("shooting diverged: line search failed")
    if rn > tol:
        raise OrbitError(f"shooting diverged: closure {rn:.2e} after {max_iter} iterations")
    seg = _sample_segment(model, 0, x, 0.0, Tcur, knots, rtol, atol)
    orbit = PeriodicOrbit(
        T=Tcur, n=n, m=model.m, segments=[seg], impacts=[], closure=rn, anchor=anchor
    )
    _check_orbit_invariants(model, orbit)
    return orbit


def _return_map(model, x_entry, phase0, rtol, atol, horizon):
    """One full cycle from an entry state: through every phase and impact."""
    t = 0.0
    x = x_entry
    phase = phase0
    seg_info = []
    impacts = []
    for _ in range(len(model.phases)):
        res = integrate(model, phase, x, (t, t + horizon), rtol=rtol, atol=atol)
        if res.event is None:
            raise OrbitError("orbit guess never reached the switching surface")
        x_pre = res.x_final
        x_post = model.phases[phase].delta.evaluate(x_pre)
        seg_info.append((phase, t, res.t_final, x))
        impacts.append(ImpactRecord(time=res.t_final, phase=phase, x_pre=x_pre, x_post=x_post))
        t = res.t_final
        x = x_post
        phase = model.next_phase(phase)
    return x, t, seg_info, impacts


def _find_orbit_hybrid(model, x_guess, knots, tol, max_iter, rtol, atol):
    phase0 = 0
    prev = model.phases[-1]
    if prev.surface is None:
        raise OrbitError("hybrid shooting requires every phase to carry an exit surface")
    c, d = prev.surface.c_plus, prev.surface.d_plus
    c_unit = c / np.linalg.norm(c)
    # orthonormal basis of the entry hyperplane
    Q, _ = np.linalg.qr(np.column_stack([c_unit, np.eye(model.n)]))
    N = Q[:, 1 : model.n]
    # project the guess onto the plane
    x_base = x_guess - c_unit * (float(np.dot(c_unit, x_guess)) - d / np.linalg.norm(c))
    horizon = 100.0 * max(1.0, np.linalg.norm(x_guess))

    def residual(xi):
        x0 = x_base + N @ xi
        x_ret, _, _, _ = _return_map(model, x0, phase0, rtol, atol, horizon)
        return N.T @ (x_ret - x0)

    xi = np.zeros(model.n - 1)
    r = residual(xi)
    for _ in range(max_iter):
        rn = float(np.linalg.norm(r))
        if rn <= tol:
            break
        # finite-difference Jacobian on the plane coordinates
        Jm = np.zeros((model.n - 1, model.n - 1))
        h = 1e-7 * max(1.0, np.linalg.norm(xi))
        for j in range(model.n - 1):
            e = np.zeros(model.n - 1)
            e[j] = h
            Jm[:, j] = (residual(xi + e) - r) / h
        try:
            step = np.linalg.solve(Jm, -r)
        except np.linalg.LinAlgError as exc:
            raise OrbitError(f"shooting diverged: {exc}")
        scale = 1.0
        for _ in range(30):
            r_new = residual(xi + scale * step)
            if np.linalg.norm(r_new) < rn:
                xi, r = xi + scale * step, r_new
                break
            scale *= 0.5
        else:
            raise OrbitError("shooting diverged: line search failed")
    else:
        raise OrbitError(f"shooting diverged: residual {np.linalg.norm(r):.2e}")

    x0 = x_base + N @ xi
    x_ret, T, seg_info, impacts = _return_map(model, x0, phase0, rtol, atol, horizon)
    closure = float(np.linalg.norm(x_ret - x0))
    segments = []
    for phase, t0, t1, x_start in seg_info:
        segments.append(_sample_segment(model, phase, x_start, t0, t1, knots, rtol, atol))
    orbit = PeriodicOrbit(
        T=T,
        n=model.n,
        m=model.m,
        segments=segments,
        impacts=impacts,
        closure=closure,
        anchor=int(np.argmax(np.abs(c))),
    )
    _check_orbit_invariants(model, orbit)
    return orbit


# -- monodromy -------------------------------------------------------------------


def saltation_matrix(model: HybridModel, rec: ImpactRecord) -> np.ndarray:
    """Impact Jacobian corrected for time-to-surface variation.

    S = D + (f+ - D f-) c-' / (c-' f-), D = dDelta/dx at the pre-impact point.
    """
    ph = model.phases[rec.phase]
    u0 = np.zeros(model.m) if model.m else None
    D = ph.delta.jacobian_at(rec.x_pre)
    f_pre = hm.eval_field(model, rec.phase, rec.x_pre, u0)
    f_post = hm.eval_field(model, model.next_phase(rec.phase), rec.x_post, u0)
    c = ph.surface.c_minus
    denom = float(np.dot(c, f_pre))
    return D + np.outer(f_post - D @ f_pre, c) / denom


def monodromy(
    model: HybridModel, orbit: PeriodicOrbit, rtol: float = 1e-12, atol: float = 1e-14
) -> np.ndarray:
    """State transition matrix over one period, saltation-corrected at impacts."""
    n = model.n
    Psi = np.eye(n)
    for k, seg in enumerate(orbit.segments):
        T_seg = seg.ts[-1] - seg.ts[0]
        _, Phi = _flow_and_stm(model, seg.phase, seg.xs[0], T_seg, rtol, atol)
        Psi = Phi @ Psi
        if k < len(orbit.impacts):
            Psi = saltation_matrix(model, orbit.impacts[k]) @ Psi
    return Psi


def floquet(Psi: np.ndarray) -> np.ndarray:
    """Eigenvalues of the monodromy matrix, sorted by decreasing modulus."""
    ev = np.linalg.eigvals(Psi)
    return ev[np.argsort(-np.abs(ev))]
