"""Hybrid polynomial system models and their declarative JSON format.

A model is a cyclic sequence of continuous phases.  Each phase carries a
vector field on R^n x R^m (polynomial part plus optional analytic atoms such
as ``sin``/``cos`` of an affine form), an optional planar exit surface with a
polynomial guard, and an optional impact map applied on that surface.
Single-phase models with no surface are ordinary continuous systems.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import polyalg as pa
from .polyalg import Polynomial, PolynomialVector


class ModelError(ValueError):
    """Raised on schema violations; message carries the offending location."""


_ATOM_FNS = ("sin", "cos")


@dataclass(frozen=True)
class AtomTerm:
    """Analytic term ``coeff * fn(lin . (x,u) + offset)`` added to one field component."""

    component: int
    fn: str
    coeff: float
    lin: tuple
    offset: float = 0.0

    def argument(self, xu) -> float:
        return float(np.dot(self.lin, xu) + self.offset)

    def value(self, xu) -> float:
        s = self.argument(xu)
        return self.coeff * (math.sin(s) if self.fn == "sin" else math.cos(s))

    def gradient(self, xu) -> np.ndarray:
        s = self.argument(xu)
        d = math.cos(s) if self.fn == "sin" else -math.sin(s)
        return self.coeff * d * np.asarray(self.lin, dtype=float)


@dataclass(frozen=True)
class SwitchingSurface:
    """Exit set S- = {c_minus . x = d_minus, guard >= 0} and entry plane S+."""

    c_minus: np.ndarray
    d_minus: float
    guard: Polynomial
    c_plus: np.ndarray
    d_plus: float

    def __post_init__(self):
        object.__setattr__(self, "c_minus", np.asarray(self.c_minus, dtype=float))
        object.__setattr__(self, "c_plus", np.asarray(self.c_plus, dtype=float))
        if np.linalg.norm(self.c_minus) == 0.0 or np.linalg.norm(self.c_plus) == 0.0:
            raise ModelError("zero normal vector in switching surface")


@dataclass(frozen=True)
class HybridPhase:
    """One continuous phase: field, optional exit surface, optional impact map."""

    f: PolynomialVector  # on R^(n+m), n components
    atoms: tuple = ()
    surface: SwitchingSurface | None = None
    delta: PolynomialVector | None = None


@dataclass(frozen=True)
class HybridModel:
    """Cyclic phase sequence; the last phase's successor is the first."""

    n: int
    m: int
    phases: tuple

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        nm = self.n + self.m
        for k, ph in enumerate(self.phases):
            if ph.f.nvars != nm or len(ph.f) != self.n:
                raise ModelError(
                    f"phases[{k}].f must map R^{nm} -> R^{self.n}, "
                    f"got R^{ph.f.nvars} -> R^{len(ph.f)}"
                )
            for a in ph.atoms:
                if not 0 <= a.component < self.n or len(a.lin) != nm:
                    raise ModelError(f"phases[{k}] atom shape mismatch")
            if ph.surface is not None:
                s = ph.surface
                if s.c_minus.shape != (self.n,) or s.c_plus.shape != (self.n,):
                    raise ModelError(f"phases[{k}].surface normals must have length {self.n}")
                if s.guard.nvars != self.n:
                    raise ModelError(f"phases[{k}].surface guard must be on R^{self.n}")
            if ph.delta is not None and (
                ph.delta.nvars != self.n or len(ph.delta) != self.n
            ):
                raise ModelError(f"phases[{k}].delta must map R^{self.n} -> R^{self.n}")
            if (ph.surface is None) != (ph.delta is None):
                raise ModelError(f"phases[{k}]: surface and delta must both be set or both null")

    @property
    def is_hybrid(self) -> bool:
        return any(ph.surface is not None for ph in self.phases)

    def next_phase(self, k: int) -> int:
        return (k + 1) % len(self.phases)


# -- evaluation ---------------------------------------------------------------


def _stack_xu(model: HybridModel, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != model.n:
        raise ModelError(f"state length {x.shape[0]} != n={model.n}")
    if model.m == 0:
        if u is not None and np.size(u) != 0:
            raise ModelError("model has no inputs but u was given")
        return x
    u = np.zeros(model.m) if u is None else np.asarray(u, dtype=float).ravel()
    if u.shape[0] != model.m:
        raise ModelError(f"input length {u.shape[0]} != m={model.m}")
    return np.concatenate([x, u])


def eval_field(model: HybridModel, phase: int, x, u=None) -> np.ndarray:
    """f(x, u) for the given phase, atoms evaluated exactly."""
    ph = model.phases[phase]
    xu = _stack_xu(model, x, u)
    out = ph.f.evaluate(xu)
    for a in ph.atoms:
        out[a.component] += a.value(xu)
    return out


def field_jacobian(model: HybridModel, phase: int, x, u=None) -> tuple:
    """(df/dx, df/du) at (x, u), exact for polynomials and atoms."""
    ph = model.phases[phase]
    xu = _stack_xu(model, x, u)
    J = ph.f.jacobian_at(xu)
    for a in ph.atoms:
        J[a.component] += a.gradient(xu)
    return J[:, : model.n], J[:, model.n :]


# -- compiled evaluation ------------------------------------------------------
# Integrators call the field ~10^7 times in the Monte-Carlo validation runs;
# interpreting the term maps per call is too slow, so each phase's field and
# state Jacobian are compiled once into plain Python expressions.


def _poly_expr(p: Polynomial) -> str:
    bits = []
    for mono, c in p.sorted_terms():
        factors = [repr(c)]
        for i, e in enumerate(mono):
            if e == 1:
                factors.append(f"v[{i}]")
            elif e > 1:
                factors.append(f"v[{i}]**{e}")
        bits.append("*".join(factors))
    return " + ".join(bits) if bits else "0.0"


def _atom_expr(a: AtomTerm, offset_shift: float = 0.0) -> str:
    arg_bits = [
        f"{coef!r}*v[{i}]" for i, coef in enumerate(a.lin) if coef != 0.0
    ]
    off = a.offset + offset_shift
    if off != 0.0 or not arg_bits:
        arg_bits.append(repr(off))
    return f"{a.coeff!r}*{a.fn}({' + '.join(arg_bits)})"


def compile_field(model: HybridModel, phase: int):
    """Fast ``f(xu) -> ndarray`` for one phase; xu stacks state and input."""
    ph = model.phases[phase]
    exprs = [_poly_expr(p) for p in ph.f.components]
    for a in ph.atoms:
        exprs[a.component] += " + " + _atom_expr(a)
    src = "def _f(v, sin=_sin, cos=_cos, array=_array):\n    return array([%s])\n" % (
        ", ".join(exprs)
    )
    ns = {"_sin": math.sin, "_cos": math.cos, "_array": np.array}
    exec(src, ns)
    return ns["_f"]


def compile_state_jacobian(model: HybridModel, phase: int):
    """Fast ``J(xu) -> (n, n) ndarray`` of df/dx for one phase."""
    ph = model.phases[phase]
    n = model.n
    rows = []
    for i, p in enumerate(ph.f.components):
        entries = [_poly_expr(pa.differentiate(p, j)) for j in range(n)]
        for a in ph.atoms:
            if a.component != i:
                continue
            # d/dxj coeff*fn(s) = coeff*lin_j*fn'(s)
            dfn = "cos" if a.fn == "sin" else "sin"
            sgn = 1.0 if a.fn == "sin" else -1.0
            for j in range(n):
                if a.lin[j] == 0.0:
                    continue
                shifted = AtomTerm(a.component, dfn, sgn * a.coeff * a.lin[j], a.lin, a.offset)
                entries[j] += " + " + _atom_expr(shifted)
        rows.append("[%s]" % ", ".join(entries))
    src = "def _J(v, sin=_sin, cos=_cos, array=_array):\n    return array([%s])\n" % (
        ", ".join(rows)
    )
    ns = {"_sin": math.sin, "_cos": math.cos, "_array": np.array}
    exec(src, ns)
    return ns["_J"]


# -- Taylor polynomialization -------------------------------------------------


def _scalar_taylor(fn: str, s0: float, degree: int) -> list:
    """Coefficients t_k of fn(s0+u) = sum t_k u^k, k = 0..degree."""
    cycle = (
        [math.sin(s0), math.cos(s0), -math.sin(s0), -math.cos(s0)]
        if fn == "sin"
        else [math.cos(s0), -math.sin(s0), -math.cos(s0), math.sin(s0)]
    )
    return [cycle[k % 4] / math.factorial(k) for k in range(degree + 1)]


def _truncate_about(p: Polynomial, center: np.ndarray, degree: int) -> Polynomial:
    if p.degree() <= degree:
        return p
    n = p.nvars
    eye = np.eye(n)
    shifted = pa.substitute_affine(p, eye, center)  # p(y + center)
    kept = Polynomial(n, {m: c for m, c in shifted.terms.items() if sum(m) <= degree})
    return pa.substitute_affine(kept, eye, -center)  # back to original variables


def taylor_polynomialize(
    f: PolynomialVector, atoms: Sequence[AtomTerm], center, degree: int
) -> PolynomialVector:
    """Taylor polynomial of the field about ``center``, exact for polynomial input.

    ``center`` lives in the field's full input space (state and input stacked).
    Polynomial components of degree <= ``degree`` pass through unchanged;
    higher-degree polynomial terms are truncated about the center.  Atoms are
    expanded by their scalar Taylor rules composed with their affine argument.
    """
    center = np.asarray(center, dtype=float).ravel()
    if center.shape[0] != f.nvars:
        raise ModelError(f"center length {center.shape[0]} != field nvars {f.nvars}")
    comps = [_truncate_about(p, center, degree) for p in f.components]
    n = f.nvars
    for a in atoms:
        if a.fn not in _ATOM_FNS:
            raise ModelError(f"unsupported atom {a.fn!r}")
        s0 = float(np.dot(a.lin, center) + a.offset)
        tk = _scalar_taylor(a.fn, s0, degree)
        # u = lin . (xu - center) as a polynomial in the original variables
        u_poly = Polynomial.from_linear(a.lin, a.offset - s0)
        term = Polynomial.constant(n, tk[0])
        upow = Polynomial.constant(n, 1.0)
        for k in range(1, degree + 1):
            upow = pa.mul(upow, u_poly)
            term = pa.add(term, upow.scale(tk[k]))
        comps[a.component] = pa.add(comps[a.component], term.scale(a.coeff))
    return PolynomialVector(n, tuple(comps))


def phase_field_polynomial(model: HybridModel, phase: int, center, degree: int) -> PolynomialVector:
    """Polynomialized field of one phase about ``center`` in R^(n+m)."""
    ph = model.phases[phase]
    if not ph.atoms:
        return ph.f
    return taylor_polynomialize(ph.f, ph.atoms, center, degree)


# -- JSON schema ----------------------------------------------------------------


def model_to_json(model: HybridModel) -> dict:
    phases = []
    atoms = []
    for k, ph in enumerate(model.phases):
        entry: dict = {"f": pa.polyvec_to_json(ph.f)}
        if ph.surface is not None:
            s = ph.surface
            entry["surface"] = {
                "c_minus": list(s.c_minus),
                "d_minus": s.d_minus,
                "guard": pa.poly_to_json(s.guard),
                "c_plus": list(s.c_plus),
                "d_plus": s.d_plus,
            }
        else:
            entry["surface"] = None
        entry["delta"] = pa.polyvec_to_json(ph.delta) if ph.delta is not None else None
        phases.append(entry)
        for a in ph.atoms:
            atoms.append(
                {
                    "phase": k,
                    "component": a.component,
                    "fn": a.fn,
                    "coeff": a.coeff,
                    "lin": list(a.lin),
                    "offset": a.offset,
                }
            )
    out = {"n": model.n, "m": model.m, "phases": phases}
    if atoms:
        out["atoms"] = atoms
    return out


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ModelError(f"{where}: missing key {key!r}")
    return obj[key]


def model_from_json(obj: dict) -> HybridModel:
    n = int(_require(obj, "n", "top level"))
    m = int(_require(obj, "m", "top level"))
    raw_phases = _require(obj, "phases", "top level")
    if not raw_phases:
        raise ModelError("top level: phases must be non-empty")
    atom_lists: list = [[] for _ in raw_phases]
    for i, a in enumerate(obj.get("atoms", [])):
        where = f"atoms[{i}]"
        k = int(_require(a, "phase", where))
        if not 0 <= k < len(raw_phases):
            raise ModelError(f"{where}: phase index {k} out of range")
        fn = _require(a, "fn", where)
        if fn not in _ATOM_FNS:
            raise ModelError(f"{where}: unsupported atom {fn!r}")
        atom_lists[k].append(
            AtomTerm(
                component=int(_require(a, "component", where)),
                fn=fn,
                coeff=float(_require(a, "coeff", where)),
                lin=tuple(float(v) for v in _require(a, "lin", where)),
                offset=float(a.get("offset", 0.0)),
            )
        )
    phases = []
    for k, rp in enumerate(raw_phases):
        where = f"phases[{k}]"
        try:
            fvec = pa.polyvec_from_json(_require(rp, "f", where), nvars=n + m)
        except (ValueError, pa.DimensionMismatch) as exc:
            raise ModelError(f"{where}.f: {exc}") from exc
        surf = None
        if rp.get("surface") is not None:
            rs = rp["surface"]
            sw = f"{where}.surface"
            try:
                surf = SwitchingSurface(
                    c_minus=[float(v) for v in _require(rs, "c_minus", sw)],
                    d_minus=float(_require(rs, "d_minus", sw)),
                    guard=pa.poly_from_json(_require(rs, "guard", sw)),
                    c_plus=[float(v) for v in _require(rs, "c_plus", sw)],
                    d_plus=float(_require(rs, "d_plus", sw)),
                )
            except ModelError as exc:
                raise ModelError(f"{sw}: {exc}") from exc
        delta = None
        if rp.get("delta") is not None:
            try:
                delta = pa.polyvec_from_json(rp["delta"], nvars=n)
            except (ValueError, pa.DimensionMismatch) as exc:
                raise ModelError(f"{where}.delta: {exc}") from exc
        phases.append(HybridPhase(f=fvec, atoms=tuple(atom_lists[k]), surface=surf, delta=delta))
    return HybridModel(n=n, m=m, phases=tuple(phases))


def load_model(source: str) -> HybridModel:
    """Parse a model from a JSON file path or a JSON text string."""
    text = source
    if not source.lstrip().startswith("{"):
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    return model_from_json(obj)


def save_model(model: HybridModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model), fh, indent=2)
        fh.write("\n")


def validate_impact_points(model: HybridModel, impacts, tol: float = 1e-8) -> None:
    """Check Delta maps each orbit impact point onto the next entry hyperplane.

    ``impacts`` is a sequence of (phase_index, x_pre) pairs on the nominal
    orbit.  Raises ModelError when the post-impact state misses S+.
    """
    for k, x_pre in impacts:
        ph = model.phases[k]
        if ph.surface is None or ph.delta is None:
            raise ModelError(f"phase {k} has no surface/impact map")
        x_post = ph.delta.evaluate(np.asarray(x_pre, dtype=float))
        s_next = ph.surface
        miss = abs(float(np.dot(s_next.c_plus, x_post)) - s_next.d_plus)
        if miss > tol:
            raise ModelError(
                f"impact map of phase {k} misses entry hyperplane by {miss:.3e} (tol {tol:.1e})"
            )
