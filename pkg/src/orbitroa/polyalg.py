"""Multivariate polynomial arithmetic in canonical (graded-lexicographic) form.

All vector fields, impact maps, Lyapunov candidates and sum-of-squares targets
in this package are carried as :class:`Polynomial` / :class:`PolynomialVector`
values.  Coefficients are double-precision floats; terms whose coefficient
falls below ``PRUNE_TOL`` in absolute value after an arithmetic operation are
dropped, so every value is in canonical form and serialization is bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

# Coefficients smaller than this (absolute value) are pruned after arithmetic.
PRUNE_TOL = 1e-14

Monomial = tuple  # exponents, one non-negative int per variable


class DimensionMismatch(ValueError):
    """Operands declare different variable counts or incompatible shapes."""


def monomial_degree(mono: Monomial) -> int:
    return sum(mono)


def grlex_key(mono: Monomial):
    """Sort key for graded lexicographic order (degree, then x1 before x2...)."""
    return (sum(mono), tuple(-e for e in mono))


def _prune(terms: dict) -> dict:
    return {m: c for m, c in terms.items() if abs(c) > PRUNE_TOL}


@dataclass(frozen=True)
class Polynomial:
    """Real polynomial in ``nvars`` variables, canonical term map.

    ``terms`` maps exponent tuples to nonzero float coefficients.  Instances
    are immutable; all operations return new values.
    """

    nvars: int
    terms: Mapping[Monomial, float] = field(default_factory=dict)

    def __post_init__(self):
        for m in self.terms:
            if len(m) != self.nvars:
                raise DimensionMismatch(
                    f"monomial {m} has {len(m)} exponents, expected {self.nvars}"
                )

    # -- constructors -----------------------------------------------------

    @staticmethod
    def zero(nvars: int) -> "Polynomial":
        return Polynomial(nvars, {})

    @staticmethod
    def constant(nvars: int, c: float) -> "Polynomial":
        if abs(c) <= PRUNE_TOL:
            return Polynomial.zero(nvars)
        return Polynomial(nvars, {(0,) * nvars: float(c)})

    @staticmethod
    def variable(nvars: int, i: int) -> "Polynomial":
        if not 0 <= i < nvars:
            raise DimensionMismatch(f"variable index {i} out of range for nvars={nvars}")
        e = [0] * nvars
        e[i] = 1
        return Polynomial(nvars, {tuple(e): 1.0})

    @staticmethod
    def from_linear(coeffs: Sequence[float], offset: float = 0.0) -> "Polynomial":
        """Affine polynomial ``coeffs . x + offset``."""
        n = len(coeffs)
        terms = {}
        for i, c in enumerate(coeffs):
            if abs(c) > PRUNE_TOL:
                e = [0] * n
                e[i] = 1
                terms[tuple(e)] = float(c)
        if abs(offset) > PRUNE_TOL:
            terms[(0,) * n] = float(offset)
        return Polynomial(n, terms)

    # -- queries -----------------------------------------------------------

    def degree(self) -> int:
        """Total degree; zero polynomial has degree 0 by convention."""
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def min_degree(self) -> int:
        """Smallest total degree of a stored term (0 for the zero polynomial)."""
        if not self.terms:
            return 0
        return min(sum(m) for m in self.terms)

    def coefficient(self, mono: Monomial) -> float:
        return self.terms.get(tuple(mono), 0.0)

    def is_zero(self) -> bool:
        return not self.terms

    def sorted_terms(self):
        """Terms in canonical graded-lex order."""
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0]))

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return add(self, other.scale(-1.0))

    def __rsub__(self, other):
        return (self.scale(-1.0)).__add__(other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, s: float) -> "Polynomial":
        if s == 0.0:
            return Polynomial.zero(self.nvars)
        return Polynomial(self.nvars, _prune({m: c * s for m, c in self.terms.items()}))

    def __eq__(self, other):
        return (
            isinstance(other, Polynomial)
            and self.nvars == other.nvars
            and dict(self.terms) == dict(other.terms)
        )

    def __hash__(self):
        return hash((self.nvars, tuple(self.sorted_terms())))

    def __repr__(self):
        if not self.terms:
            return "Polynomial(0)"
        bits = []
        for m, c in self.sorted_terms():
            mono = "*".join(
                f"x{i + 1}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(m) if e
            )
            bits.append(f"{c:g}" + (f"*{mono}" if mono else ""))
        return "Polynomial(" + " + ".join(bits) + ")"

    def __call__(self, point) -> float:
        return evaluate(self, point)


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    """Coefficientwise sum with zero terms pruned."""
    if p.nvars != q.nvars:
        raise DimensionMismatch(f"nvars {p.nvars} != {q.nvars}")
    terms = dict(p.terms)
    for m, c in q.terms.items():
        terms[m] = terms.get(m, 0.0) + c
    return Polynomial(p.nvars, _prune(terms))


def mul(p: Polynomial, q: Polynomial) -> Polynomial:
    """Distributive product, canonical form."""
    if p.nvars != q.nvars:
        raise DimensionMismatch(f"nvars {p.nvars} != {q.nvars}")
    terms: dict = {}
    for mp, cp in p.terms.items():
        for mq, cq in q.terms.items():
            m = tuple(a + b for a, b in zip(mp, mq))
            terms[m] = terms.get(m, 0.0) + cp * cq
    return Polynomial(p.nvars, _prune(terms))


def differentiate(p: Polynomial, var: int) -> Polynomial:
    """Formal partial derivative with respect to variable ``var``."""
    if not 0 <= var < p.nvars:
        raise DimensionMismatch(f"variable index {var} out of range for nvars={p.nvars}")
    terms: dict = {}
    for m, c in p.terms.items():
        e = m[var]
        if e == 0:
            continue
        dm = list(m)
        dm[var] = e - 1
        dm = tuple(dm)
        terms[dm] = terms.get(dm, 0.0) + c * e
    return Polynomial(p.nvars, _prune(terms))


def substitute_affine(p: Polynomial, M, b) -> Polynomial:
    """Polynomial in new variables equal to ``p(M @ y + b)`` pointwise.

    ``M`` has shape (p.nvars, new_nvars); ``b`` has length p.nvars.
    """
    M = np.asarray(M, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if M.ndim != 2 or M.shape[0] != p.nvars or b.shape[0] != p.nvars:
        raise DimensionMismatch(
            f"substitution shapes M{M.shape}, b{b.shape} incompatible with nvars={p.nvars}"
        )
    new_n = M.shape[1]
    # affine image of each original variable
    images = [Polynomial.from_linear(M[i], b[i]) for i in range(p.nvars)]
    # cache powers of each image, built incrementally
    powers: list[list[Polynomial]] = [[Polynomial.constant(new_n, 1.0)] for _ in images]
    max_e = [0] * p.nvars
    for m in p.terms:
        for i, e in enumerate(m):
            max_e[i] = max(max_e[i], e)
    for i, img in enumerate(images):
        for _ in range(max_e[i]):
            powers[i].append(mul(powers[i][-1], img))
    out = Polynomial.zero(new_n)
    for m, c in sorted(p.terms.items(), key=lambda kv: grlex_key(kv[0])):
        term = Polynomial.constant(new_n, c)
        for i, e in enumerate(m):
            if e:
                term = mul(term, powers[i][e])
        out = add(out, term)
    return out


def evaluate(p: Polynomial, point) -> float:
    """Value of ``p`` at ``point``, accumulated in canonical term order."""
    x = np.asarray(point, dtype=float).ravel()
    if x.shape[0] != p.nvars:
        raise DimensionMismatch(f"point length {x.shape[0]} != nvars {p.nvars}")
    # cache powers per variable up to the max exponent used
    max_e = [0] * p.nvars
    for m in p.terms:
        for i, e in enumerate(m):
            max_e[i] = max(max_e[i], e)
    pows = [[1.0] for _ in range(p.nvars)]
    for i in range(p.nvars):
        for _ in range(max_e[i]):
            pows[i].append(pows[i][-1] * x[i])
    total = 0.0
    for m, c in p.sorted_terms():
        v = c
        for i, e in enumerate(m):
            if e:
                v *= pows[i][e]
        total += v
    return total


def monomial_basis(nvars: int, max_degree: int, min_degree: int = 0) -> list:
    """All monomials with total degree in [min_degree, max_degree], graded-lex."""
    if not 0 <= min_degree <= max_degree:
        raise ValueError(f"need 0 <= min_degree <= max_degree, got {min_degree}, {max_degree}")
    out = []
    for d in range(min_degree, max_degree + 1):
        out.extend(_monomials_of_degree(nvars, d))
    return sorted(out, key=grlex_key)


def _monomials_of_degree(nvars: int, d: int) -> list:
    if nvars == 1:
        return [(d,)]
    out = []
    for e in range(d, -1, -1):
        for rest in _monomials_of_degree(nvars - 1, d - e):
            out.append((e,) + rest)
    return out


def monomial_poly(nvars: int, mono: Monomial) -> Polynomial:
    return Polynomial(nvars, {tuple(mono): 1.0})


@dataclass(frozen=True)
class PolynomialVector:
    """Polynomial map R^nvars -> R^m, components sharing the input dimension."""

    nvars: int
    components: tuple

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        for p in self.components:
            if p.nvars != self.nvars:
                raise DimensionMismatch(
                    f"component nvars {p.nvars} != declared {self.nvars}"
                )

    def __len__(self):
        return len(self.components)

    def __getitem__(self, i) -> Polynomial:
        return self.components[i]

    def evaluate(self, point) -> np.ndarray:
        return np.array([evaluate(p, point) for p in self.components])

    def jacobian(self) -> list:
        """List of rows, each a list of Polynomial partial derivatives."""
        return [
            [differentiate(p, j) for j in range(self.nvars)] for p in self.components
        ]

    def jacobian_at(self, point) -> np.ndarray:
        return np.array(
            [
                [evaluate(differentiate(p, j), point) for j in range(self.nvars)]
                for p in self.components
            ]
        )

    def substitute_affine(self, M, b) -> "PolynomialVector":
        new = [substitute_affine(p, M, b) for p in self.components]
        return PolynomialVector(np.asarray(M).shape[1], tuple(new))


def dot(vec: Sequence[float], polys: Iterable[Polynomial]) -> Polynomial:
    """Linear combination sum_i vec[i] * polys[i]."""
    polys = list(polys)
    if not polys:
        raise ValueError("empty polynomial sequence")
    out = Polynomial.zero(polys[0].nvars)
    for c, p in zip(vec, polys):
        out = add(out, p.scale(float(c)))
    return out


# -- JSON encoding ----------------------------------------------------------
# {"nvars": n, "terms": [{"c": coeff, "e": [e1,...,en]}, ...]}
# terms canonical on output, arbitrary order accepted on input.


def poly_to_json(p: Polynomial) -> dict:
    return {
        "nvars": p.nvars,
        "terms": [{"c": c, "e": list(m)} for m, c in p.sorted_terms()],
    }


def poly_from_json(obj: dict) -> Polynomial:
    try:
        nvars = int(obj["nvars"])
        raw = obj["terms"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed polynomial object: {obj!r}") from exc
    terms: dict = {}
    for t in raw:
        e = tuple(int(v) for v in t["e"])
        if len(e) != nvars:
            raise DimensionMismatch(f"term exponents {e} do not match nvars={nvars}")
        if any(v < 0 for v in e):
            raise ValueError(f"negative exponent in {e}")
        terms[e] = terms.get(e, 0.0) + float(t["c"])
    return Polynomial(nvars, _prune(terms))


def polyvec_to_json(v: PolynomialVector) -> list:
    return [poly_to_json(p) for p in v.components]


def polyvec_from_json(objs: Sequence[dict], nvars: int | None = None) -> PolynomialVector:
    comps = tuple(poly_from_json(o) for o in objs)
    if nvars is None:
        if not comps:
            raise ValueError("empty polynomial vector needs explicit nvars")
        nvars = comps[0].nvars
    return PolynomialVector(nvars, comps)
