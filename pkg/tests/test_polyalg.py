import math

import numpy as np
import pytest

from orbitroa import polyalg as pa
from orbitroa.polyalg import Polynomial, PolynomialVector


def P1(**coeffs):
    """1-variable polynomial from {degree: coeff} kwargs like d0=1, d2=-2."""
    return Polynomial(1, {(int(k[1:]),): float(v) for k, v in coeffs.items()})


x = Polynomial.variable(1, 0)
x1 = Polynomial.variable(2, 0)
x2 = Polynomial.variable(2, 1)


def random_poly(rng, nvars, max_degree):
    basis = pa.monomial_basis(nvars, max_degree)
    terms = {}
    for m in basis:
        if rng.random() < 0.4:
            terms[m] = rng.uniform(-3, 3)
    return Polynomial(nvars, pa._prune(terms))


class TestAdd:
    def test_cancellation(self):
        assert pa.add(x * x, -1.0 * (x * x)).is_zero()

    def test_sum(self):
        assert pa.add(x + 1.0, x - 1.0) == 2.0 * x

    def test_multivariate(self):
        p = x1 * x1 + 2.0 * x2
        assert pa.add(p, x2) == x1 * x1 + 3.0 * x2

    def test_dimension_mismatch(self):
        with pytest.raises(pa.DimensionMismatch):
            pa.add(x, x1)


class TestMul:
    def test_difference_of_squares(self):
        assert pa.mul(x + 1.0, x - 1.0) == x * x - 1.0

    def test_identity(self):
        p = 3.0 * x * x - 2.0
        assert pa.mul(p, Polynomial.constant(1, 1.0)) == p

    def test_square(self):
        q = x * x - 1.0
        assert pa.mul(q, q) == P1(d4=1, d2=-2, d0=1)

    def test_dimension_mismatch(self):
        with pytest.raises(pa.DimensionMismatch):
            pa.mul(x, x1)


class TestDifferentiate:
    def test_cubic(self):
        assert pa.differentiate(x * x * x, 0) == 3.0 * x * x

    def test_absent_variable(self):
        assert pa.differentiate(x1 * x1, 1).is_zero()

    def test_quartic(self):
        p = P1(d4=1, d2=-2, d0=1)
        assert pa.differentiate(p, 0) == P1(d3=4, d1=-4)


class TestSubstituteAffine:
    def test_scalar_affine(self):
        # p(x)=x^2, x = 2y+1 -> 4y^2+4y+1
        p = x * x
        q = pa.substitute_affine(p, [[2.0]], [1.0])
        assert q == P1(d2=4, d1=4, d0=1)

    def test_identity(self):
        q = pa.substitute_affine(x, [[1.0]], [0.0])
        assert q == x

    def test_two_to_one(self):
        # p(x1,x2)=x1*x2, x=(y,-y) -> -y^2
        p = x1 * x2
        q = pa.substitute_affine(p, [[1.0], [-1.0]], [0.0, 0.0])
        assert q == -1.0 * (x * x)

    def test_shape_mismatch(self):
        with pytest.raises(pa.DimensionMismatch):
            pa.substitute_affine(x1 * x2, [[1.0]], [0.0])


class TestEvaluate:
    def test_basic(self):
        p = x1 * x1 + 2.0 * x2
        assert pa.evaluate(p, (1.0, 1.0)) == pytest.approx(3.0, abs=1e-15)

    def test_constant_term_at_origin(self):
        p = x1 * x2 + Polynomial.constant(2, 7.5)
        assert pa.evaluate(p, (0.0, 0.0)) == 7.5

    def test_quartic_root(self):
        p = P1(d4=1, d2=-2, d0=1)
        assert pa.evaluate(p, [1.0]) == pytest.approx(0.0, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(pa.DimensionMismatch):
            pa.evaluate(x1, [1.0])


class TestMonomialBasis:
    def test_univariate(self):
        assert pa.monomial_basis(1, 2) == [(0,), (1,), (2,)]

    def test_degree_one_slice(self):
        assert pa.monomial_basis(2, 1, 1) == [(1, 0), (0, 1)]

    def test_count_matches_binomial_oracle(self):
        # count = sum_d C(nvars-1+d, d)
        for nvars in (1, 2, 3, 4):
            for dmax in (0, 1, 2, 3, 5):
                expected = sum(math.comb(nvars - 1 + d, d) for d in range(dmax + 1))
                assert len(pa.monomial_basis(nvars, dmax)) == expected

    def test_graded_lex_order(self):
        basis = pa.monomial_basis(2, 2)
        assert basis == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]

    def test_bad_range(self):
        with pytest.raises(ValueError):
            pa.monomial_basis(2, 1, 2)


class TestRingProperties:
    """Ring axioms on random polynomials up to degree 6, 3 variables."""

    def setup_method(self):
        self.rng = np.random.default_rng(20240811)

    def _triples(self, count=25):
        for _ in range(count):
            yield (
                random_poly(self.rng, 3, 3),
                random_poly(self.rng, 3, 2),
                random_poly(self.rng, 3, 3),
            )

    @staticmethod
    def _close(p, q, tol=1e-9):
        keys = set(p.terms) | set(q.terms)
        return all(abs(p.coefficient(k) - q.coefficient(k)) <= tol for k in keys)

    def test_commutativity(self):
        for p, q, _ in self._triples():
            assert pa.add(p, q) == pa.add(q, p)
            assert self._close(pa.mul(p, q), pa.mul(q, p))

    def test_associativity(self):
        for p, q, r in self._triples():
            assert self._close(pa.add(pa.add(p, q), r), pa.add(p, pa.add(q, r)), 1e-12)
            assert self._close(pa.mul(pa.mul(p, q), r), pa.mul(p, pa.mul(q, r)), 1e-8)

    def test_distributivity(self):
        for p, q, r in self._triples():
            lhs = pa.mul(p, pa.add(q, r))
            rhs = pa.add(pa.mul(p, q), pa.mul(p, r))
            assert self._close(lhs, rhs, 1e-9)

    def test_evaluate_multiplicative(self):
        for p, q, _ in self._triples():
            v = self.rng.uniform(-1.5, 1.5, size=3)
            lhs = pa.evaluate(pa.mul(p, q), v)
            rhs = pa.evaluate(p, v) * pa.evaluate(q, v)
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_chain_rule_through_affine(self):
        # d/dy_j p(M y + b) == sum_i M[i,j] (dp/dx_i)(M y + b), coefficientwise
        rng = self.rng
        for _ in range(15):
            p = random_poly(rng, 3, 3)
            M = rng.uniform(-2, 2, size=(3, 2))
            b = rng.uniform(-1, 1, size=3)
            sub = pa.substitute_affine(p, M, b)
            for j in range(2):
                lhs = pa.differentiate(sub, j)
                rhs = pa.Polynomial.zero(2)
                for i in range(3):
                    di = pa.substitute_affine(pa.differentiate(p, i), M, b)
                    rhs = pa.add(rhs, di.scale(M[i, j]))
                assert self._close(lhs, rhs, 1e-9)


class TestJsonRoundTrip:
    def test_bit_exact(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            p = random_poly(rng, 3, 4)
            q = pa.poly_from_json(pa.poly_to_json(p))
            assert q == p
            # canonical output ordering is deterministic
            assert pa.poly_to_json(q) == pa.poly_to_json(p)

    def test_accepts_arbitrary_input_order_and_merges(self):
        obj = {
            "nvars": 1,
            "terms": [{"c": 1.0, "e": [2]}, {"c": 2.0, "e": [0]}, {"c": 1.5, "e": [2]}],
        }
        p = pa.poly_from_json(obj)
        assert p == P1(d2=2.5, d0=2)

    def test_rejects_bad_exponents(self):
        with pytest.raises(pa.DimensionMismatch):
            pa.poly_from_json({"nvars": 2, "terms": [{"c": 1.0, "e": [1]}]})
        with pytest.raises(ValueError):
            pa.poly_from_json({"nvars": 1, "terms": [{"c": 1.0, "e": [-1]}]})


class TestPolynomialVector:
    def test_shared_dimension_enforced(self):
        with pytest.raises(pa.DimensionMismatch):
            PolynomialVector(2, (x1, x))

    def test_jacobian_at(self):
        f = PolynomialVector(2, (x2, -1.0 * x1))
        J = f.jacobian_at([0.3, -0.7])
        assert np.allclose(J, [[0.0, 1.0], [-1.0, 0.0]])
