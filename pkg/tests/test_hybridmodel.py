import json
import math

import numpy as np
import pytest

from orbitroa import hybridmodel as hm
from orbitroa import models
from orbitroa import polyalg as pa
from orbitroa.polyalg import Polynomial, PolynomialVector


class TestLoadModel:
    def test_van_der_pol_roundtrip(self, tmp_path):
        mdl = models.van_der_pol()
        path = tmp_path / "vdp.json"
        hm.save_model(mdl, str(path))
        loaded = hm.load_model(str(path))
        assert loaded.n == 2 and loaded.m == 0
        assert len(loaded.phases) == 1
        assert loaded.phases[0].surface is None
        assert loaded == mdl
        # load o save is identity on canonical files
        path2 = tmp_path / "vdp2.json"
        hm.save_model(loaded, str(path2))
        assert path.read_bytes() == path2.read_bytes()

    def test_rimless_wheel_structure(self):
        mdl = models.rimless_wheel()
        ph = mdl.phases[0]
        assert ph.surface is not None and ph.delta is not None
        assert ph.atoms[0].fn == "sin"
        assert mdl.is_hybrid

    def test_load_from_text(self):
        text = json.dumps(hm.model_to_json(models.harmonic_oscillator()))
        mdl = hm.load_model(text)
        assert mdl.n == 2

    def test_zero_normal_rejected(self):
        obj = hm.model_to_json(models.rimless_wheel())
        obj["phases"][0]["surface"]["c_minus"] = [0.0, 0.0]
        with pytest.raises(hm.ModelError, match="zero normal"):
            hm.model_from_json(obj)

    def test_dimension_inconsistency_rejected(self):
        obj = hm.model_to_json(models.van_der_pol())
        obj["phases"][0]["f"] = obj["phases"][0]["f"][:1]
        with pytest.raises(hm.ModelError):
            hm.model_from_json(obj)

    def test_parse_error_has_location(self):
        with pytest.raises(hm.ModelError, match="line"):
            hm.load_model('{"n": 2,')


class TestEvalField:
    def test_van_der_pol_point(self):
        # mu (1 - 4) * 0 - 2 = -2 on the second component
        mdl = models.van_der_pol()
        assert np.allclose(hm.eval_field(mdl, 0, [2.0, 0.0]), [0.0, -2.0])

    def test_harmonic(self):
        mdl = models.harmonic_oscillator()
        assert np.allclose(hm.eval_field(mdl, 0, [1.0, 0.0]), [0.0, -1.0])

    def test_controlled_integrator(self):
        f = PolynomialVector(
            3, (Polynomial(3, {(0, 1, 0): 1.0}), Polynomial(3, {(0, 0, 1): 1.0}))
        )
        mdl = hm.HybridModel(n=2, m=1, phases=(hm.HybridPhase(f=f),))
        assert np.allclose(hm.eval_field(mdl, 0, [0.0, 0.0], [1.0]), [0.0, 1.0])

    def test_atom_evaluated_exactly(self):
        mdl = models.rimless_wheel()
        out = hm.eval_field(mdl, 0, [0.3, 1.2])
        assert out[0] == pytest.approx(1.2)
        assert out[1] == pytest.approx(math.sin(0.3), abs=1e-15)

    def test_jacobian_includes_atoms(self):
        mdl = models.rimless_wheel()
        Jx, Ju = hm.field_jacobian(mdl, 0, [0.3, 1.2])
        assert np.allclose(Jx, [[0.0, 1.0], [math.cos(0.3), 0.0]])
        assert Ju.shape == (2, 0)


class TestTaylorPolynomialize:
    def test_sin_about_zero_degree3(self):
        f = PolynomialVector(1, (Polynomial.zero(1),))
        atoms = (hm.AtomTerm(component=0, fn="sin", coeff=1.0, lin=(1.0,)),)
        p = hm.taylor_polynomialize(f, atoms, [0.0], 3)[0]
        assert p.coefficient((1,)) == pytest.approx(1.0)
        assert p.coefficient((3,)) == pytest.approx(-1.0 / 6.0)
        assert p.coefficient((0,)) == 0.0 and p.coefficient((2,)) == 0.0

    def test_polynomial_passthrough(self):
        mdl = models.van_der_pol()
        out = hm.phase_field_polynomial(mdl, 0, [0.5, -0.5], degree=3)
        assert out == mdl.phases[0].f

    def test_sin_about_quarter_pi_degree1(self):
        f = PolynomialVector(1, (Polynomial.zero(1),))
        atoms = (hm.AtomTerm(component=0, fn="sin", coeff=1.0, lin=(1.0,)),)
        c = math.pi / 4
        p = hm.taylor_polynomialize(f, atoms, [c], 1)[0]
        s, co = math.sin(c), math.cos(c)
        # sin(c) + cos(c) (theta - c)
        assert p.coefficient((1,)) == pytest.approx(co)
        assert p.coefficient((0,)) == pytest.approx(s - co * c)

    def test_degree5_remainder_bound_dense_sampling(self):
        # for sin on |theta - c| <= 0.5 the degree-5 remainder is <= 0.5^6/720
        f = PolynomialVector(1, (Polynomial.zero(1),))
        atoms = (hm.AtomTerm(component=0, fn="sin", coeff=1.0, lin=(1.0,)),)
        c = 0.3
        p = hm.taylor_polynomialize(f, atoms, [c], 5)[0]
        bound = 0.5**6 / 720.0
        for theta in np.linspace(c - 0.5, c + 0.5, 501):
            err = abs(pa.evaluate(p, [theta]) - math.sin(theta))
            assert err <= bound + 1e-15

    def test_truncation_of_high_degree_polynomial(self):
        # x^3 about 1 to degree 2: 1 + 3(x-1) + 3(x-1)^2 = 3x^2 - 3x + 1
        f = PolynomialVector(1, (Polynomial(1, {(3,): 1.0}),))
        p = hm.taylor_polynomialize(f, (), [1.0], 2)[0]
        assert p.coefficient((2,)) == pytest.approx(3.0)
        assert p.coefficient((1,)) == pytest.approx(-3.0)
        assert p.coefficient((0,)) == pytest.approx(1.0)

    def test_unsupported_atom(self):
        f = PolynomialVector(1, (Polynomial.zero(1),))
        atoms = (hm.AtomTerm(component=0, fn="tan", coeff=1.0, lin=(1.0,)),)
        with pytest.raises(hm.ModelError, match="unsupported atom"):
            hm.taylor_polynomialize(f, atoms, [0.0], 3)


class TestImpactValidation:
    def test_wheel_impact_point_maps_to_entry_plane(self):
        mdl = models.rimless_wheel()
        omega = models.rimless_wheel_fixed_point() / math.cos(2 * models.WHEEL_ALPHA)
        x_pre = [models.WHEEL_GAMMA + models.WHEEL_ALPHA, omega]
        hm.validate_impact_points(mdl, [(0, x_pre)])

    def test_misaligned_delta_detected(self):
        mdl = models.rimless_wheel()
        bad_delta = PolynomialVector(
            2,
            (
                Polynomial(2, {(1, 0): 1.0}),  # does not shift theta
                mdl.phases[0].delta[1],
            ),
        )
        bad = hm.HybridModel(
            n=2,
            m=0,
            phases=(
                hm.HybridPhase(
                    f=mdl.phases[0].f,
                    atoms=mdl.phases[0].atoms,
                    surface=mdl.phases[0].surface,
                    delta=bad_delta,
                ),
            ),
        )
        with pytest.raises(hm.ModelError, match="misses entry hyperplane"):
            hm.validate_impact_points(bad, [(0, [0.6, 1.0])])
