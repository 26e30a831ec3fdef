"""Builders for the example models shipped with the package.

These are the systems exercised by the test suite and the acceptance
criteria: the harmonic oscillator, the van der Pol oscillator (stable and
time-reversed controlled variants) and the rimless wheel rolling downhill.
``write_all`` regenerates the JSON files under ``models/``.
"""

from __future__ import annotations

import math
import os

from .hybridmodel import (
    AtomTerm,
    HybridModel,
    HybridPhase,
    SwitchingSurface,
    save_model,
)
from .polyalg import Polynomial, PolynomialVector

# rimless wheel geometry: spokes 2*alpha apart rolling down slope gamma,
# in units with g/l = 1
WHEEL_ALPHA = 0.4
WHEEL_GAMMA = 0.2


def harmonic_oscillator() -> HybridModel:
    """Unit circle rotation: x1' = x2, x2' = -x1."""
    f = PolynomialVector(
        2,
        (
            Polynomial(2, {(0, 1): 1.0}),
            Polynomial(2, {(1, 0): -1.0}),
        ),
    )
    return HybridModel(n=2, m=0, phases=(HybridPhase(f=f),))


def van_der_pol(mu: float = 1.0) -> HybridModel:
    """x1' = x2, x2' = -x1 + mu (1 - x1^2) x2; stable limit cycle."""
    f = PolynomialVector(
        2,
        (
            Polynomial(2, {(0, 1): 1.0}),
            Polynomial(2, {(1, 0): -1.0, (0, 1): mu, (2, 1): -mu}),
        ),
    )
    return HybridModel(n=2, m=0, phases=(HybridPhase(f=f),))


def van_der_pol_reversed(mu: float = 1.0) -> HybridModel:
    """Time-reversed van der Pol with one input on x2'; the cycle is unstable.

    x1' = -x2, x2' = x1 - mu (1 - x1^2) x2 + u.
    """
    f = PolynomialVector(
        3,
        (
            Polynomial(3, {(0, 1, 0): -1.0}),
            Polynomial(3, {(1, 0, 0): 1.0, (0, 1, 0): -mu, (2, 1, 0): mu, (0, 0, 1): 1.0}),
        ),
    )
    return HybridModel(n=2, m=1, phases=(HybridPhase(f=f),))


def rimless_wheel(alpha: float = WHEEL_ALPHA, gamma: float = WHEEL_GAMMA) -> HybridModel:
    """Rimless wheel: theta' = omega, omega' = sin(theta), impact at theta = gamma + alpha.

    Reset (gamma+alpha, omega) -> (gamma-alpha, cos(2 alpha) omega); the guard
    omega >= 0 restricts impacts to forward rolling.
    """
    f_poly = PolynomialVector(
        2,
        (
            Polynomial(2, {(0, 1): 1.0}),
            Polynomial.zero(2),
        ),
    )
    atoms = (AtomTerm(component=1, fn="sin", coeff=1.0, lin=(1.0, 0.0), offset=0.0),)
    surface = SwitchingSurface(
        c_minus=[1.0, 0.0],
        d_minus=gamma + alpha,
        guard=Polynomial(2, {(0, 1): 1.0}),
        c_plus=[1.0, 0.0],
        d_plus=gamma - alpha,
    )
    delta = PolynomialVector(
        2,
        (
            Polynomial(2, {(1, 0): 1.0, (0, 0): -2.0 * alpha}),
            Polynomial(2, {(0, 1): math.cos(2.0 * alpha)}),
        ),
    )
    return HybridModel(
        n=2,
        m=0,
        phases=(HybridPhase(f=f_poly, atoms=atoms, surface=surface, delta=delta),),
    )


def rimless_wheel_fixed_point(alpha: float = WHEEL_ALPHA, gamma: float = WHEEL_GAMMA) -> float:
    """Post-impact angular velocity of the rolling orbit, by energy bookkeeping.

    Between impacts energy (omega^2/2 + cos theta) is conserved; each impact
    scales omega by cos(2 alpha).  The rolling fixed point therefore satisfies
    omega+^2 = cos^2(2a) (omega+^2 + 2(cos(g-a) - cos(g+a))).
    """
    c2 = math.cos(2.0 * alpha) ** 2
    gain = 2.0 * (math.cos(gamma - alpha) - math.cos(gamma + alpha))
    return math.sqrt(c2 * gain / (1.0 - c2))


BUILDERS = {
    "harmonic": harmonic_oscillator,
    "vdp": van_der_pol,
    "vdp_reversed": van_der_pol_reversed,
    "rimless_wheel": rimless_wheel,
}


def write_all(directory: str) -> list:
    """Write every shipped model as JSON into ``directory``; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, build in BUILDERS.items():
        path = os.path.join(directory, f"{name}.json")
        save_model(build(), path)
        paths.append(path)
    return paths
