"""Kohn-Sham model data: local potential, nonlocal projectors, xc functional.

Gaussian profiles use the convention ``g(x) = exp(-|x - c|^2 / (2 w^2))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractViolation, InvalidInputError

# ratio of the Coulomb cap radius to the domain diameter
COULOMB_CAP = 1e-8
RHO_FLOOR = 1e-14
SLATER_CX = 0.75 * (3.0 / math.pi) ** (1.0 / 3.0)


@dataclass(frozen=True)
class CoulombWell:
    charge: float
    center: tuple[float, float, float]


@dataclass(frozen=True)
class GaussianWell:
    depth: float
    center: tuple[float, float, float]
    width: float


@dataclass(frozen=True)
class Projector:
    amplitude: float
    center: tuple[float, float, float]
    width: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        r2 = np.sum((np.asarray(points) - np.asarray(self.center)) ** 2, axis=-1)
        return self.amplitude * np.exp(-0.5 * r2 / self.width ** 2)


@dataclass(frozen=True)
class XcFunctional:
    """Exchange-correlation energy density with its first two derivatives."""

    name: str
    e: Callable[[np.ndarray], np.ndarray]
    e1: Callable[[np.ndarray], np.ndarray]
    e2: Callable[[np.ndarray], np.ndarray]
    alpha: float | None = None


def x_alpha(alpha: float = 2.0 / 3.0) -> XcFunctional:
    """Slater X-alpha exchange, e(t) = -c_x alpha t^{4/3}."""
    if not 0.0 < alpha <= 1.5:
        raise InvalidInputError(f"x_alpha parameter {alpha} outside (0, 1.5]")
    c = SLATER_CX * alpha
    return XcFunctional(
        "x_alpha",
        e=lambda t: -c * np.cbrt(t) * t,
        e1=lambda t: -(4.0 / 3.0) * c * np.cbrt(t),
        e2=lambda t: -(4.0 / 9.0) * c / np.cbrt(np.maximum(t, RHO_FLOOR)) ** 2,
        alpha=alpha,
    )


@dataclass(frozen=True)
class KohnShamModel:
    """Everything that defines the continuous problem besides the mesh."""

    n_orbitals: int
    domain_box: np.ndarray
    coulomb_wells: tuple[CoulombWell, ...] = ()
    gaussian_wells: tuple[GaussianWell, ...] = ()
    projectors: tuple[Projector, ...] = ()
    xc: XcFunctional | None = None
    hartree: bool = False
    hartree_method: str = "poisson"
    name: str = field(default="model", compare=False)

    def __post_init__(self):
        if self.n_orbitals < 1:
            raise InvalidInputError("n_orbitals must be at least 1")
        if any(p.width <= 0 for p in self.projectors) or any(g.width <= 0 for g in self.gaussian_wells):
            raise InvalidInputError("widths must be positive")
        if self.hartree_method not in ("poisson", "direct"):
            raise InvalidInputError(f"unknown hartree method {self.hartree_method!r}")
        object.__setattr__(self, "domain_box", np.asarray(self.domain_box, dtype=float).reshape(3, 2))

    @property
    def is_linear(self) -> bool:
        """True when the Hamiltonian does not depend on the density."""
        return not self.hartree and self.xc is None

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.domain_box[:, 1] - self.domain_box[:, 0]))


def eval_vloc(model: KohnShamModel, points: np.ndarray) -> np.ndarray:
    """Local potential at physical points (any leading shape, last axis 3)."""
    x = np.asarray(points, dtype=float)
    v = np.zeros(x.shape[:-1])
    r_min = COULOMB_CAP * model.diameter
    for w in model.coulomb_wells:
        r = np.linalg.norm(x - np.asarray(w.center), axis=-1)
        v -= w.charge / np.maximum(r, r_min)
    for g in model.gaussian_wells:
        r2 = np.sum((x - np.asarray(g.center)) ** 2, axis=-1)
        v += g.depth * np.exp(-0.5 * r2 / g.width ** 2)
    return v


def xc_eval(xc: XcFunctional | None, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Energy density and potential ``(e(rho), e'(rho))``.

    Values below ``RHO_FLOOR`` are treated as zero density.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.size and rho.min() < -1e-12:
        raise ContractViolation(f"negative density {rho.min():.3e} passed to xc")
    if xc is None:
        z = np.zeros_like(rho)
        return z, z.copy()
    t = np.where(rho < RHO_FLOOR, 0.0, rho)
    return xc.e(t), xc.e1(t)


@dataclass(frozen=True)
class GrowthCheck:
    ok: bool
    constant: float
    witness: float | None = None

    def __bool__(self) -> bool:
        return self.ok


def check_growth(xc: XcFunctional | None, p: float, samples: np.ndarray,
                 constant: float | None = None) -> GrowthCheck:
    """Check ``|e'(t)| + |t e''(t)| <= c (1 + t^p)`` on nonnegative samples.

    Without an explicit ``constant`` it is calibrated as ten times the largest
    ratio on a fixed grid of (0, 1]; growth faster than ``t^p`` then fails at
    large t.
    """
    t = np.sort(np.asarray(samples, dtype=float))
    if t.size == 0 or t[0] < 0:
        raise InvalidInputError("samples must be a nonempty set of nonnegative numbers")
    if xc is None:
        return GrowthCheck(True, 0.0)
    lhs = np.abs(xc.e1(t)) + np.abs(t * xc.e2(t))
    ratio = lhs / (1.0 + t ** p)
    if constant is None:
        ref = np.linspace(1e-3, 1.0, 1000)
        constant = 10.0 * float(np.max((np.abs(xc.e1(ref)) + np.abs(ref * xc.e2(ref))) / (1.0 + ref ** p)))
    bad = np.flatnonzero(ratio > constant * (1 + 1e-12))
    if bad.size:
        return GrowthCheck(False, float(constant), float(t[bad[0]]))
    return GrowthCheck(True, float(constant))


def projector_matrix(space, model: KohnShamModel) -> np.ndarray:
    """Inner products ``(psi_a, zeta_j)`` of basis functions with projectors, shape (ndof, n)."""
    key = ("projectors", model.projectors)
    if key not in space.cache:
        if not model.projectors:
            space.cache[key] = np.zeros((space.ndof, 0))
        else:
            from .space import basis_values
            rule = space.rule_rich
            x = space.quad_points(rule)
            w = space.quad_weights(rule)
            psi = basis_values(space.degree, rule.points)
            cols = []
            for proj in model.projectors:
                local = np.einsum("tq,qa->ta", w * proj(x), psi)
                cols.append(space.assemble_vector(local))
            space.cache[key] = np.stack(cols, axis=1)
    return space.cache[key]


def apply_vnl(model: KohnShamModel, space, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Load vector of ``V_nl phi`` and the energy ``sum_j (phi, zeta_j)^2`` per column."""
    c = np.asarray(coeffs, dtype=float)
    p = projector_matrix(space, model)
    overlaps = p.T @ c
    return p @ overlaps, np.sum(overlaps ** 2, axis=0)


def vloc_l2_norm(model: KohnShamModel, space) -> float:
    """Quadrature value of the L2 norm of V_loc over the mesh."""
    rule = space.rule_rich
    v = eval_vloc(model, space.quad_points(rule))
    val = float(np.sqrt(np.sum(space.quad_weights(rule) * v ** 2)))
    if not math.isfinite(val):
        raise ContractViolation("V_loc is not square integrable on this mesh")
    return val
