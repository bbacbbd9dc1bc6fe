"""Self-consistent field iteration on a fixed mesh.

The density that is mixed lives at the rich quadrature points (with its
nodal interpolant carried along for the Hartree solve), so a convex
combination of densities stays nonnegative where xc is evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import Density, assemble_parts, density, integrate, mass, stiffness, total_energy
from .eigensolve import DENSE_LIMIT, amg_preconditioner, lowest_eigs
from .model import KohnShamModel
from .space import FeSpace


@dataclass(frozen=True)
class ScfConfig:
    tol: float = 1e-7
    mixing: float = 0.3
    max_iter: int = 300
    eig_tol: float = 1e-8
    seed: int = 0


@dataclass
class OrbitalSet:
    """Discrete orbitals (M-orthonormal columns), their eigenvalues and density."""

    space: FeSpace
    coeffs: np.ndarray
    eigenvalues: np.ndarray
    density: Density
    eig_residuals: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @property
    def lam(self) -> np.ndarray:
        return np.diag(self.eigenvalues)


@dataclass
class ScfReport:
    energies: list = field(default_factory=list)
    density_residuals: list = field(default_factory=list)
    eig_residuals: list = field(default_factory=list)
    converged: bool = False
    hartree_method: str | None = None

    @property
    def iterations(self) -> int:
        return len(self.energies)


def density_residual(space: FeSpace, rho_out: Density, rho_in: Density) -> float:
    """``|| rho_out - rho_in ||_0 / || rho_in ||_0`` at the rich quadrature points."""
    den = np.sqrt(integrate(space, rho_in.quad ** 2))
    num = np.sqrt(integrate(space, (rho_out.quad - rho_in.quad) ** 2))
    return float(num / den) if den > 0 else float("inf")


def preconditioner(space: FeSpace):
    """AMG V-cycle for ``1/2 K + M`` (cached on the space); None on small spaces."""
    if space.ndof <= DENSE_LIMIT:
        return None
    key = "eig_precond"
    if key not in space.cache:
        space.cache[key] = amg_preconditioner(0.5 * stiffness(space) + mass(space))
    return space.cache[key]


def scf_solve(space: FeSpace, model: KohnShamModel, config: ScfConfig | None = None,
              guess: np.ndarray | None = None) -> tuple[OrbitalSet, ScfReport]:
    """Ground state of the discrete Kohn-Sham equations by linear density mixing.

    ``guess`` holds orbital coefficients on ``space`` used both as the
    eigensolver start and (for nonlinear models) to form the first input
    density.  Without it the first density comes from the density-independent
    part of the Hamiltonian.  Nonconvergence returns the last iterate with
    ``report.converged = False``.
    """
    cfg = config or ScfConfig()
    n = model.n_orbitals
    m = mass(space)
    pre = preconditioner(space)
    report = ScfReport(hartree_method=model.hartree_method if model.hartree else None)

    def solve(rho, start):
        parts = assemble_parts(space, model, rho)
        eig = lowest_eigs(parts.sparse, m, n, lowrank=parts.projectors, tol=cfg.eig_tol,
                          guess=start, seed=cfg.seed, precond=pre)
        return parts, eig

    start = guess
    if model.is_linear:
        _, eig = solve(None, start)
        rho = density(space, eig.vectors)
        report.energies.append(total_energy(space, model, eig.vectors))
        report.density_residuals.append(0.0)
        report.eig_residuals.append(float(eig.residuals.max()))
        report.converged = True
        return OrbitalSet(space, eig.vectors, eig.values, rho, eig.residuals), report

    if guess is not None:
        rho_in = density(space, guess)
    else:
        _, eig = solve(None, None)
        rho_in, start = density(space, eig.vectors), eig.vectors
    best = None
    for _ in range(cfg.max_iter):
        _, eig = solve(rho_in, start)
        rho_out = density(space, eig.vectors)
        res = density_residual(space, rho_out, rho_in)
        report.energies.append(total_energy(space, model, eig.vectors))
        report.density_residuals.append(res)
        report.eig_residuals.append(float(eig.residuals.max()))
        best = OrbitalSet(space, eig.vectors, eig.values, rho_out, eig.residuals)
        if res <= cfg.tol:
            report.converged = True
            break
        rho_in = rho_in.mix(rho_out, cfg.mixing)
        start = eig.vectors
    return best, report
