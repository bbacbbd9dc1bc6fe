"""Adaptive loop for the Kohn-Sham problem: solve, estimate, mark, refine.

Each outer iteration transfers the previous orbitals to the refined mesh as
the starting guess.  Rows are appended to an optional CSV stream and flushed
immediately, so an interrupted run leaves a valid prefix.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .assembly import mass, stiffness
from .eigensolve import m_orthonormalize
from .errors import InvalidInputError, KsafemError
from .estimator import ks_indicators
from .marking import mark
from .mesh import TetMesh, refine
from .model import KohnShamModel
from .scf import OrbitalSet, ScfConfig, scf_solve
from .space import FeSpace, transfer

CSV_HEADER = "iter,ndof,nelem,energy,eta2,osc2,scf_iters,eig_resid,align_dist,wall_s"


@dataclass(frozen=True)
class AfemConfig:
    strategy: str = "dorfler"
    theta: float = 0.5
    gamma_m: float = 0.5
    max_iters: int = 20
    eta_tol: float = 1e-8
    max_ndof: int = 200_000
    degree: int = 2
    scf: ScfConfig = field(default_factory=ScfConfig)

    def __post_init__(self):
        if self.strategy not in ("dorfler", "maximum"):
            raise InvalidInputError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.theta < 1.0:
            raise InvalidInputError(f"theta={self.theta} outside (0, 1)")
        if not 0.0 < self.gamma_m <= 1.0:
            raise InvalidInputError(f"gamma_m={self.gamma_m} outside (0, 1]")
        if self.eta_tol <= 0 or self.max_iters < 1 or self.max_ndof < 1:
            raise InvalidInputError("tolerances and caps must be positive")

    @property
    def mark_parameter(self) -> float:
        return self.theta if self.strategy == "dorfler" else self.gamma_m


@dataclass
class IterationRecord:
    iter: int
    ndof: int
    nelem: int
    energy: float
    eta2: float
    osc2: float
    scf_iters: int
    eig_resid: float
    align_dist: float
    wall_s: float
    eigenvalues: np.ndarray = field(repr=False, default=None)

    def csv_row(self) -> str:
        vals = [self.iter, self.ndof, self.nelem, self.energy, self.eta2, self.osc2, self.scf_iters,
                self.eig_resid, self.align_dist, self.wall_s]
        return ",".join(str(v) if isinstance(v, (int, np.integer)) else f"{v:.17g}" for v in vals)


@dataclass
class ConvergenceRecord:
    rows: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = ""
    final: OrbitalSet | None = field(default=None, repr=False)
    final_mesh: TetMesh | None = field(default=None, repr=False)
    indicators: object = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @classmethod
    def synthetic(cls, ndof, eta2, nelem=None) -> "ConvergenceRecord":
        """Record carrying only sizes and estimator values (for curve fitting)."""
        nelem = ndof if nelem is None else nelem
        rows = [IterationRecord(k, int(d), int(t), math.nan, float(e), math.nan, 0, math.nan, math.nan, 0.0)
                for k, (d, t, e) in enumerate(zip(ndof, nelem, eta2))]
        return cls(rows)


class AfemStageError(KsafemError):
    """A stage of the adaptive loop failed; ``record`` holds the completed iterations."""

    def __init__(self, stage: str, cause: Exception, record: ConvergenceRecord):
        super().__init__(f"{stage} failed: {cause}")
        self.stage, self.cause, self.record = stage, cause, record


class Alignment(NamedTuple):
    u: np.ndarray
    distance: float


def align_orbitals(space: FeSpace, phi_a, phi_b) -> Alignment:
    """Orthogonal ``U`` minimizing ``|| Phi_a U - Phi_b ||_M`` and the H^1 distance after rotation.

    Both coefficient blocks must live on ``space``.  A nearly singular
    overlap matrix triggers a warning; ``U`` is still the orthogonal polar
    factor of its SVD.
    """
    a = np.asarray(getattr(phi_a, "coeffs", phi_a), dtype=float).reshape(space.ndof, -1)
    b = np.asarray(getattr(phi_b, "coeffs", phi_b), dtype=float).reshape(space.ndof, -1)
    if a.shape != b.shape:
        raise InvalidInputError("orbital blocks differ in shape")
    m = mass(space)
    w, s, vt = np.linalg.svd(a.T @ (m @ b))
    if s[-1] < 1e-8 * max(s[0], 1e-300):
        warnings.warn("overlap of the two orbital sets is rank deficient", RuntimeWarning, stacklevel=2)
    u = w @ vt
    d = a @ u - b
    dist2 = float(np.sum(d * (m @ d)) + np.sum(d * (stiffness(space) @ d)))
    return Alignment(u, math.sqrt(max(dist2, 0.0)))


class CurveFit(NamedTuple):
    slope_ndof: float
    slope_elements: float
    residual_ndof: float
    residual_elements: float
    points: int


def _fit(x, y):
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    return float(coef[0]), float(np.sqrt(res[0] / len(x))) if len(res) else 0.0


def complexity_curve(record: ConvergenceRecord, last: int | None = None) -> CurveFit:
    """Least-squares slopes of ``log eta`` against ``log ndof`` and ``log (#T_k - #T_0)``.

    Fits the last ``last`` rows, or the last half of the record by default.
    """
    n = len(record.rows)
    if n < 4:
        raise InvalidInputError("at least four iterations are needed for a slope")
    k = max(2, n // 2) if last is None else last
    if not 2 <= k <= n:
        raise InvalidInputError(f"cannot fit {k} points from {n} rows")
    rows = record.rows[-k:]
    eta = np.log(np.sqrt([r.eta2 for r in rows]))
    s1, r1 = _fit(np.log([r.ndof for r in rows]), eta)
    grown = np.array([r.nelem - record.rows[0].nelem for r in rows], dtype=float)
    ok = grown > 0
    s2, r2 = _fit(np.log(grown[ok]), eta[ok]) if ok.sum() >= 2 else (math.nan, math.nan)
    return CurveFit(s1, s2, r1, r2, k)


def run_ks_afem(mesh0: TetMesh, model: KohnShamModel, config: AfemConfig | None = None,
                csv_path=None, vtk_dir=None, callback=None) -> ConvergenceRecord:
    """Adaptive finite element loop; stops on ``eta^2 <= eta_tol``, the DOF cap or the iteration cap."""
    cfg = config or AfemConfig()
    record = ConvergenceRecord()
    stream = None
    if csv_path is not None:
        stream = open(csv_path, "w", encoding="utf-8", newline="\n")
        stream.write(CSV_HEADER + "\n")
        stream.flush()
    mesh = mesh0
    prev: tuple[FeSpace, np.ndarray] | None = None
    stage = "setup"
    try:
        for k in range(cfg.max_iters):
            t0 = time.perf_counter()
            stage = "space"
            space = FeSpace(mesh, cfg.degree)
            if space.ndof > cfg.max_ndof:
                record.stop_reason = "ndof_cap"
                break
            if space.ndof < model.n_orbitals:
                raise InvalidInputError(f"{space.ndof} DOFs cannot hold {model.n_orbitals} orbitals")
            guess = moved = None
            if prev is not None:
                stage = "transfer"
                moved = transfer(prev[0], space, prev[1])
                guess = m_orthonormalize(moved, mass(space))
            stage = "solve"
            orbitals, report = scf_solve(space, model, cfg.scf, guess)
            stage = "estimate"
            ind = ks_indicators(space, model, orbitals)
            align = math.nan if moved is None else align_orbitals(space, moved, orbitals.coeffs).distance
            row = IterationRecord(k, space.ndof, mesh.ntets, report.energies[-1], ind.eta2_total,
                                  ind.osc2_total, report.iterations, float(orbitals.eig_residuals.max()),
                                  align, time.perf_counter() - t0, orbitals.eigenvalues.copy())
            for name in ("energy", "eta2", "osc2"):
                if not math.isfinite(getattr(row, name)):
                    raise KsafemError(f"non-finite {name}")
            record.rows.append(row)
            record.final, record.final_mesh, record.indicators = orbitals, mesh, ind
            if stream is not None:
                stream.write(row.csv_row() + "\n")
                stream.flush()
            if vtk_dir is not None:
                _dump_vtk(Path(vtk_dir), k, space, model, orbitals, ind)
            if callback is not None:
                callback(row)
            if not report.converged:
                warnings.warn(f"SCF did not converge at iteration {k}", RuntimeWarning, stacklevel=2)
            if ind.eta2_total <= cfg.eta_tol:
                record.stop_reason = "eta_tol"
                break
            if space.ndof >= cfg.max_ndof:
                record.stop_reason = "ndof_cap"
                break
            stage = "mark"
            marked = mark(ind, cfg.strategy, cfg.mark_parameter)
            if len(marked) == 0:
                record.stop_reason = "eta_zero"
                break
            stage = "refine"
            prev = (space, orbitals.coeffs)
            mesh = refine(mesh, marked.indices)
        else:
            record.stop_reason = "max_iters"
    except KsafemError as exc:
        raise AfemStageError(stage, exc, record) from exc
    finally:
        if stream is not None:
            stream.close()
    return record


def _dump_vtk(out: Path, k: int, space: FeSpace, model: KohnShamModel, orbitals: OrbitalSet, ind) -> None:
    from .assembly import hartree_field
    from .vtk import write_vtk
    out.mkdir(parents=True, exist_ok=True)
    nv = space.mesh.nvertices
    write_vtk(out / f"mesh_{k:04d}.vtk", space.mesh)
    point = {"rho": orbitals.density.nodal[:nv]}
    field_ = hartree_field(space, model, orbitals.density)
    if field_ is not None:
        point["v_hartree"] = field_.values[:nv]
    write_vtk(out / f"density_{k:04d}.vtk", space.mesh, point_data=point)
    write_vtk(out / f"indicators_{k:04d}.vtk", space.mesh, cell_data={"eta2": ind.eta2, "osc2": ind.osc2})
