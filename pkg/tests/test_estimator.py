from __future__ import annotations

import functools
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import ortho_group

from ksafem.assembly import assemble_parts, density, mass
from ksafem.errors import InvalidInputError
from ksafem.estimator import (KsResidual, _interior_faces, _jumps, estimator_transform_bound, ks_indicators,
                              linear_indicators, residual_functional, residual_pairing, weak_residual)
from ksafem.linear_bvp import afem_linear, solve_linear
from ksafem.mesh import TetMesh, build_box_mesh, refine
from ksafem.model import GaussianWell, KohnShamModel, Projector, x_alpha
from ksafem.presets import manufactured_problem
from ksafem.quadrature import tri_rule
from ksafem.scf import ScfConfig, scf_solve
from ksafem.space import FeSpace

UNIT = [[0, 1]] * 3
BOX = [[-3, 3]] * 3


def ks_model(xc=True):
    return KohnShamModel(2, BOX, gaussian_wells=(GaussianWell(-3.0, (0.1, 0.0, 0.0), 1.0),),
                         projectors=(Projector(1.0, (0.0, 0.2, 0.0), 0.8),),
                         xc=x_alpha() if xc else None, hartree=xc)


@pytest.fixture(scope="module", params=[1, 2])
def ks_solution(request):
    return _solve(request.param)


@functools.lru_cache(maxsize=None)
def _solve(degree):
    s = FeSpace(build_box_mesh(BOX, 4), degree)
    orb, rep = scf_solve(s, ks_model(), ScfConfig(tol=1e-10, eig_tol=1e-10))
    assert rep.converged
    return s, orb


def test_zero_source_zero_indicators():
    s = FeSpace(refine(build_box_mesh(UNIT, 2), [0]), 2)
    ind = linear_indicators(s, lambda x: np.zeros(x.shape[:-1]), np.zeros(s.ndof))
    assert ind.eta2_total == 0.0 and ind.osc2_total == 0.0


def test_two_tet_jump_is_one_half():
    v = np.array([[-1, 0, 0], [0, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0]], float)
    mesh = TetMesh.from_arrays(v, [[0, 1, 2, 3], [4, 1, 3, 2]])
    assert np.all(mesh.volumes > 0) and len(mesh.interior_faces) == 1
    s = FeSpace(mesh, 1)
    # grad (1,0,0) on the left element, zero on the right
    phi = np.array([-1.0, 0, 0, 0, 0])
    full = SimpleNamespace(degree=1, mesh=mesh, local_coefficients=lambda c: s.local_full(c))
    faces = _interior_faces(mesh, tri_rule(2))
    assert_allclose(np.abs(faces.normal[0]), [1, 0, 0], atol=1e-15)
    assert_allclose(_jumps(full, phi[:, None], faces), 0.5, rtol=1e-14)


def test_p1_residual_has_no_laplacian():
    s, orb = _solve(1)
    model = ks_model()
    ind = ks_indicators(s, model, orb)
    parts = assemble_parts(s, model, density(s, orb.coeffs))
    rule = s.rule_rich
    phi = s.eval_at(orb.coeffs, rule.points)
    x = s.quad_points(rule)
    proj = sum(p(x)[..., None] * ((parts.projectors.T @ orb.coeffs)[j]) for j, p in enumerate(model.projectors))
    lam = orb.coeffs.T @ parts.matvec(orb.coeffs)
    lam = 0.5 * (lam + lam.T)
    r = parts.v_eff[..., None] * phi + proj - phi @ lam
    oracle = s.mesh.diameters ** 2 * np.einsum("tq,tqN->t", s.quad_weights(rule), r ** 2)
    assert_allclose(ind.residual2, oracle, rtol=1e-9, atol=1e-14 * oracle.max())


def test_indicator_invariants(ks_solution):
    s, orb = ks_solution
    ind = ks_indicators(s, ks_model(), orb)
    assert np.all(ind.eta2 >= 0) and np.all(ind.osc2 >= 0)
    assert ind.eta2_total == float(ind.eta2.sum())
    assert np.all(ind.osc2 <= ind.residual2 * (1 + 1e-12) + 1e-30)
    assert np.all(ind.osc2 <= ind.eta2)
    # faces counted for both neighbours
    assert_allclose(ind.eta2.sum(), ind.residual2.sum() + 2 * ind.face_jump2.sum(), rtol=1e-12)


def test_galerkin_orthogonality(ks_solution):
    s, orb = ks_solution
    g = np.random.default_rng(1).standard_normal((s.ndof, 2))
    g /= np.sqrt(np.diag(g.T @ (mass(s) @ g)))
    assert abs(residual_functional(s, ks_model(), orb, s, g)) <= 1e-9
    assert residual_functional(s, ks_model(), orb, s, np.zeros((s.ndof, 2))) == 0.0


def test_elementwise_equals_weak_form(ks_solution):
    s, orb = ks_solution
    fine = FeSpace(refine(s.mesh, np.arange(s.mesh.ntets)), s.degree)
    g = np.random.default_rng(2).standard_normal((fine.ndof, 2))
    res = KsResidual(s, ks_model(), orb)
    a, b = residual_pairing(res, fine, g), weak_residual(res, fine, g)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(b))
    assert abs(b) > 1e-3


def test_linear_elementwise_equals_weak_form():
    pb = manufactured_problem("peak", UNIT)
    s = FeSpace(build_box_mesh(UNIT, 3), 2)
    u = solve_linear(s, pb)
    fine = FeSpace(refine(s.mesh, np.arange(0, s.mesh.ntets, 2)), 2)
    g = np.random.default_rng(3).standard_normal(fine.ndof)
    from ksafem.estimator import LinearResidual
    res = LinearResidual(s, pb.source, u)
    assert_allclose(residual_pairing(res, fine, g), weak_residual(res, fine, g), rtol=1e-9)


def test_effectivity_bracket_manufactured():
    pb = manufactured_problem("peak", UNIT)
    res = afem_linear(build_box_mesh(UNIT, 2), pb, theta=0.5, n_iters=5)
    eff = res.effectivity()
    assert len(eff) == 5
    assert np.all((eff >= 0.2) & (eff <= 20))


def test_p1_estimator_halves_under_uniform_refinement():
    pb = manufactured_problem("sine", UNIT)
    eta = []
    for n in (8, 16):
        s = FeSpace(build_box_mesh(UNIT, n), 1)
        eta.append(np.sqrt(linear_indicators(s, pb.source, solve_linear(s, pb)).eta2_total))
    assert 2 * 0.85 <= eta[0] / eta[1] <= 2 * 1.15


def test_transform_bound(ks_solution):
    s, orb = ks_solution
    model = ks_model()
    a, b = estimator_transform_bound(s, model, orb, np.eye(2))
    assert a == b
    a, b = estimator_transform_bound(s, model, orb, np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert_allclose(a, b, rtol=1e-12)
    for seed in range(3):
        u = ortho_group.rvs(2, random_state=seed)
        a, b = estimator_transform_bound(s, model, orb, u)
        assert a <= 2 * b and b <= 2 * a
    with pytest.raises(InvalidInputError):
        estimator_transform_bound(s, model, orb, np.array([[1.0, 0.1], [0.0, 1.0]]))
