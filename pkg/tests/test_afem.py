from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import ortho_group

from ksafem.afem import (CSV_HEADER, AfemConfig, AfemStageError, ConvergenceRecord, align_orbitals,
                         complexity_curve, run_ks_afem)
from ksafem.assembly import mass
from ksafem.errors import InvalidInputError
from ksafem.mesh import build_box_mesh
from ksafem.model import GaussianWell, KohnShamModel, Projector
from ksafem.scf import scf_solve
from ksafem.space import FeSpace

BOX = [[-5, 5]] * 3


def linear_model(n=1):
    return KohnShamModel(n, BOX, gaussian_wells=(GaussianWell(-3.0, (0.1, -0.05, 0.02), 1.0),),
                         projectors=(Projector(2.0, (0.1, -0.05, 0.02), 0.7),))


@pytest.fixture(scope="module")
def linear_run(tmp_path_factory):
    path = tmp_path_factory.mktemp("afem") / "conv.csv"
    cfg = AfemConfig(max_iters=6, max_ndof=20000)
    return run_ks_afem(build_box_mesh(BOX, 4), linear_model(), cfg, csv_path=path), path


@pytest.fixture(scope="module")
def orbitals():
    s = FeSpace(build_box_mesh([[-4, 4]] * 3, 4), 2)
    orb, _ = scf_solve(s, linear_model(3))
    return s, orb.coeffs


def test_align_identity(orbitals):
    s, c = orbitals
    al = align_orbitals(s, c, c)
    assert_allclose(al.u, np.eye(3), atol=1e-12)
    assert al.distance <= 1e-10


def test_align_sign_flip():
    s = FeSpace(build_box_mesh([[-4, 4]] * 3, 3), 2)
    c = scf_solve(s, linear_model(1))[0].coeffs
    al = align_orbitals(s, c, -c)
    assert_allclose(al.u, [[-1.0]], atol=1e-12)
    assert al.distance <= 1e-10


def test_align_recovers_rotation(orbitals):
    s, c = orbitals
    u0 = ortho_group.rvs(3, random_state=0)
    al = align_orbitals(s, c, c @ u0)
    assert al.distance <= 1e-10
    assert_allclose(al.u.T @ u0, np.eye(3), atol=1e-8)


def test_align_rank_deficient_warns(orbitals):
    s, c = orbitals
    other = np.zeros_like(c)
    other[:, 0] = c[:, 0]
    with pytest.warns(RuntimeWarning):
        al = align_orbitals(s, c, other)
    assert_allclose(al.u.T @ al.u, np.eye(3), atol=1e-12)


def test_complexity_curve_power_law():
    ndof = np.array([100, 230, 500, 1200, 2600, 6000])
    rec = ConvergenceRecord.synthetic(ndof, (3.0 * ndof ** (-2 / 3)) ** 2, nelem=6 * ndof)
    fit = complexity_curve(rec)
    assert_allclose(fit.slope_ndof, -2 / 3, atol=1e-6)
    assert fit.points == 3
    flat = complexity_curve(ConvergenceRecord.synthetic(ndof, np.full(6, 0.3)))
    assert abs(flat.slope_ndof) <= 1e-12 and abs(flat.slope_elements) <= 1e-12
    with pytest.raises(InvalidInputError):
        complexity_curve(ConvergenceRecord.synthetic(ndof[:3], np.ones(3)))


def test_linear_subcase_energy_and_eigenvalue_monotone(linear_run):
    rec, _ = linear_run
    e = rec.column("energy")
    mu = np.array([r.eigenvalues[0] for r in rec.rows])
    assert np.all(np.diff(e) <= 1e-10)
    assert np.all(np.diff(mu) <= 1e-10)
    assert np.all(np.diff(rec.column("ndof")) > 0)
    for name in ("energy", "eta2", "osc2"):
        assert np.all(np.isfinite(rec.column(name)))


def test_alignment_distance_stabilizes(linear_run):
    rec, _ = linear_run
    d = rec.column("align_dist")[1:]
    assert np.all(np.isfinite(d))
    # recorded stabilization: last three distances nonincreasing up to a factor 2
    assert np.all(d[-2:] <= 2 * d[-3:-1])


def test_csv_stream_matches_record(linear_run):
    rec, path = linear_run
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == len(rec.rows) + 1
    first = lines[1].split(",")
    assert int(first[1]) == rec.rows[0].ndof
    assert float(first[3]) == rec.rows[0].energy


def test_spaces_are_nested_across_the_loop():
    from ksafem.mesh import refine
    from ksafem.space import transfer
    mesh = build_box_mesh(BOX, 2)
    rng = np.random.default_rng(0)
    for _ in range(3):
        fine_mesh = refine(mesh, rng.choice(mesh.ntets, 5, replace=False))
        coarse, fine = FeSpace(mesh, 2), FeSpace(fine_mesh, 2)
        c = rng.standard_normal(coarse.ndof)
        cf = transfer(coarse, fine, c)
        # exact embedding preserves the mass norm
        assert_allclose(cf @ mass(fine) @ cf, c @ mass(coarse) @ c, rtol=1e-12)
        mesh = fine_mesh


def test_maximum_and_dorfler_both_reach_tolerance():
    model = KohnShamModel(1, [[0, 1]] * 3)
    out = {}
    for strategy in ("dorfler", "maximum"):
        cfg = AfemConfig(strategy=strategy, max_iters=40, eta_tol=0.5, max_ndof=50000)
        rec = run_ks_afem(build_box_mesh([[0, 1]] * 3, 2), model, cfg)
        assert rec.stop_reason == "eta_tol"
        out[strategy] = rec
    for rec in out.values():
        assert rec.rows[-1].eta2 <= 0.5 and len(rec.rows) >= 5


def test_stage_error_carries_partial_record():
    model = KohnShamModel(5, [[0, 1]] * 3)
    with pytest.raises(AfemStageError) as info:
        run_ks_afem(build_box_mesh([[0, 1]] * 3, 1), model, AfemConfig(max_iters=2))
    assert info.value.stage == "space"
    assert info.value.record.rows == []


def test_config_validation():
    for kwargs in (dict(theta=1.0), dict(gamma_m=0.0), dict(strategy="bulk"), dict(eta_tol=0.0)):
        with pytest.raises(InvalidInputError):
            AfemConfig(**kwargs)
