"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
from __future__ import annotations

import itertools
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import ortho_group

from ksafem.afem import ConvergenceRecord, complexity_curve, run_ks_afem
from ksafem.assembly import density, lagrange_multiplier, mass, total_energy
from ksafem.cli import EXIT_OK, load_config, run
from ksafem.config import build_afem_config, build_mesh, build_model
from ksafem.estimator import LinearResidual, estimator_transform_bound, residual_functional, residual_pairing
from ksafem.hartree import coulomb_direct, coulomb_pairing, hartree_direct, hartree_poisson
from ksafem.linear_bvp import gradient_distance, h1_seminorm_error, solve_linear
from ksafem.marking import mark_dorfler
from ksafem.mesh import build_box_mesh, check_conformity, refine, shape_regularity
from ksafem.presets import manufactured_problem, presets
from ksafem.scf import ScfConfig, scf_solve
from ksafem.space import FeSpace, interpolate

GAMMA_STAR = 3.0 + np.sqrt(2.0)
# effectivity eta / |grad e| on linear_manufactured, recorded once (6.0004 .. 8.1851), with 3% slack
EFFECTIVITY_BRACKET = (5.8, 8.4)
KS_PRESETS = ("laplace_eigs_cube", "gaussian_well_n1", "hydrogen_coulomb", "two_orbital_toy", "nonlocal_demo")


def verdict(capsys, number, detail, checks):
    ok = all(checks.values())
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, [name for name, good in checks.items() if not good]


def quiet(*args, **kwargs):
    pass


def read_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    return np.atleast_1d(data)


def test_criterion_01_hydrogen_estimator_slope(tmp_path, capsys):
    cfg = load_config("hydrogen_coulomb")
    status = run(cfg, tmp_path, log=quiet)
    rows = read_csv(tmp_path / "convergence.csv")
    rec = ConvergenceRecord.synthetic(rows["ndof"], rows["eta2"], rows["nelem"])
    slope = complexity_curve(rec, last=4).slope_ndof
    energy = rows["energy"][-1]
    band = cfg["output"]["energy_band"]
    verdict(capsys, 1, f"slope {slope:.4f} over last 4 of {len(rows)} iterations, "
                       f"final ndof {int(rows['ndof'][-1])}, E {energy:.6f}", {
        "exit": status == EXIT_OK,
        "slope": -0.866 <= slope <= -0.466,
        "rows": len(rows) >= 6,
        "eta_decreases": rows["eta2"][-1] < rows["eta2"][0],
        "cap": rows["ndof"][-1] <= 2e5,
        "energy_band": abs(energy + 0.5) <= band,
    })


@pytest.fixture(scope="module")
def linear_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("linear")
    status = run(load_config("linear_manufactured"), out, log=quiet)
    summary = dict(line.split(": ", 1) for line in (out / "summary.txt").read_text().splitlines())
    return status, summary


def test_criterion_02_linear_contraction(linear_run, capsys):
    status, summary = linear_run
    ratios = np.array([float(r) for r in summary["contraction_ratios"].split()])
    verdict(capsys, 2, f"{len(ratios) + 1} iterations, max ratio {ratios.max():.4f}", {
        "exit": status == EXIT_OK,
        "iterations": len(ratios) + 1 >= 8,
        "ratios": bool(np.all(ratios < 0.99)),
    })


def test_criterion_03_effectivity_bracket(linear_run, capsys):
    status, summary = linear_run
    eff = np.array([float(e) for e in summary["effectivity"].split()])
    lo, hi = EFFECTIVITY_BRACKET
    verdict(capsys, 3, f"effectivity in [{eff.min():.3f}, {eff.max():.3f}], ratio {eff.max() / eff.min():.3f}", {
        "factor5": eff.max() / eff.min() <= 5,
        "recorded": bool(np.all((eff >= lo) & (eff <= hi))),
    })


def test_criterion_04_laplace_spectrum(tmp_path, capsys):
    cfg = load_config("laplace_eigs_cube")
    rec = run_ks_afem(build_mesh(cfg), build_model(cfg), build_afem_config(cfg))
    mu = np.array([r.eigenvalues for r in rec.rows])
    lam1, lam2 = 1.5 * np.pi ** 2, 3.0 * np.pi ** 2
    final = mu[-1]
    verdict(capsys, 4, f"lambda1 {final[0]:.5f} (rel {final[0] / lam1 - 1:.2e}) at ndof {rec.rows[-1].ndof}, "
                       f"next {np.round(final[1:], 4).tolist()}", {
        "from_above": bool(np.all(mu[:, 0] >= lam1)),
        "monotone": bool(np.all(np.diff(mu[:, 0]) <= 1e-10)),
        "lambda1": abs(final[0] / lam1 - 1) <= 0.005,
        "next3": bool(np.all(np.abs(final[1:4] / lam2 - 1) <= 0.01)),
        "ndof": 2.5e4 <= rec.rows[-1].ndof <= 1e5,
    })


def test_criterion_05_unitary_invariance(capsys):
    worst = dict(energy=0.0, rho=0.0, lam=0.0)
    bounds = True
    count = 0
    for p, name in enumerate(KS_PRESETS):
        cfg = presets()[name].replace("model", n_orbitals=3)
        model = build_model(cfg)
        space = FeSpace(build_mesh(cfg), cfg["mesh"]["degree"])
        orb, _ = scf_solve(space, model, ScfConfig(max_iter=3, mixing=0.5))
        c = orb.coeffs
        e0, rho0, lam0 = total_energy(space, model, c), density(space, c).quad, lagrange_multiplier(space, model, c)
        for k in range(4):
            u = ortho_group.rvs(3, random_state=100 * p + k)
            cu = c @ u
            worst["energy"] = max(worst["energy"], abs(total_energy(space, model, cu) / e0 - 1))
            worst["rho"] = max(worst["rho"], np.abs(density(space, cu).quad - rho0).max() / np.abs(rho0).max())
            worst["lam"] = max(worst["lam"], np.abs(lagrange_multiplier(space, model, cu) - u.T @ lam0 @ u).max())
            a, b = estimator_transform_bound(space, model, c, u)
            bounds &= a <= 3 * b and b <= 3 * a
            count += 1
    verdict(capsys, 5, f"{count} rotations: max rel dE {worst['energy']:.1e}, drho {worst['rho']:.1e}, "
                       f"dLambda {worst['lam']:.1e}", {
        "count": count == 20,
        "energy": worst["energy"] <= 1e-10,
        "rho": worst["rho"] <= 1e-10,
        "lambda": worst["lam"] <= 1e-9,
        "lemma": bool(bounds),
    })


def exhaustive_min_cardinality(eta2, theta):
    vals = [Fraction(float(v)) for v in eta2]
    target = Fraction(float(theta)) * sum(vals)
    for k in range(1, len(vals) + 1):
        if any(sum(vals[i] for i in sub) >= target for sub in itertools.combinations(range(len(vals)), k)):
            return k
    return len(vals)


def test_criterion_06_dorfler_minimality(capsys):
    rng = np.random.default_rng(2024)
    mismatches = short = 0
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        eta2 = rng.exponential(size=n) * (rng.random(n) < 0.9)
        if eta2.sum() == 0:
            eta2[0] = 1.0
        theta = float(rng.uniform(0.05, 0.95))
        m = mark_dorfler(eta2, theta)
        mismatches += len(m) != exhaustive_min_cardinality(eta2, theta)
        short += m.fraction < theta
    verdict(capsys, 6, f"1000 vectors, {mismatches} cardinality mismatches, {short} below theta", {
        "minimal": mismatches == 0,
        "fraction": short == 0,
    })


def test_criterion_07_mesh_integrity(capsys):
    worst, problems = 0.0, []
    for name in presets():
        cfg = presets()[name]
        mesh = build_mesh(cfg)
        box = np.array(cfg["domain"]["box"]).reshape(3, 2)
        target = box.mean(axis=1) + 0.137 * (box[:, 1] - box[:, 0]) * np.array([0.3, -0.2, 0.1])
        for _ in range(10):
            # bulk-mark elements nearest a point, the pattern of a localized solution
            centroid = mesh.vertices[mesh.tets].mean(axis=1)
            indicator = mesh.volumes / (np.linalg.norm(centroid - target, axis=1) + 1e-3)
            mesh = refine(mesh, mark_dorfler(indicator, 0.3).indices)
            problems += check_conformity(mesh)
            worst = max(worst, shape_regularity(mesh))
    verdict(capsys, 7, f"6 presets x 10 generations, {len(problems)} conformity problems, "
                       f"max h/rho {worst:.6f} (bound {GAMMA_STAR:.6f})", {
        "conforming": not problems,
        "shape": worst <= GAMMA_STAR * (1 + 1e-12),
    })


@pytest.fixture(scope="module")
def gaussian():
    cfg = load_config("gaussian_well_n1")
    model = build_model(cfg)
    space = FeSpace(build_mesh(cfg), cfg["mesh"]["degree"])
    return cfg, model, space


def test_criterion_08_hartree_oracles(gaussian, capsys):
    cfg, model, space = gaussian
    # the preset's own adaptive mesh, capped so the direct oracle (<= 5000 elements) still applies
    rec = run_ks_afem(build_mesh(cfg), model, replace(build_afem_config(cfg), max_ndof=3000))
    mesh = rec.final_mesh
    fine = FeSpace(mesh, cfg["mesh"]["degree"])
    rho = rec.final.density.nodal
    d_poisson = coulomb_pairing(fine, rho, hartree_poisson(fine, rho))
    d_direct = coulomb_pairing(fine, rho, hartree_direct(fine, rho))
    d_double = coulomb_direct(fine, rho, rho)
    tol = cfg["model"]["hartree_tolerance"]
    gap = max(abs(d_poisson / d_direct - 1), abs(d_poisson / d_double - 1))
    # unit Gaussian interpolated on the preset's initial mesh
    g = interpolate(space, lambda x: (2 * np.pi) ** -1.5 * np.exp(-0.5 * np.sum(x ** 2, axis=-1)), full=True)
    g_poisson = coulomb_pairing(space, g, hartree_poisson(space, g))
    gap_gauss = max(abs(g_poisson / coulomb_pairing(space, g, hartree_direct(space, g)) - 1),
                    abs(g_poisson / coulomb_direct(space, g, g) - 1))

    ball = FeSpace(build_box_mesh([[-2, 2]] * 3, 6), 2)
    uniform = interpolate(ball, lambda x: (np.linalg.norm(x, axis=-1) <= 1.0).astype(float), full=True)
    q = float(np.sum(mass(ball, full=True) @ uniform))
    r = np.linalg.norm(ball.node_coords, axis=1)
    out = r > 1.4
    shell = 0.0
    for route in (hartree_direct, hartree_poisson):
        v = route(ball, uniform).values
        shell = max(shell, np.max(np.abs(v[out] * r[out] / q - 1)))
    verdict(capsys, 8, f"ground-state D on {mesh.ntets} elements: poisson {d_poisson:.6f} direct {d_direct:.6f} "
                       f"double-sum {d_double:.6f} (gap {gap:.2e}); unit Gaussian gap {gap_gauss:.2e}; "
                       f"shell error {shell:.2e}", {
        "oracle": gap <= tol and tol <= 0.01,
        "gaussian": gap_gauss <= 0.01,
        "shell": shell <= 0.02,
    })


def test_criterion_09_nonlinear_ground_state(gaussian, capsys):
    cfg, model, space = gaussian
    afem = build_afem_config(cfg)
    rec = run_ks_afem(build_mesh(cfg), model, afem)
    e_adaptive, ndof = rec.rows[-1].energy, rec.rows[-1].ndof
    box = np.array(cfg["domain"]["box"]).reshape(3, 2)
    n = 2
    while (2 * n - 1) ** 3 < 4 * ndof:
        n += 2
    fine = FeSpace(build_box_mesh(box, n), 2)
    _, ref = scf_solve(fine, model, afem.scf)
    e_uniform = ref.energies[-1]
    seeds = [scf_solve(space, model, ScfConfig(**{**vars(afem.scf), "seed": s}))[1] for s in range(5)]
    e_seeds = np.array([r.energies[-1] for r in seeds])
    spread = np.abs(e_seeds / e_seeds[0] - 1).max()
    rel = abs(e_adaptive / e_uniform - 1)
    verdict(capsys, 9, f"adaptive E {e_adaptive:.7f} ({ndof} DOFs) vs uniform E {e_uniform:.7f} "
                       f"({fine.ndof} DOFs): rel {rel:.2e}; seed spread {spread:.1e}", {
        "converged": ref.converged and all(r.converged for r in seeds),
        "dofs": fine.ndof >= 4 * ndof,
        "energy": rel <= 1e-3,
        "seeds": spread <= 1e-8,
    })


def test_criterion_10_galerkin_identities(gaussian, capsys):
    cfg, model, space = gaussian
    worst = 0.0
    rng = np.random.default_rng(10)
    tight = ScfConfig(tol=1e-10, eig_tol=1e-10, mixing=cfg["scf"]["mixing"])
    demo = load_config("nonlocal_demo")
    cases = [(space, model), (FeSpace(build_mesh(demo), 2), build_model(demo))]
    for s, m in cases:
        orb, _ = scf_solve(s, m, tight)
        for _ in range(3):
            g = rng.standard_normal(orb.coeffs.shape)
            g /= np.sqrt(np.diag(g.T @ (mass(s) @ g)))
            worst = max(worst, abs(residual_functional(s, m, orb, s, g)))
    pb = manufactured_problem("peak", [[0, 1]] * 3)
    ls = FeSpace(build_box_mesh([[0, 1]] * 3, 3), 2)
    g = rng.standard_normal(ls.ndof)
    g /= np.sqrt(g @ (mass(ls) @ g))
    worst = max(worst, abs(residual_pairing(LinearResidual(ls, pb.source, solve_linear(ls, pb)), ls, g)))

    rec = run_ks_afem(build_mesh(demo), build_model(demo), build_afem_config(demo))
    rise = float(np.max(np.diff(rec.column("energy"))))

    bubble = manufactured_problem("bubble", [[0, 1]] * 3)
    coarse = FeSpace(build_box_mesh([[0, 1]] * 3, 3), 2)
    fine = FeSpace(refine(coarse.mesh, np.arange(0, coarse.mesh.ntets, 3)), 2)
    u, uf = solve_linear(coarse, bubble), solve_linear(fine, bubble)
    e_c = h1_seminorm_error(coarse, u, bubble.exact_grad, degree=10)
    e_f = h1_seminorm_error(fine, uf, bubble.exact_grad, degree=10)
    pyth = abs(e_f - (e_c - gradient_distance(coarse, u, fine, uf))) / e_f
    verdict(capsys, 10, f"max |<R, Gamma>| on V_h {worst:.1e}; linear E_k max rise {rise:.1e} over "
                        f"{len(rec.rows)} iterations; Pythagoras rel {pyth:.1e}", {
        "residual": worst <= 1e-9,
        "energy": rise <= 1e-10 and len(rec.rows) >= 4,
        "pythagoras": pyth <= 1e-8,
    })
