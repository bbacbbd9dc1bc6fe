"""Named model problems shipped with the solver.

Each preset is stored as configuration text, so ``ksafem presets`` can
print it and users can copy and edit it.
"""
from __future__ import annotations

import numpy as np

from .config import RunConfig, parse_config
from .errors import InvalidInputError
from .linear_bvp import LinearProblem

_HYDROGEN_CENTER = "0.17677669529663687 0.17320508075688773 -0.18633899812498247"

PRESETS: dict[str, tuple[str, str]] = {
    "linear_manufactured": ("-1/2 Lap u = f on the unit cube, u a sharp Gaussian peak times the cube bubble", """
[domain]
box = 0 1 0 1 0 1
[mesh]
n = 2
degree = 2
[model]
kind = linear
[linear]
solution = peak
peak_center = 0.3 0.4 0.6
peak_sharpness = 50
[afem]
theta = 0.5
max_iters = 14
max_ndof = 200000
"""),
    "laplace_eigs_cube": ("four lowest Dirichlet eigenpairs of -1/2 Lap on the unit cube", """
[domain]
box = 0 1 0 1 0 1
[mesh]
n = 4
degree = 2
[model]
n_orbitals = 4
[afem]
theta = 0.5
max_iters = 30
max_ndof = 50000
"""),
    "gaussian_well_n1": ("one electron in a Gaussian well with Hartree and X-alpha terms", """
[domain]
box = -5 5 -5 5 -5 5
[mesh]
n = 6
degree = 2
[model]
n_orbitals = 1
gaussian_wells = -4 0.1234 -0.0712 0.0531 1
xc = x_alpha
hartree = on
hartree_tolerance = 0.01
[afem]
theta = 0.5
max_iters = 30
max_ndof = 40000
[scf]
mixing = 0.7
"""),
    "hydrogen_coulomb": ("hydrogen atom, V = -1/r, in the box [-10, 10]^3", f"""
[domain]
box = -10 10 -10 10 -10 10
[mesh]
n = 4
degree = 2
[model]
n_orbitals = 1
coulomb = 1 {_HYDROGEN_CENTER}
[afem]
theta = 0.5
max_iters = 40
max_ndof = 200000
[output]
expected_energy = -0.5
energy_band = 0.015
"""),
    "two_orbital_toy": ("two orbitals in a double Gaussian well with Hartree and X-alpha terms", """
[domain]
box = -6 6 -6 6 -6 6
[mesh]
n = 4
degree = 2
[model]
n_orbitals = 2
gaussian_wells = -3 -1.2 0.05 -0.03 1; -3 1.2 0.05 -0.03 1
xc = x_alpha
hartree = on
hartree_tolerance = 0.01
[afem]
theta = 0.5
max_iters = 8
max_ndof = 20000
[scf]
mixing = 0.5
"""),
    "nonlocal_demo": ("Gaussian well plus one repulsive Gaussian projector", """
[domain]
box = -5 5 -5 5 -5 5
[mesh]
n = 4
degree = 2
[model]
n_orbitals = 1
gaussian_wells = -3 0.1 -0.05 0.02 1
projectors = 2 0.1 -0.05 0.02 0.7
[afem]
theta = 0.5
max_iters = 8
max_ndof = 20000
"""),
}


def preset_names() -> list[str]:
    return list(PRESETS)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise InvalidInputError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return PRESETS[name][1].lstrip()


def load_preset(name: str) -> RunConfig:
    return parse_config(preset_text(name), name=name)


def presets() -> dict[str, RunConfig]:
    """All presets, parsed."""
    return {name: load_preset(name) for name in PRESETS}


# -- manufactured solutions ----------------------------------------------------

def _bubble_parts(x, box):
    lo, hi = box[:, 0], box[:, 1]
    b = (x - lo) * (hi - x)          # (..., 3) factors
    db = hi + lo - 2.0 * x           # their derivatives; second derivatives are -2
    return b, db


def manufactured_problem(kind: str, box, center=(0.3, 0.4, 0.6), sharpness: float = 50.0) -> LinearProblem:
    """Homogeneous problem ``-1/2 Lap u = f`` with known ``u`` vanishing on the box boundary.

    ``peak``: ``u = B(x) exp(-a |x - x0|^2)`` with ``B`` the product bubble.
    ``sine``: ``u = prod sin(pi s_i)`` in unit coordinates ``s``.
    ``bubble``: ``u = B(x)`` (a polynomial of degree 6).
    """
    box = np.asarray(box, dtype=float).reshape(3, 2)
    x0 = np.asarray(center, dtype=float)
    a = float(sharpness)
    lo, width = box[:, 0], box[:, 1] - box[:, 0]

    def bubble(x):
        b, db = _bubble_parts(x, box)
        val = b.prod(-1)
        others = np.stack([b[..., 1] * b[..., 2], b[..., 0] * b[..., 2], b[..., 0] * b[..., 1]], -1)
        return val, db * others, -2.0 * others.sum(-1)

    if kind == "bubble":
        def u(x):
            return bubble(x)[0]

        def grad(x):
            return bubble(x)[1]

        def f(x):
            return -0.5 * bubble(x)[2]
    elif kind == "peak":
        def gauss(x):
            d = x - x0
            g = np.exp(-a * np.sum(d * d, -1))
            return g, -2.0 * a * d * g[..., None], (4.0 * a * a * np.sum(d * d, -1) - 6.0 * a) * g

        def u(x):
            return bubble(x)[0] * gauss(x)[0]

        def grad(x):
            (bv, bg, _), (gv, gg, _) = bubble(x), gauss(x)
            return gv[..., None] * bg + bv[..., None] * gg

        def f(x):
            (bv, bg, bl), (gv, gg, gl) = bubble(x), gauss(x)
            return -0.5 * (gv * bl + 2.0 * np.sum(bg * gg, -1) + bv * gl)
    elif kind == "sine":
        k = np.pi / width

        def u(x):
            return np.prod(np.sin(k * (x - lo)), -1)

        def grad(x):
            s, c = np.sin(k * (x - lo)), np.cos(k * (x - lo))
            return k * np.stack([c[..., 0] * s[..., 1] * s[..., 2], s[..., 0] * c[..., 1] * s[..., 2],
                                 s[..., 0] * s[..., 1] * c[..., 2]], -1)

        def f(x):
            return 0.5 * float(np.sum(k * k)) * u(x)
    else:
        raise InvalidInputError(f"unknown manufactured solution {kind!r}")
    return LinearProblem(f, exact=u, exact_grad=grad, name=kind)
