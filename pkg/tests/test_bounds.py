import math
from dataclasses import replace

import numpy as np
import pytest

from meshsens.bounds import (
    UNIT_SQUARE_POINCARE,
    BoundInputs,
    bound_inputs,
    nonsmooth_bound,
    smooth_bound,
    verify_bounds,
)
from meshsens.femcore import h1_seminorm, paper_example, solve_bvp
from meshsens.mesh import build_structured_mesh
from meshsens.sensitivity import solve_sensitivity
from meshsens.velocity import FIELD_CATALOG, random_field, sample_nodal_velocity

NORM_FIELDS = ("f_l2", "a_sup", "grad_a_sup", "b_sup", "grad_b_sup", "c_sup",
               "xdot_sup", "max_aspect", "grad_xdot_sup")


def base_inputs(**kw):
    p = dict(
        c_omega=UNIT_SQUARE_POINCARE, a0=1.0, f_l2=2.0, a_sup=1.5, grad_a_sup=0.3,
        b_sup=2.0, grad_b_sup=0.7, c_sup=0.4, xdot_sup=1.1, max_aspect=2.0,
        min_height=0.05, dim=2, grad_xdot_sup=3.0,
    )
    p.update(kw)
    return BoundInputs(**p)


def run(mesh, vf):
    co = paper_example()
    u, lin = solve_bvp(mesh, co, return_solver=True)
    v = sample_nodal_velocity(mesh, vf)
    udot = solve_sensitivity(mesh, co, u, v, solver=lin)
    return verify_bounds(mesh, co, vf, udot, v)


def test_term_dropout():
    p = base_inputs(grad_a_sup=0.0, grad_b_sup=0.0, c_sup=0.0, b_sup=0.0, a0=0.5)
    C = p.c_omega
    expected = (p.f_l2 * p.xdot_sup + p.f_l2 * 3 * 2 * C * p.a_sup * p.grad_xdot_sup * p.max_aspect) / p.a0
    assert smooth_bound(p) == pytest.approx(expected, rel=1e-15)


def test_hand_evaluation():
    p = base_inputs()
    C = p.c_omega
    size = p.f_l2 * (1 + C * 0.3 + C * C * 0.7 + 2 * C * C * 0.4) * 1.1
    shape = p.f_l2 * (6 * C * 1.5 + 4 * C * C * 2.0)
    assert smooth_bound(p) == pytest.approx(size + shape * 3.0 * 2.0, rel=1e-14)
    assert nonsmooth_bound(p) == pytest.approx(size + shape * 1.1 / 0.05, rel=1e-14)


def test_zero_velocity_gives_zero():
    p = base_inputs(xdot_sup=0.0, grad_xdot_sup=0.0)
    assert smooth_bound(p) == 0.0
    assert nonsmooth_bound(p) == 0.0


@pytest.mark.parametrize("name", NORM_FIELDS + ("c_omega",))
def test_monotone_in_every_input(name):
    p = base_inputs()
    q = replace(p, **{name: getattr(p, name) * 1.5 + 0.1})
    assert smooth_bound(q) >= smooth_bound(p)
    assert nonsmooth_bound(q) >= nonsmooth_bound(p)


def test_monotone_in_mesh_quantities():
    p = base_inputs()
    assert nonsmooth_bound(replace(p, min_height=0.01)) > nonsmooth_bound(p)
    assert smooth_bound(replace(p, a0=0.5)) == pytest.approx(2 * smooth_bound(p))


def test_halving_min_height_doubles_second_term():
    p = base_inputs()
    first = nonsmooth_bound(replace(p, a_sup=0.0, b_sup=0.0))
    second = nonsmooth_bound(p) - first
    halved = nonsmooth_bound(replace(p, min_height=p.min_height / 2)) - first
    assert halved == pytest.approx(2 * second, rel=1e-13)


def test_input_validation():
    with pytest.raises(ValueError):
        base_inputs(a0=0.0)
    with pytest.raises(ValueError):
        base_inputs(c_omega=-1.0)
    with pytest.raises(ValueError):
        base_inputs(f_l2=-1.0)
    with pytest.raises(ValueError):
        smooth_bound(base_inputs(grad_xdot_sup=None))
    with pytest.raises(ValueError):
        nonsmooth_bound(base_inputs(min_height=0.0))


def test_bound_inputs_from_mesh():
    m = build_structured_mesh(8)
    vf = FIELD_CATALOG["paper-smooth"]()
    p = bound_inputs(m, paper_example(), vf, sample_nodal_velocity(m, vf))
    assert p.xdot_sup == pytest.approx(math.sqrt(2))
    assert p.grad_xdot_sup == pytest.approx(2 * math.sqrt(2) * math.pi)
    assert p.max_aspect == pytest.approx(2.0)
    assert p.min_height == pytest.approx(1 / 16)
    assert p.b_sup == pytest.approx(math.sqrt(5))
    assert p.grad_a_sup == 0 and p.grad_b_sup == 0 and p.c_sup == 0

    rf = random_field(4)
    v = sample_nodal_velocity(m, rf)
    p = bound_inputs(m, paper_example(), rf, v)
    assert p.grad_xdot_sup is None
    assert p.xdot_sup == pytest.approx(np.linalg.norm(v, axis=1).max())


def test_paper_example_smooth_n40():
    rep = run(build_structured_mesh(40), FIELD_CATALOG["paper-smooth"]())
    assert rep.measured == pytest.approx(37.59, rel=1e-3)
    assert rep.smooth_rhs >= rep.measured and rep.smooth_ok
    assert rep.nonsmooth_ok and rep.satisfied


def test_tiny_mesh_smooth_field():
    rep = run(build_structured_mesh(2), FIELD_CATALOG["paper-smooth"]())
    assert rep.satisfied


def test_random_field_bound_ratio():
    # min a_K halves from N=40 to N=80, so the nonsmooth bound roughly doubles
    r40 = run(build_structured_mesh(40), random_field(1))
    r80 = run(build_structured_mesh(80), random_field(1))
    assert r40.smooth_rhs is None and r40.satisfied and r80.satisfied
    assert 1.8 < r80.nonsmooth_rhs / r40.nonsmooth_rhs < 2.05


def test_understated_load_is_reported():
    m = build_structured_mesh(10)
    co = paper_example()
    vf = FIELD_CATALOG["paper-smooth"]()
    u = solve_bvp(m, co)
    v = sample_nodal_velocity(m, vf)
    udot = solve_sensitivity(m, co, u, v)
    true = bound_inputs(m, co, vf, v)
    # an absurdly understated norm must flip the flags rather than pass silently
    fake = replace(true, f_l2=true.f_l2 * 1e-4)
    rep = verify_bounds(m, co, vf, udot, v, inputs=fake)
    assert rep.measured == pytest.approx(h1_seminorm(udot))
    assert not rep.satisfied and rep.smooth_ok is False and rep.nonsmooth_ok is False
    d = rep.as_dict()
    assert d["satisfied"] is False and d["inputs"]["f_l2"] == fake.f_l2
    half = verify_bounds(m, co, vf, udot, v, inputs=replace(true, f_l2=true.f_l2 / 2))
    assert half.smooth_rhs < verify_bounds(m, co, vf, udot, v).smooth_rhs
