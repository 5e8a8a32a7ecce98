"""Lattice Boltzmann solver tests: lattice structure, conservation,
boundary behavior, and the Darcy protocol on small geometries."""

import numpy as np
import pytest

from poredit import lbm


def test_velocity_set_structure():
    assert lbm.VELOCITIES.shape == (19, 3)
    assert lbm.WEIGHTS.sum() == pytest.approx(1.0, abs=1e-15)
    # each velocity's opposite is its negation
    np.testing.assert_array_equal(lbm.VELOCITIES[lbm.OPPOSITE], -lbm.VELOCITIES)
    # weight classes: rest 1/3, faces 1/18, edges 1/36
    speeds = (lbm.VELOCITIES**2).sum(axis=1)
    assert lbm.WEIGHTS[speeds == 0] == pytest.approx(1 / 3)
    np.testing.assert_allclose(lbm.WEIGHTS[speeds == 1], 1 / 18)
    np.testing.assert_allclose(lbm.WEIGHTS[speeds == 2], 1 / 36)


def test_equilibrium_moments():
    """The discrete equilibrium reproduces density and momentum exactly."""
    feq = np.empty(19)
    rho, u = 1.05, np.array([0.02, -0.015, 0.01])
    lbm._equilibrium(rho, u[0], u[1], u[2], lbm.VELOCITIES, lbm.WEIGHTS, feq)
    assert feq.sum() == pytest.approx(rho, abs=1e-14)
    np.testing.assert_allclose(feq @ lbm.VELOCITIES.astype(float), rho * u, atol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        lbm.LbmConfig(tau=0.5)
    with pytest.raises(ValueError):
        lbm.LbmConfig(rho_in=1.0, rho_out=1.0)
    with pytest.raises(ValueError):
        lbm.LbmConfig(axis=3)


def test_mass_conserved_in_periodic_domain():
    g = np.random.default_rng(0)
    f = np.abs(g.normal(1.0, 0.02, size=(19, 6, 6, 6)))
    solid = np.zeros((6, 6, 6), dtype=bool)
    m0 = f.sum()
    for _ in range(50):
        f = lbm.step_periodic(f, solid, 1.0)
    assert abs(f.sum() - m0) / m0 < 1e-12


def test_mass_conserved_with_solid_obstacle_periodic():
    g = np.random.default_rng(1)
    solid = np.zeros((8, 8, 8), dtype=bool)
    solid[3:5, 3:5, 3:5] = True
    f = np.abs(g.normal(1.0, 0.02, size=(19, 8, 8, 8)))
    f[:, solid] = 0.0
    m0 = f.sum()
    for _ in range(50):
        f = lbm.step_periodic(f, solid, 1.0)
    assert abs(f.sum() - m0) / m0 < 1e-12


def test_equilibrium_is_stationary():
    """A uniform equilibrium state is a fixed point of collide+stream."""
    feq = np.empty(19)
    lbm._equilibrium(1.0, 0.0, 0.0, 0.0, lbm.VELOCITIES, lbm.WEIGHTS, feq)
    f = np.broadcast_to(feq[:, None, None, None], (19, 5, 5, 5)).copy()
    solid = np.zeros((5, 5, 5), dtype=bool)
    out = lbm.step_periodic(f, solid, 0.9)
    np.testing.assert_allclose(out, f, atol=1e-15)


def test_percolation_detection():
    open_path = np.zeros((8, 8, 8), dtype=np.uint8)
    open_path[:, 4, 4] = 1
    assert lbm.percolates(~open_path.astype(bool), 0)
    blocked = open_path.copy()
    blocked[4] = 0
    assert not lbm.percolates(~blocked.astype(bool), 0)


def test_non_percolating_raises():
    v = np.zeros((8, 8, 8), dtype=np.uint8)
    v[:3, 4, 4] = 1
    with pytest.raises(lbm.LbmError, match="non-percolating"):
        lbm.run_permeability(v)


def test_axis_selection_matches_rotation():
    """Permeability along axis 1 equals permeability of the rotated volume
    along axis 0."""
    v = np.zeros((10, 12, 8), dtype=np.uint8)
    v[:, :, 3:6] = 1
    v[2:4, 5, 4] = 0  # small obstruction
    ka = lbm.run_permeability(v, lbm.LbmConfig(axis=1, max_steps=4000)).permeability
    kb = lbm.run_permeability(np.moveaxis(v, 1, 0).copy(), lbm.LbmConfig(axis=0, max_steps=4000)).permeability
    assert ka == pytest.approx(kb, rel=1e-10)


def test_channel_flow_small_reference():
    """Aperture-8 slit: within a few percent of the analytic value at this
    resolution (coarse-grid bounce-back error shrinks with aperture)."""
    v = np.zeros((18, 12, 6), dtype=np.uint8)
    v[:, 2:10, :] = 1
    res = lbm.run_permeability(v, lbm.LbmConfig(max_steps=20000))
    assert res.converged
    k_ref = lbm.poiseuille_reference(8, 12)
    assert res.permeability == pytest.approx(k_ref, rel=0.05)


def test_velocity_profile_is_parabolic():
    """Steady channel flow: the axial velocity across the aperture matches a
    parabola with no-slip roots at the half-way wall positions."""
    v = np.zeros((18, 12, 6), dtype=np.uint8)
    v[:, 2:10, :] = 1
    solid = np.ascontiguousarray(~v.astype(bool))
    cfg = lbm.LbmConfig(max_steps=20000)
    f = np.empty((19,) + solid.shape)
    for i in range(19):
        f[i] = lbm.WEIGHTS[i]
    f_new = f.copy()
    for _ in range(6000):
        lbm._pressure_boundary(f, solid, cfg.rho_in, inlet=True)
        lbm._pressure_boundary(f, solid, cfg.rho_out, inlet=False)
        lbm._collide_stream(f, f_new, solid, cfg.tau, lbm.VELOCITIES, lbm.WEIGHTS, lbm.OPPOSITE, False)
        f, f_new = f_new, f
    _, u = lbm._macros(f, solid, lbm.VELOCITIES)
    profile = u[0][9, 2:10, 3]  # mid-channel cross-section
    y = np.arange(2, 10) + 0.5
    # fit a parabola with roots at the half-way walls y=2 and y=10
    shape = (y - 2.0) * (10.0 - y)
    coeff = (profile * shape).sum() / (shape * shape).sum()
    np.testing.assert_allclose(profile, coeff * shape, rtol=0.03)


def test_history_records_residuals():
    v = np.zeros((12, 10, 6), dtype=np.uint8)
    v[:, 2:8, :] = 1
    res = lbm.run_permeability(v, lbm.LbmConfig(max_steps=20000))
    assert len(res.history) >= 1
    steps, residuals = zip(*res.history)
    assert list(steps) == sorted(steps)
    assert residuals[-1] < 1e-5
