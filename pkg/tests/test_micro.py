import numpy as np
import pytest

from bidomain.geometry import CellGeometrySpec, build_unit_cell, tile_domain
from bidomain.membrane import MembraneModel
from bidomain.micro import (LOG_COLUMNS, MONITOR_NAMES, MicroConfig, StabilityWarning, init_state, micro_monitors,
                            run_micro, save_snapshots, step_micro)

FHN = MembraneModel.fitzhugh_nagumo()


@pytest.fixture(scope="module")
def dom():
    return tile_domain(build_unit_cell(CellGeometrySpec(kind="inclusion", resolution=8)), 2)


def scalar_recursion(model, v, w, dt, steps):
    for _ in range(steps):
        w = w + dt * model.gating(v, w)
        v = v - dt * model.current(v, w)
    return v, w


def test_zero_fixed_point_is_exact(dom):
    traj = run_micro(MicroConfig(dom, FHN, dt=0.01, T=0.2))
    for s in traj.snapshots:
        for arr in (s.u_i, s.u_e, s.v, s.w):
            assert not arr.any()


def test_uniform_data_follows_scalar_recursion(dom):
    cfg = MicroConfig(dom, FHN, dt=0.01, T=2.0, v0=0.3, w0=0.05, sigma_i=np.diag([1.0, 2.0]))
    traj = run_micro(cfg)
    assert len(traj.snapshots) == 201
    v, w = scalar_recursion(FHN, 0.3, 0.05, 0.01, 200)
    s = traj.snapshots[-1]
    assert np.abs(s.v - v).max() <= 1e-12
    assert np.abs(s.w - w).max() <= 1e-12
    assert np.abs(s.u_e).max() <= 1e-12


def test_initial_constant_potential(dom):
    s = init_state(MicroConfig(dom, FHN, v0=0.7))
    assert np.allclose(s.u_i, 0.7, atol=1e-13)
    assert np.abs(s.u_e).max() <= 1e-13
    assert np.allclose(s.v, 0.7, atol=1e-13)


def test_passive_energy_nonincreasing(dom, rng):
    coef = rng.standard_normal(3)

    def v0(x, y):
        return coef[0] * np.sin(2 * np.pi * x[:, 0]) + coef[1] * np.cos(2 * np.pi * y[:, 1]) + coef[2]

    traj = run_micro(MicroConfig(dom, MembraneModel.passive(), dt=0.01, T=0.3, v0=v0))
    energy = traj.log["v_l2_sq"]
    assert np.all(np.diff(energy) <= 1e-14 * energy[0])


def test_snapshot_stride_and_log(dom):
    traj = run_micro(MicroConfig(dom, FHN, dt=0.01, T=0.1, snapshot_stride=3))
    assert len(traj.snapshots) == 1 + 10 // 3
    assert np.allclose(traj.times, [0.0, 0.03, 0.06, 0.09])
    assert set(traj.log) == set(LOG_COLUMNS)
    assert len(traj.log["t"]) == 11


def test_step_matches_run(dom):
    cfg = MicroConfig(dom, FHN, dt=0.01, T=0.02, v0=0.2, s_i=1.0, s_e=-1.0 / 3.0)
    s = step_micro(step_micro(init_state(cfg), cfg), cfg)
    assert np.array_equal(s.v, run_micro(cfg).snapshots[-1].v)


def test_incompatible_sources_are_projected(dom):
    traj = run_micro(MicroConfig(dom, FHN, dt=0.01, T=0.05, s_i=1.0, s_e=0.0))
    assert traj.log["source_defect"][1] == pytest.approx(dom.volume("i"), rel=1e-12)
    assert traj.log["system_residual"].max() <= 1e-8


def test_time_step_warning(dom):
    with pytest.warns(StabilityWarning):
        run_micro(MicroConfig(dom, FHN, dt=0.05, T=0.05))


def test_first_order_in_time(dom):
    def v0(x, y):
        return 0.5 + 0.3 * np.cos(np.pi * x[:, 0]) * np.cos(2 * np.pi * y[:, 1])

    finals = {}
    for dt in (0.02, 0.01, 0.0025):
        finals[dt] = run_micro(MicroConfig(dom, FHN, dt=dt, T=0.4, v0=v0)).snapshots[-1].v
    e1 = np.abs(finals[0.02] - finals[0.0025]).max()
    e2 = np.abs(finals[0.01] - finals[0.0025]).max()
    assert 1.5 <= e1 / e2 <= 2.5


def test_monitors_and_snapshot_archive(dom, tmp_path):
    cfg = MicroConfig(dom, FHN, dt=0.01, T=0.16, v0=0.1, s_i=2.0, s_e=-2.0 / 3.0, snapshot_stride=2)
    traj = run_micro(cfg)
    rep = micro_monitors(traj, cfg)
    vals = [getattr(rep, k) for k in MONITOR_NAMES]
    assert all(np.isfinite(vals)) and all(v >= 0 for v in vals)
    assert sorted(rep.translation) == pytest.approx([0.02, 0.04, 0.08])
    path = tmp_path / "snap.npz"
    save_snapshots(traj, path, {"config_hash": "abc"})
    data = np.load(path)
    assert str(data["meta_config_hash"]) == "abc"
    assert np.array_equal(data["v_00008"], traj.snapshots[-1].v)
