"""Acceptance criteria 1-10; each test prints one PASS/FAIL line before asserting."""
import filecmp
import time
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from bidomain.cell_problem import CellProblemHomogenizer
from bidomain.cli import main
from bidomain.config import load_config
from bidomain.convergence import run_study
from bidomain.discretize import integrate_norm
from bidomain.geometry import CellGeometrySpec, build_unit_cell, tile_domain
from bidomain.macro import ManufacturedSolution, macro_residuals, manufactured_order, run_macro
from bidomain.membrane import MembraneModel
from bidomain.micro import MONITOR_NAMES, MicroConfig, micro_monitors, run_micro, translation_quantity
from bidomain.unfolding import identity_suite

STUDY_2D = {"geometry": {"kind": "inclusion", "dim": 2, "resolution": 8}}
STUDY_3D_BRIDGED = {"geometry": {"kind": "bridged", "dim": 3, "resolution": 8}, "study": {"macro_n": 32}}
MONITOR_3D = {"geometry": {"kind": "inclusion", "dim": 3, "resolution": 8}}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return emit


def variation(values):
    values = np.asarray(values, dtype=float)
    return float((values.max() - values.min()) / values.min())


def strictly_decreasing(values):
    return all(a > b for a, b in zip(values, values[1:]))


@pytest.fixture(scope="module")
def study_2d():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = load_config(STUDY_2D)
        t0 = time.perf_counter()
        rep = run_study(cfg.study_config(), threads=1, config_hash=cfg.hash)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def study_3d():
    cfg = load_config(STUDY_3D_BRIDGED)
    t0 = time.perf_counter()
    rep = run_study(cfg.study_config(), threads=3, config_hash=cfg.hash)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def monitors_3d():
    cfg = load_config(MONITOR_3D)

    def one(N):
        mc = cfg.micro_config(N)
        mc = MicroConfig(**{**mc.__dict__, "snapshot_stride": max(1, mc.n_steps // 8)})
        return micro_monitors(run_micro(mc), mc).as_dict()

    t0 = time.perf_counter()
    with ThreadPoolExecutor(3) as pool:
        mons = list(pool.map(one, cfg.study_n_cells))
    return mons, time.perf_counter() - t0


def test_criterion_1_effective_tensor_oracles(report):
    errs, times = [], []
    for dim in (2, 3):
        for kind, check in (("laminate", "lam"), ("inclusion", "inc"), ("full", "full")):
            t0 = time.perf_counter()
            cell = build_unit_cell(CellGeometrySpec(kind=kind, dim=dim, resolution=8))
            est = CellProblemHomogenizer().fit(cell)
            times.append(time.perf_counter() - t0)
            if check == "lam":
                a = np.diag([0.0] + [0.5] * (dim - 1))
                errs.append(max(np.abs(est.M_i_ - a).max(), np.abs(est.M_e_ - a).max()))
            elif check == "inc":
                errs.append(np.abs(est.M_i_).max())
            else:
                errs.append(0.0 if np.array_equal(est.M_i_, np.eye(dim)) else 1.0)
    ok = max(errs) <= 1e-9 and max(times) <= 10.0
    assert report(1, ok, f"max oracle error {max(errs):.2e}, slowest {max(times):.2f} s")


def test_criterion_2_unfolding_identities(report):
    t0 = time.perf_counter()
    worst = 0.0
    for kind in ("inclusion", "laminate"):
        cell = build_unit_cell(CellGeometrySpec(kind=kind, resolution=8))
        for N in (2, 4, 8):
            for c in identity_suite(tile_domain(cell, N), np.random.default_rng(N)):
                worst = max(worst, c.error)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed <= 5.0
    assert report(2, ok, f"worst identity error {worst:.2e} in {elapsed:.2f} s")


def test_criterion_3_micro_sanity(report):
    fhn = MembraneModel.fitzhugh_nagumo()
    dom = tile_domain(build_unit_cell(CellGeometrySpec(kind="inclusion", resolution=8)), 4)
    zero = run_micro(MicroConfig(dom, fhn, dt=0.01, T=0.5))
    zero_ok = all(not s.u_i.any() and not s.u_e.any() and not s.v.any() and not s.w.any()
                  for s in zero.snapshots)
    uni = run_micro(MicroConfig(dom, fhn, dt=0.01, T=2.0, v0=0.3, w0=0.05))
    v, w = 0.3, 0.05
    for _ in range(200):
        w = w + 0.01 * fhn.gating(v, w)
        v = v - 0.01 * fhn.current(v, w)
    s = uni.snapshots[-1]
    uni_err = max(np.abs(s.v - v).max(), np.abs(s.w - w).max())

    def v0(x, y):
        return np.sin(2 * np.pi * x[:, 0]) + np.cos(2 * np.pi * y[:, 1]) + 0.3

    pas = run_micro(MicroConfig(dom, MembraneModel.passive(), dt=0.01, T=0.5, v0=v0))
    energy = dom.eps * pas.log["v_l2_sq"]
    growth = float(np.diff(energy).max())
    ok = zero_ok and uni_err <= 1e-12 and growth <= 0.0
    assert report(3, ok, f"zero exact {zero_ok}, uniform error {uni_err:.1e} over 200 steps, "
                         f"max energy increment {growth:.1e}")


def test_criterion_4_estimate_monitors(report, study_2d, monitors_3d):
    rep, t2 = study_2d
    mons3, t3 = monitors_3d
    var2 = {k: variation([m[k] for m in rep.monitors]) for k in MONITOR_NAMES}
    var3 = {k: variation([m[k] for m in mons3]) for k in MONITOR_NAMES}
    bad = [f"2D {k} {v:.2f}" for k, v in var2.items() if v >= 0.5]
    bad += [f"3D {k} {v:.2f}" for k, v in var3.items() if v >= 0.5]
    ok = not bad and t2 <= 300 and t3 <= 1200
    detail = (f"max variation 2D {max(var2.values()):.2f}, 3D {max(var3.values()):.2f}; "
              f"runtime 2D {t2:.0f} s, 3D {t3:.0f} s; over 50%: {', '.join(bad) or 'none'}")
    assert report(4, ok, detail)


def test_criterion_5_time_translation(report):
    cfg = load_config(STUDY_2D)
    ratios = []
    snapshot_ratios = []
    for N in cfg.study_n_cells:
        mc = cfg.micro_config(N)
        traj = run_micro(mc)
        q = [translation_quantity(traj, mc.domain, [m])[m * mc.dt] for m in (1, 2, 4)]
        ratios += [q[1] / q[0], q[2] / q[1]]
        m = mc.n_steps // 8
        q = [translation_quantity(traj, mc.domain, [k * m])[k * m * mc.dt] for k in (1, 2, 4)]
        snapshot_ratios += [q[1] / q[0], q[2] / q[1]]
    ok = max(ratios) <= 2.6
    assert report(5, ok, f"ratios at shifts dt, 2dt, 4dt: max {max(ratios):.2f}; "
                         f"at shifts T/8, T/4, T/2: max {max(snapshot_ratios):.2f}")


def test_criterion_6_strong_convergence(report, study_2d, study_3d):
    lines, ok = [], True
    for name, (rep, elapsed) in (("2D inclusion", study_2d), ("3D bridged", study_3d)):
        good = strictly_decreasing(rep.e_eps) and strictly_decreasing(rep.unfolded_L2)
        ok &= good
        orders = ", ".join(f"{o:.2f}" for o in rep.order_e[1:])
        lines.append(f"{name}: e = {', '.join(f'{e:.4f}' for e in rep.e_eps)} (orders {orders}), {elapsed:.0f} s")
    ok &= study_2d[1] <= 900
    assert report(6, ok, "; ".join(lines))


def test_criterion_7_energy_convergence(report, study_2d, study_3d):
    lines, ok = [], True
    for name, (rep, _) in (("2D", study_2d), ("3D", study_3d)):
        for phase in ("i", "e"):
            gap = rep.energy_gap(phase)
            ok &= strictly_decreasing(gap)
            lines.append(f"{name} {phase}: {', '.join(f'{g:.2e}' for g in gap)}")
    assert report(7, ok, "; ".join(lines))


def test_criterion_8_macro_verification(report):
    sol = ManufacturedSolution(M_i=np.diag([0.3, 0.5]), M_e=np.diag([0.6, 0.6]), area=2.0, vol_i=0.25, vol_e=0.75)
    orders, errors = manufactured_order(sol, dim=2, grids=(16, 32))
    cfg = sol.config(2, 32, 1e-3, 0.05)
    res = macro_residuals(run_macro(cfg), cfg)
    ok = orders[0] >= 1.8 and res.max_elliptic <= 10 * cfg.solver.tol
    assert report(8, ok, f"order {orders[0]:.3f} (errors {errors[0]:.2e}, {errors[1]:.2e}), "
                         f"max elliptic residual {res.max_elliptic:.1e}")


def test_criterion_9_linear_sensitivity(report):
    cfg = load_config({"geometry": {"eps": 0.25}})
    base = cfg.micro_config()
    dom = base.domain
    psi = np.cos(np.pi * dom.membrane_coords()[:, 0])

    def final_v(delta):
        def v0(x, y):
            return delta * np.cos(np.pi * x[:, 0])
        mc = MicroConfig(**{**base.__dict__, "v0": v0})
        return run_micro(mc).snapshots[-1].v

    ref = final_v(0.0)
    K = {}
    for delta in (1e-3, 1e-4):
        sep = np.sqrt(dom.eps) * integrate_norm(final_v(delta) - ref, dom, "L2_surface")
        K[delta] = sep / (delta * np.sqrt(dom.eps) * integrate_norm(psi, dom, "L2_surface"))
    ratio = K[1e-3] / K[1e-4]
    ok = 0.5 <= ratio <= 2.0
    assert report(9, ok, f"K(1e-3) = {K[1e-3]:.4f}, K(1e-4) = {K[1e-4]:.4f}, ratio {ratio:.3f}")


def test_criterion_10_determinism(report, tmp_path, capsys):
    cfg_path = tmp_path / "study.toml"
    cfg_path.write_text('[geometry]\nkind = "inclusion"\ndim = 2\nresolution = 8\n')
    codes = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for run in ("a", "b"):
            codes.append(main(["converge", "--config", str(cfg_path), "--out", str(tmp_path / run), "--serial"]))
    capsys.readouterr()
    same = filecmp.cmp(tmp_path / "a" / "convergence.csv", tmp_path / "b" / "convergence.csv", shallow=False)
    ok = codes == [0, 0] and same
    assert report(10, ok, f"exit codes {codes}, byte-identical CSV {same}")
