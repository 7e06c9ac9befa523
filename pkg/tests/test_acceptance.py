"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the terminal summary.
"""
import dataclasses
import filecmp
import os
import time

import numpy as np
import pytest

from dualskin import cli
from dualskin.camera import opposed_pair
from dualskin.config import ScenarioConfig
from dualskin.fem import (assemble_stiffness, default_contact_locations, indentor_at_node,
                          solve_indentation)
from dualskin.mesh import build_cylinder_mesh
from dualskin.modes import Mode, ModeState, initial_state, request_mode, stream_validity, tick
from dualskin.proximity import (ObstaclePointCloud, closest_distance, normal_distances,
                                otsu_threshold)
from dualskin.scenarios import (Setup, read_report, run_distance_sweep, run_indentation_sweep,
                                run_mode_cycle)
from dualskin.tactile import DisplacementEstimate, contact_depth

from .conftest import ACCEPTANCE_LINES
from .oracles import closest_scalar, max_norm_scan, otsu_brute


def record(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def setup():
    return Setup(ScenarioConfig())


# -- contact depth ------------------------------------------------------------

def test_contact_depth_oracle(mesh):
    rng = np.random.default_rng(2024)
    fields = []
    for i in range(1000):
        D = rng.normal(size=(mesh.n_free, 3)) * rng.uniform(0.01, 5.0)
        if i % 10 == 0:      # exact ties between rows
            D[rng.integers(mesh.n_free)] = D[rng.integers(mesh.n_free)]
        if i % 17 == 0:
            D[:] = 0.0
        fields.append(D)
    t0 = time.perf_counter()
    got = [contact_depth(DisplacementEstimate(D, nodes=mesh.free_set)) for D in fields]
    elapsed = time.perf_counter() - t0
    bad = 0
    for D, cd in zip(fields, got):
        v, i = max_norm_scan(D)
        if not (cd.value == v and cd.index == i and cd.node == int(mesh.free_set[i])):
            bad += 1
    record("contact-depth oracle", bad == 0 and elapsed < 1.0,
           f"{1000 - bad}/1000 exact matches, {elapsed:.3f} s (< 1 s)")


# -- projection ---------------------------------------------------------------

def _frustum_points(cam, n, rng):
    pts = []
    # distortion pulls far ideal pixels into the frame, so widen the draw with k1
    grow = 0.5 + 2.5 * cam.k1
    while sum(len(p) for p, _ in pts) < n:
        m = 2 * n
        half_w, half_h = grow * cam.width, grow * cam.height
        u = rng.uniform(cam.cx - half_w, cam.cx + half_w, m)
        v = rng.uniform(cam.cy - half_h, cam.cy + half_h, m)
        oz = rng.uniform(0.0, 300.0, m)
        zc = cam.b + oz
        local = np.stack([(u - cam.cx) * zc / cam.fx, (v - cam.cy) * zc / cam.fy, oz], axis=1)
        p = cam.to_link(local)
        uv, front = cam.project(p)
        keep = front & cam.in_image(uv)
        pts.append((p[keep], oz[keep]))
    P = np.concatenate([a for a, _ in pts])[:n]
    Z = np.concatenate([b for _, b in pts])[:n]
    return P, Z


def test_projection_roundtrip():
    rng = np.random.default_rng(7)
    n = 100_000
    results = []
    t0 = time.perf_counter()
    for k1, tol in ((0.0, 1e-9), (0.5, 1e-6), (1.0, 1e-6)):
        for cam in opposed_pair(300.0, k1=k1):
            P, oz = _frustum_points(cam, n, rng)
            uv, _ = cam.project(P)
            err = float(np.abs(cam.back_project(uv, oz) - P).max())
            results.append((k1, cam.name, err, tol))
    elapsed = time.perf_counter() - t0
    ok = all(e < tol for _, _, e, tol in results) and elapsed < 5.0
    worst = {k1: max(e for k, _, e, _ in results if k == k1) for k1 in (0.0, 0.5, 1.0)}
    record("projection round trip", ok,
           f"max err k1=0: {worst[0.0]:.2e} mm (<1e-9), k1=0.5: {worst[0.5]:.2e}, "
           f"k1=1: {worst[1.0]:.2e} mm (<1e-6); {elapsed:.2f} s for 6 x 1e5 points (< 5 s)")


# -- normal / closest distance ------------------------------------------------

def test_closest_distance_oracle():
    rng = np.random.default_rng(99)
    bad = 0
    for i in range(1000):
        k = int(rng.integers(1, 400))
        pts = rng.uniform(-150, 150, size=(k, 3))
        if i % 5 == 0 and k > 3:
            pts[-1] = pts[0] * np.array([-1.0, -1.0, 1.0])
        pix = np.stack([rng.integers(0, 640, k), rng.integers(0, 480, k)], axis=1)
        r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
        cloud = normal_distances(ObstaclePointCloud(pts, pix, r), 40.0)
        est = closest_distance(cloud)
        normals, kk = closest_scalar(pts, 40.0)
        ok = (list(cloud.normal) == normals and est.distance == normals[kk]
              and est.pixel == (int(pix[kk, 0]), int(pix[kk, 1])))
        bad += not ok
    record("normal/closest distance oracle", bad == 0, f"{1000 - bad}/1000 exact matches")


# -- Otsu ---------------------------------------------------------------------

def test_otsu_oracle():
    rng = np.random.default_rng(31)
    bad = 0
    for i in range(200):
        kind = i % 4
        if kind == 0:
            img = rng.integers(0, 256, size=(64, 64))
        elif kind == 1:   # few levels, many exact ties
            img = rng.choice(rng.integers(0, 256, size=3), size=(64, 64))
        elif kind == 2:   # bimodal
            img = np.where(rng.random((64, 64)) < 0.3, rng.normal(200, 15, (64, 64)),
                           rng.normal(60, 20, (64, 64)))
        else:             # symmetric two-level images tie exactly
            a, b = sorted(rng.choice(256, size=2, replace=False))
            img = np.where(rng.random((64, 64)) < 0.5, a, b)
        img = np.clip(img, 0, 255).astype(np.uint8)
        ref = otsu_brute(img)
        m = otsu_threshold(img)
        bad += not (m.threshold == ref and np.array_equal(m.mask, img > ref))
    record("Otsu brute-force", bad == 0, f"{200 - bad}/200 thresholds equal")


# -- FEM ----------------------------------------------------------------------

def test_fem_validity(mesh, material):
    t0 = time.perf_counter()
    details, ok = [], True

    small = build_cylinder_mesh(n_theta=8, n_axial=6, n_layers=2)
    Ks = assemble_stiffness(small, material)
    node = int(small.node_index(2, 3, 0))
    f = solve_indentation(small, Ks, indentor_at_node(small, node, 3.0))
    n3 = 3 * small.n_nodes
    pres = np.zeros(n3, bool)
    for nodes in (small.clamped, f.contacted):
        pres[(3 * nodes[:, None] + np.arange(3)).ravel()] = True
    up = f.displacements.ravel()[pres]
    Kd = Ks.toarray()
    uf = np.linalg.solve(Kd[~pres][:, ~pres], -Kd[~pres][:, pres] @ up)
    dense = np.zeros(n3)
    dense[pres], dense[~pres] = up, uf
    rel = np.linalg.norm(f.displacements.ravel() - dense) / np.linalg.norm(dense)
    ok &= n3 <= 300 and rel <= 1e-6
    details.append(f"(a) dense rel diff {rel:.1e} on {n3} DOFs")

    K = assemble_stiffness(mesh, material)
    z = solve_indentation(mesh, K, indentor_at_node(mesh, int(mesh.free_set[310]), 0.0))
    ok &= not z.displacements.any()
    details.append(f"(b) zero depth max |u| = {np.abs(z.displacements).max():.1f}")

    even = build_cylinder_mesh(n_theta=24)
    Ke = assemble_stiffness(even, material)
    j, k = 3, even.n_axial // 2 + 4
    a = solve_indentation(even, Ke, indentor_at_node(even, int(even.node_index(j, k, 0)), 4.0))
    b = solve_indentation(even, Ke, indentor_at_node(even, int(even.node_index(j + 12, k, 0)),
                                                     4.0))
    jj, kk, ll = even.grid_coords(np.arange(even.n_nodes))
    partner = even.node_index(jj + 12, kk, ll)
    rot = a.displacements * np.array([-1.0, -1.0, 1.0])
    sym = np.abs(b.displacements[partner] - rot).max() / np.abs(a.displacements).max()
    ok &= sym <= 1e-6
    details.append(f"(c) theta/theta+pi rel diff {sym:.1e}")

    worst = 0.0
    for n_ in default_contact_locations(mesh, 3, 3):
        for d in (1.0, 2.5, 5.0):
            g = solve_indentation(mesh, K, indentor_at_node(mesh, n_, d))
            worst = max(worst, abs(np.linalg.norm(g.displacements, axis=1).max() - d))
    ok &= worst <= 1e-6
    details.append(f"(d) |max|u| - depth| <= {worst:.1e} mm over 27 solves")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    record("FEM validity", bool(ok), "; ".join(details) + f"; {elapsed:.1f} s (< 120 s)")


# -- tactile ------------------------------------------------------------------

@pytest.fixture(scope="module")
def tactile_rows(tmp_path_factory):
    cfg = ScenarioConfig()
    cfg = cfg.replace(tactile=dataclasses.replace(cfg.tactile,
                                                  variants=("lsq_dual_norm", "lsq_single_norm")),
                      indentation=dataclasses.replace(cfg.indentation, artifacts=False))
    out = tmp_path_factory.mktemp("indent")
    t0 = time.perf_counter()
    path = run_indentation_sweep(cfg, out)
    elapsed = time.perf_counter() - t0
    header, rows, _, _ = read_report(path)
    recs = [dict(zip(header, r)) for r in rows]
    return recs, elapsed


def _mean_err(recs, variant, depth, pred=lambda r: True):
    e = [float(r["abs_err_mm"]) for r in recs
         if r["variant"] == variant and float(r["d_true_mm"]) == depth and pred(r)]
    return float(np.mean(e)), len(e)


def test_tactile_end_to_end(tactile_rows):
    recs, elapsed = tactile_rows
    depths = (1.0, 2.5, 4.0, 5.0)
    dual = [_mean_err(recs, "lsq_dual_norm", d)[0] for d in depths]
    single = [_mean_err(recs, "lsq_single_norm", d)[0] for d in depths]
    n = _mean_err(recs, "lsq_dual_norm", 5.0)[1]
    mono = all(a <= b for a, b in zip(dual, dual[1:]))
    better = dual[2] <= single[2] and dual[3] <= single[3]
    mid = lambda r: abs(float(r["z_mm"])) < 1e-6
    mid_mean, n_mid = _mean_err(recs, "lsq_dual_norm", 5.0, mid)
    mid_max = max(float(r["abs_err_mm"]) for r in recs
                  if r["variant"] == "lsq_dual_norm" and float(r["d_true_mm"]) == 5.0 and mid(r))
    fs = 100 * mid_mean / 5.0
    fmt = lambda xs: "/".join(f"{x:.3f}" for x in xs)
    record("tactile (i) error non-decreasing in depth", mono,
           f"dual mean abs err {fmt(dual)} mm at 1/2.5/4/5 mm, {n} locations")
    record("tactile (ii) dual <= single at 4 and 5 mm", better,
           f"dual {dual[2]:.3f}/{dual[3]:.3f} vs single {single[2]:.3f}/{single[3]:.3f} mm")
    record("tactile (iii) mid-length 5 mm FS error <= 25%", fs <= 25.0,
           f"{fs:.1f}% FS mean over {n_mid} mid-length locations "
           f"(worst {100 * mid_max / 5:.1f}%)")
    record("tactile runtime", elapsed < 600, f"{elapsed:.0f} s (< 600 s)")


def test_normalization_forcing(setup):
    s = setup
    pipe, passes = s.pipeline, s.cfg.tactile.passes
    locs = default_contact_locations(s.mesh)[::8]
    trials = identical = ordered = degraded = 0
    for node in locs:
        for depth in (2.5, 5.0):
            field = s.solve(node, depth).displacements
            base_norm = contact_depth(pipe.track(pipe.render(field), "dual", True, passes)[1])
            base_raw = contact_depth(pipe.track(pipe.render(field), "dual", False, passes)[1])
            for beta in (10, 30):
                imgs = pipe.render(field, beta)
                dn = contact_depth(pipe.track(imgs, "dual", True, passes)[1]).value
                dr = contact_depth(pipe.track(imgs, "dual", False, passes)[1]).value
                trials += 1
                identical += dn == base_norm.value
                ordered += abs(dn - depth) <= abs(dr - depth)
                degraded += abs(dr - depth) >= abs(base_raw.value - depth)
    ok = identical == ordered == degraded == trials
    record("normalization forcing", ok,
           f"{trials} trials: bit-identical {identical}, normalized<=raw {ordered}, "
           f"raw degraded-or-equal {degraded}")


# -- proximity ----------------------------------------------------------------

def test_proximity_clean(tmp_path):
    cfg = ScenarioConfig(scenario="distance_sweep")
    cfg = cfg.replace(distance=dataclasses.replace(
        cfg.distance, noise_sigma=0.0, noise_frame_sigma=0.0, noise_scale=1.0, noise_shift=0.0,
        noise_exponent=1.0, calibrate=False, repetitions=1, artifacts=False))
    t0 = time.perf_counter()
    _, _, _, summary = read_report(run_distance_sweep(cfg, tmp_path))
    elapsed = time.perf_counter() - t0
    steps = [r for r in summary if r[0].startswith("n=")]
    worst = max(abs(float(r[4]) - float(r[1])) - float(r[6]) for r in steps)
    errs = [abs(float(r[4]) - float(r[1])) for r in steps]
    ok = len(steps) == 11 and worst <= 0 and elapsed < 60
    record("proximity clean", ok,
           f"max |mean - n| {max(errs):.3f} mm, tightest margin to bound {-worst:.3f} mm "
           f"over {len(steps)} steps; {elapsed:.1f} s (< 60 s)")


def test_proximity_corrupted(tmp_path):
    cfg = ScenarioConfig(scenario="distance_sweep")
    cfg = cfg.replace(distance=dataclasses.replace(cfg.distance, artifacts=False))
    _, _, _, summary = read_report(run_distance_sweep(cfg, tmp_path))
    by = {r[0]: r for r in summary}
    rmse = float(by["reliable_rmse"][5])
    mean80 = float(by["n=80"][4])
    s, t = float(by["calibration"][4]), float(by["calibration"][5])
    ok_r = 10.35 * 0.7 <= rmse <= 10.35 * 1.3
    ok_m = 78.0 <= mean80 <= 88.0
    record("proximity corrupted RMSE in [7.245, 13.455] mm", ok_r,
           f"RMSE {rmse:.2f} mm over n in [20, 100] (calibration s={s:.3f}, t={t:.2f})")
    record("proximity corrupted mean at 80 mm in [78, 88]", ok_m, f"mean {mean80:.2f} mm")


# -- mode machine -------------------------------------------------------------

def test_mode_machine(tmp_path):
    seen = {initial_state()}
    frontier = list(seen)
    for _ in range(15):
        nxt = []
        for st in frontier:
            for q in [request_mode(st, "tactile"), request_mode(st, "proximity")] + \
                     [tick(st, dt)[0] for dt in (0.01, 0.03, 0.1, 0.29, 0.3, 0.31)]:
                key = ModeState(q.state, round(q.transition_elapsed, 9), q.transition_duration)
                if key not in seen:
                    seen.add(key)
                    nxt.append(q)
        frontier = nxt
    multi = sum(sum(stream_validity(x).values()) > 1 for x in seen)
    covers = {x.state for x in seen} == set(Mode)

    cfg = ScenarioConfig(scenario="mode_cycle")
    header, rows, _, summary = read_report(run_mode_cycle(cfg, tmp_path))
    dt = cfg.cycle.dt
    req = [float(r[0]) for r in rows if r[1].startswith("request_")]
    ent = [float(r[0]) for r in rows if r[1] == "mode_entered"]
    ticks = [dict(zip(header, r)) for r in rows if r[1] == "tick"]
    windows = []
    for t_req, t_ent in zip(req, ent):
        n_bad = sum(1 for r in ticks if t_req - 1e-9 <= float(r["t_sim_s"]) < t_ent - 1e-9
                    and r["tactile_valid"] == "0" and r["proximity_valid"] == "0")
        windows.append(n_bad * dt)
    ok_w = len(windows) == 2 and all(abs(w - 0.3) <= dt + 1e-9 for w in windows)
    both = [r for r in ticks if r["tactile_valid"] == "1" and r["proximity_valid"] == "1"]
    record("mode machine", multi == 0 and covers and ok_w and not both,
           f"{len(seen)} reachable states, {multi} with >1 valid stream; per-switch "
           f"both-invalid windows {', '.join(f'{w:.2f}' for w in windows)} s "
           f"(0.3 +/- {dt} s)")


# -- determinism --------------------------------------------------------------

def test_cli_determinism(tmp_path):
    verbs = ("mesh", "dataset", "train", "indent", "distance", "cycle")
    same, details = True, []
    for verb in verbs:
        a, b = tmp_path / f"{verb}_a", tmp_path / f"{verb}_b"
        for out in (a, b):
            code = cli.main([verb, "--quick", "--seed", "11", "--out", str(out)])
            assert code == 0, f"{verb} exited {code}"
        csvs = sorted(p for p in os.listdir(a) if p.endswith(".csv"))
        eq = bool(csvs) and all(filecmp.cmp(a / c, b / c, shallow=False) for c in csvs)
        same &= eq
        details.append(f"{verb}:{len(csvs)}{'=' if eq else '!'}")
    record("CLI determinism", same, "bit-identical CSV per verb " + " ".join(details))
