"""Scenario runners behind the CLI verbs.

Every runner is a pure function of its :class:`ScenarioConfig` and writes a
CSV report: a header row, per-sample rows, then a footer of ``#``-prefixed
summary lines that can be recomputed from the rows.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .camera import opposed_pair, write_camera_file
from .config import ScenarioConfig
from .fem import (DatasetRecord, GroundTruthField, MaterialParams, assemble_stiffness,
                  default_contact_locations, generate_dataset, indentor_at_node,
                  read_dataset_record, solve_indentation, write_dataset)
from .mesh import (DEFAULT_ELEMENT_SIZE, DEFAULT_LENGTH, DEFAULT_RADIUS, DEFAULT_RING_WIDTH,
                   DEFAULT_THICKNESS, build_cylinder_mesh, default_mesh, export_mesh,
                   place_markers)
from .modes import Mode, initial_state, request_mode, stream_validity, tick
from .proximity import (calibrate_depth_affine, estimate_proximity, fuse_views,
                        quantization_bound)
from .render import (ObstacleScene, Sphere, corrupt_depth, render_depth_map, write_pgm,
                     write_ptdm)
from .tactile import (TactilePipeline, concat_views, contact_depth, train_linear_regressor,
                      write_regressor)

__all__ = [
    "TACTILE_FS",
    "PROXIMITY_FS",
    "Setup",
    "write_report",
    "read_report",
    "indentation_grid",
    "run_mesh_export",
    "run_indentation_sweep",
    "run_dataset_gen",
    "run_train",
    "run_distance_sweep",
    "run_mode_cycle",
]

TACTILE_FS = 5.0
PROXIMITY_FS = 100.0
FULL_GRID = (21, 21, 25)     # 441 locations x 25 depths
QUICK_GRID = (3, 3)

_VARIANTS = {
    "lsq_dual_norm": ("dual", True),
    "lsq_single_norm": ("single", True),
    "lsq_dual_raw": ("dual", False),
    "lsq_single_raw": ("single", False),
    "ridge_dual_norm": ("dual", True),
}


# -- reports ------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_report(path, header, rows, summary_header=(), summary_rows=()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    if summary_header:
        foot = io.StringIO()
        fw = csv.writer(foot, lineterminator="\n")
        fw.writerow(summary_header)
        for r in summary_rows:
            fw.writerow([_cell(x) for x in r])
        buf.write("# summary\n")
        for line in foot.getvalue().splitlines():
            buf.write(f"# {line}\n")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def read_report(path):
    """``(header, rows, summary_header, summary_rows)``, all as strings."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    foot = [ln[2:] for ln in lines if ln.startswith("# ") and ln != "# summary"]
    rows = list(csv.reader(body))
    frows = list(csv.reader(foot))
    return rows[0], rows[1:], (frows[0] if frows else []), frows[1:]


# -- shared setup -------------------------------------------------------------

@dataclass
class Setup:
    cfg: ScenarioConfig

    @cached_property
    def mesh(self):
        m = self.cfg.mesh
        if (m.radius, m.length, m.element_size, m.fixed_ring_width, m.thickness) == (
                DEFAULT_RADIUS, DEFAULT_LENGTH, DEFAULT_ELEMENT_SIZE, DEFAULT_RING_WIDTH,
                DEFAULT_THICKNESS):
            return default_mesh()
        return build_cylinder_mesh(m.radius, m.length, m.element_size, m.fixed_ring_width,
                                   m.thickness)

    @cached_property
    def material(self):
        return MaterialParams(self.cfg.material.youngs_modulus, self.cfg.material.poisson_ratio)

    @cached_property
    def K(self):
        return assemble_stiffness(self.mesh, self.material)

    @cached_property
    def cameras(self):
        c = self.cfg.camera
        return opposed_pair(self.cfg.mesh.length, fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy, k1=c.k1,
                            width=c.width, height=c.height)

    @cached_property
    def markers(self):
        mk = self.cfg.markers
        return place_markers(self.mesh, mk.rings, mk.per_ring, mk.diameter, stagger=mk.stagger)

    @cached_property
    def pipeline(self):
        return TactilePipeline(self.mesh, self.markers, self.cameras, mu=self.cfg.tactile.mu)

    def solve(self, node, depth):
        return solve_indentation(self.mesh, self.K, indentor_at_node(self.mesh, node, depth))


def indentation_grid(setup: Setup, n_axial: int, n_angular: int):
    return default_contact_locations(setup.mesh, n_axial, n_angular)


def _node_geometry(mesh, node):
    x, y, z = mesh.nodes[node]
    return float(np.degrees(np.arctan2(y, x)) % 360.0), float(z)


# -- mesh ---------------------------------------------------------------------

def run_mesh_export(cfg: ScenarioConfig, out_dir, quick: bool = False) -> str:
    s = Setup(cfg)
    m = s.mesh
    os.makedirs(out_dir, exist_ok=True)
    export_mesh(m, os.path.join(out_dir, "mesh.txt"))
    for cam in s.cameras:
        write_camera_file(cam, os.path.join(out_dir, f"{cam.name}.txt"))
    rows = []
    for i, a in enumerate(s.markers.anchors):
        rows.append((i, i // s.markers.per_ring, float(np.degrees(a.theta) % 360.0),
                     float(a.z), *map(float, a.rest)))
    write_report(os.path.join(out_dir, "markers.csv"),
                 ("marker_id", "ring", "theta_deg", "z_mm", "x_mm", "y_mm", "z_rest_mm"), rows)
    vol = m.tet_volumes()
    summary = [("n_nodes", m.n_nodes), ("n_tetrahedra", len(m.tetrahedra)),
               ("n_free", m.n_free), ("n_fixed", len(m.fixed_set)),
               ("n_markers", len(s.markers)), ("min_tet_volume_mm3", float(vol.min())),
               ("total_volume_mm3", float(vol.sum()))]
    path = os.path.join(out_dir, "mesh.csv")
    free = set(m.free_set.tolist())
    node_rows = [(int(i), *map(float, m.nodes[i]), int(i) in free) for i in m.outer_nodes]
    return write_report(path, ("node", "x_mm", "y_mm", "z_mm", "free"), node_rows,
                        ("quantity", "value"), summary)


# -- tactile ------------------------------------------------------------------

def _estimate_variant(s: Setup, variant, images, regressor=None):
    view, normalized = _VARIANTS[variant]
    pipe = s.pipeline
    if variant.startswith("ridge"):
        obs = pipe.observe(images, normalized)
        y, mask = concat_views(*obs)
        est = regressor.predict(np.where(mask, y, 0.0), nodes=s.mesh.free_set, view=view)
        return contact_depth(est).value
    _, est = pipe.track(images, view, normalized, s.cfg.tactile.passes)
    return contact_depth(est).value


def _ridge_features(s: Setup, records):
    X, Y = [], []
    for rec in records:
        imgs = s.pipeline.render(rec.field.displacements)
        y, mask = concat_views(*s.pipeline.observe(imgs, True))
        X.append(np.where(mask, y, 0.0))
        Y.append(rec.field.free_block(s.mesh).ravel())
    return np.array(X), np.array(Y)


def _dataset_grid(cfg: ScenarioConfig, quick: bool):
    d = cfg.dataset
    if d.full_grid:
        na, nt, nd = FULL_GRID
        return na, nt, tuple(float(x) for x in np.linspace(5.0 / nd, 5.0, nd))
    if quick:
        return QUICK_GRID[0], QUICK_GRID[1], tuple(d.depths[::3]) or d.depths
    return d.axial_locations, d.angular_locations, d.depths


def _train_regressor(s: Setup, quick: bool):
    na, nt, depths = _dataset_grid(s.cfg, quick)
    locs = indentation_grid(s, na, nt)
    recs = generate_dataset(s.mesh, s.material, locs, depths, K=s.K)
    X, Y = _ridge_features(s, recs)
    return train_linear_regressor(X, Y, s.cfg.train.lam, s.cfg.train.holdout_fraction,
                                  seed=s.cfg.seed)


def run_indentation_sweep(cfg: ScenarioConfig, out_dir, quick: bool = False) -> str:
    s = Setup(cfg)
    g = cfg.indentation
    na, nt = QUICK_GRID if quick else (g.axial_locations, g.angular_locations)
    locs = indentation_grid(s, na, nt)
    variants = list(cfg.tactile.variants)
    if cfg.tactile.ridge and "ridge_dual_norm" not in variants:
        variants.append("ridge_dual_norm")
    reg = _train_regressor(s, quick) if any(v.startswith("ridge") for v in variants) else None
    beta = cfg.tactile.brightness_offset
    art = os.path.join(out_dir, "artifacts")
    mid = locs[len(locs) // 2]
    if g.artifacts:
        os.makedirs(art, exist_ok=True)
        for ref in s.pipeline.references:
            write_pgm(os.path.join(art, f"reference_{ref.camera_id}.pgm"), ref.pixels)

    rows = []
    for li, node in enumerate(locs):
        theta, z = _node_geometry(s.mesh, node)
        for depth in g.depths:
            field = s.solve(node, depth)
            imgs = s.pipeline.render(field.displacements, beta)
            if g.artifacts and node == mid:
                for im in imgs:
                    write_pgm(os.path.join(art, f"loc{li:03d}_d{depth:g}_{im.camera_id}.pgm"),
                              im.pixels)
            for v in variants:
                d_hat = _estimate_variant(s, v, imgs, reg)
                err = abs(d_hat - depth)
                rows.append((li, node, theta, z, float(depth), v, d_hat, err,
                             100.0 * err / TACTILE_FS))
    summary = _tactile_summary(rows, variants, g.depths)
    return write_report(os.path.join(out_dir, "indentation.csv"),
                        ("location_id", "node", "theta_deg", "z_mm", "d_true_mm", "variant",
                         "d_hat_mm", "abs_err_mm", "fs_err_pct"), rows,
                        ("variant", "d_true_mm", "n", "mean_abs_err_mm", "mean_fs_err_pct",
                         "max_abs_err_mm"), summary)


def _tactile_summary(rows, variants, depths):
    out = []
    for v in variants:
        for d in depths:
            e = [r[7] for r in rows if r[5] == v and r[4] == float(d)]
            if e:
                m = float(np.mean(e))
                out.append((v, float(d), len(e), m, 100.0 * m / TACTILE_FS, float(np.max(e))))
    return out


def run_dataset_gen(cfg: ScenarioConfig, out_dir, quick: bool = False) -> str:
    s = Setup(cfg)
    na, nt, depths = _dataset_grid(cfg, quick)
    locs = indentation_grid(s, na, nt)
    recs = generate_dataset(s.mesh, s.material, locs, depths, K=s.K)
    write_dataset(recs, os.path.join(out_dir, "dataset"))
    rows = []
    for i, r in enumerate(recs):
        theta, z = _node_geometry(s.mesh, r.node)
        dmax = float(np.max(np.linalg.norm(r.field.displacements, axis=1)))
        rows.append((i, r.location_id, r.node, theta, z, r.depth, dmax, r.field.iterations,
                     r.field.residual))
    summary = []
    for d in depths:
        sel = [x[6] for x in rows if x[5] == float(d)]
        summary.append((float(d), len(sel), float(np.mean(sel))))
    return write_report(os.path.join(out_dir, "dataset.csv"),
                        ("record", "location_id", "node", "theta_deg", "z_mm", "depth_mm",
                         "max_disp_mm", "cg_iterations", "cg_residual"), rows,
                        ("depth_mm", "n_records", "mean_max_disp_mm"), summary)


def _load_records(s: Setup, directory):
    with open(os.path.join(directory, "manifest.txt"), encoding="utf-8") as fh:
        names = [ln.strip() for ln in fh if ln.strip()]
    recs = []
    for name in names:
        head, disp = read_dataset_record(os.path.join(directory, name))
        f = GroundTruthField(disp, np.zeros(0, dtype=int), 0, 0.0)
        ind = indentor_at_node(s.mesh, int(head["node"]), float(head["depth_mm"]))
        recs.append(DatasetRecord(f, ind, int(head["location"]), int(head["node"]),
                                  float(head["depth_mm"])))
    return recs


def run_train(cfg: ScenarioConfig, out_dir, quick: bool = False) -> str:
    s = Setup(cfg)
    if cfg.train.dataset_dir:
        recs = _load_records(s, cfg.train.dataset_dir)
    else:
        na, nt, depths = _dataset_grid(cfg, quick)
        recs = generate_dataset(s.mesh, s.material, indentation_grid(s, na, nt), depths, K=s.K)
    X, Y = _ridge_features(s, recs)
    reg = train_linear_regressor(X, Y, cfg.train.lam, cfg.train.holdout_fraction, seed=cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    write_regressor(reg, os.path.join(out_dir, "regressor.bin"))
    hold = set(reg.meta["holdout"])
    train = set(reg.meta["train"])
    rows = []
    for i, rec in enumerate(recs):
        split = "holdout" if i in hold else ("train" if i in train else "duplicate")
        d_hat = contact_depth(reg.predict(X[i], nodes=s.mesh.free_set)).value
        rows.append((i, split, rec.depth, d_hat, abs(d_hat - rec.depth)))
    summary = []
    for split in ("train", "holdout"):
        e = [r[4] for r in rows if r[1] == split]
        summary.append((split, len(e), float(np.mean(e)) if e else float("nan")))
    summary.append(("holdout_rmse_disp_mm", reg.n_holdout, reg.holdout_rmse))
    return write_report(os.path.join(out_dir, "train.csv"),
                        ("record", "split", "d_true_mm", "d_hat_mm", "abs_err_mm"), rows,
                        ("split", "n", "mean_abs_err_mm"), summary)


# -- proximity ----------------------------------------------------------------

def _noise_free(d) -> bool:
    return (d.noise_sigma == 0 and d.noise_frame_sigma == 0 and d.noise_scale == 1
            and d.noise_shift == 0 and d.noise_exponent == 1)


def _corrupt(d, depth, rng):
    if _noise_free(d):
        return depth
    return corrupt_depth(depth, d.noise_sigma, d.noise_scale, d.noise_shift, rng,
                         d.noise_frame_sigma, d.noise_exponent, d.noise_ref_depth)


def _calibrate(s: Setup, rng):
    """Affine fit from a target moved along camera 1's axis to known depths."""
    d = s.cfg.distance
    cam = s.cameras[0]
    R = d.obstacle_radius
    x0 = s.cfg.mesh.radius + d.calibration_clearance + R
    raw, true = [], []
    for z in d.calibration_depths:
        gt = render_depth_map(cam, ObstacleScene((Sphere((x0, 0.0, float(z)), R),),
                                                 s.cfg.mesh.radius))
        if not gt.valid.any():
            continue
        for _ in range(d.calibration_frames):
            cd = _corrupt(d, gt, rng)
            raw.append(float(cd.depth[gt.valid].mean()))
            true.append(float(gt.depth[gt.valid].mean()))
    return calibrate_depth_affine(raw, true)


def run_distance_sweep(cfg: ScenarioConfig, out_dir, quick: bool = False) -> str:
    s = Setup(cfg)
    d = cfg.distance
    reps = min(d.repetitions, 10) if quick else d.repetitions
    r_s = cfg.mesh.radius
    R = d.obstacle_radius
    streams = np.random.SeedSequence(cfg.seed).spawn(len(d.distances) + 1)
    cal = _calibrate(s, np.random.default_rng(streams[-1])) if d.calibrate else None
    art = os.path.join(out_dir, "artifacts")
    if d.artifacts:
        os.makedirs(art, exist_ok=True)
    rows, summary = [], []
    sample = 0
    for di, n_true in enumerate(d.distances):
        scene = ObstacleScene((Sphere((r_s + n_true + R, 0.0, d.obstacle_z), R),), r_s)
        gts = [render_depth_map(c, scene) for c in s.cameras]
        gmax = max((float(g.depth[g.valid].max()) for g in gts if g.valid.any()), default=0.0)
        bound = max(quantization_bound(c, gmax) for c in s.cameras)
        rng = np.random.default_rng(streams[di])
        vals = []
        for k in range(reps):
            maps = [_corrupt(d, g, rng) for g in gts]
            if d.artifacts and k == 0 and di in (0, len(d.distances) - 1):
                for c, g, m in zip(s.cameras, gts, maps):
                    write_ptdm(os.path.join(art, f"n{n_true:g}_{c.name}_truth.ptdm"), g)
                    write_ptdm(os.path.join(art, f"n{n_true:g}_{c.name}_sample.ptdm"), m)
            ests = [estimate_proximity(c, m, r_s, cal, (d.valid_min, d.valid_max))[0]
                    for c, m in zip(s.cameras, maps)]
            f = fuse_views(*ests)
            u, v = f.pixel if f.valid else (None, None)
            rows.append((sample, float(n_true), f.distance, f.view if f.valid else "",
                         u, v, f.valid))
            vals.append(f.distance)
            sample += 1
        arr = np.array(vals, dtype=float)
        ok = np.isfinite(arr)
        mean = float(arr[ok].mean()) if ok.any() else float("nan")
        rmse = float(np.sqrt(np.mean((arr[ok] - n_true) ** 2))) if ok.any() else float("nan")
        summary.append((f"n={n_true:g}", float(n_true), int(ok.sum()), reps, mean, rmse, bound))
    sq = [(r[2] - r[1]) ** 2 for r in rows if r[6] and d.valid_min <= r[1] <= d.valid_max]
    overall = float(np.sqrt(np.mean(sq))) if sq else float("nan")
    summary.append(("reliable_rmse", float("nan"), len(sq), len(sq), float("nan"), overall,
                    float("nan")))
    if cal is not None:
        summary.append(("calibration", float("nan"), 0, 0, cal[0], cal[1], float("nan")))
    return write_report(os.path.join(out_dir, "distance.csv"),
                        ("sample_id", "n_true_mm", "n_hat_mm", "view", "argmin_u", "argmin_v",
                         "valid"), rows,
                        ("group", "n_true_mm", "n_valid", "n_samples", "mean_n_hat_mm",
                         "rmse_mm", "quant_bound_mm"), summary)


# -- mode cycle ---------------------------------------------------------------

def run_mode_cycle(cfg: ScenarioConfig, out_dir, quick: bool = False) -> str:
    """Scripted approach-then-touch timeline under the film state machine.

    The obstacle's clearance falls at ``approach_speed`` until it has pressed
    ``max_indent`` into the skin. Proximity is measured only while the film
    is transparent, contact depth only while it is opaque.
    """
    s = Setup(cfg)
    y = cfg.cycle
    r_s = cfg.mesh.radius
    R = y.obstacle_radius
    n_steps = int(round(y.duration / y.dt))
    state = initial_state(y.transition_duration)
    node = int(s.mesh.node_index(0, s.mesh.n_axial // 2, 0))
    schedule = sorted([(y.switch_to_proximity, "proximity"), (y.switch_to_tactile, "tactile")])
    pending = [p for p in schedule if p[0] >= 0]
    cache = {}
    rows = []
    both_invalid = 0
    first_imminent = None
    entered = []
    requests = []

    def clearance(t):
        return max(y.start_clearance - y.approach_speed * t, -y.max_indent)

    for k in range(n_steps + 1):
        t = k * y.dt
        while pending and pending[0][0] <= t + 1e-12:
            _, target = pending.pop(0)
            new = request_mode(state, target)
            if new != state:
                requests.append(t)
            state = new
            rows.append((t, f"request_{target}", state.state.value, state.led_on, "", "", "",
                         "", "", "", ""))
        val = stream_validity(state)
        c = clearance(t)
        n_hat = d_hat = ""
        imminent = ""
        d_true = max(-c, 0.0)
        if val["proximity_valid"]:
            scene = ObstacleScene((Sphere((r_s + c + R, 0.0, 0.0), R),), r_s,
                                  allow_penetration=True)
            ests = [estimate_proximity(cam, render_depth_map(cam, scene), r_s)[0]
                    for cam in s.cameras]
            f = fuse_views(*ests)
            if f.valid:
                n_hat = f.distance
                imminent = f.contact_imminent
                if f.contact_imminent and first_imminent is None:
                    first_imminent = t
        if val["tactile_valid"]:
            key = round(d_true, 9)
            if key not in cache:
                if d_true > 0:
                    field = s.solve(node, d_true)
                    imgs = s.pipeline.render(field.displacements)
                    _, est = s.pipeline.track(imgs, "dual", True, cfg.tactile.passes)
                    cache[key] = contact_depth(est).value
                else:
                    cache[key] = 0.0
            d_hat = cache[key]
        if not (val["tactile_valid"] or val["proximity_valid"]):
            both_invalid += 1
        rows.append((t, "tick", state.state.value, state.led_on, val["tactile_valid"],
                     val["proximity_valid"], c, n_hat, imminent, d_true, d_hat))
        state, events = tick(state, y.dt)
        for ev in events:
            entered.append(t + ev.offset)
            rows.append((t + ev.offset, ev.event, ev.state.value, state.led_on, "", "", "", "",
                         "", "", ""))

    switch_t = [tt for tt, tgt in schedule if tgt == "tactile"]
    summary = [
        ("switch_requests", len(requests)),
        ("modes_entered", len(entered)),
        ("both_invalid_s", both_invalid * y.dt),
        ("transition_duration_s", y.transition_duration),
        ("first_contact_imminent_s", first_imminent if first_imminent is not None else ""),
        ("switch_to_tactile_s", switch_t[0] if switch_t else ""),
        ("final_state", state.state.value if isinstance(state.state, Mode) else state.state),
    ]
    return write_report(os.path.join(out_dir, "cycle.csv"),
                        ("t_sim_s", "event", "state", "led_on", "tactile_valid",
                         "proximity_valid", "clearance_mm", "n_hat_mm", "contact_imminent",
                         "d_true_mm", "d_hat_mm"), rows, ("quantity", "value"), summary)
