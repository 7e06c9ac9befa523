"""Time the compiled kernels against the numpy fallback on realistic inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from dualskin import _kernels
from dualskin.camera import opposed_pair
from dualskin.fem import MaterialParams, assemble_stiffness, indentor_at_node, solve_indentation
from dualskin.mesh import default_mesh, marker_world_positions, place_markers
from dualskin.render import ObstacleScene, Sphere


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    mesh = default_mesh()
    K = assemble_stiffness(mesh, MaterialParams())
    ind = indentor_at_node(mesh, int(mesh.node_index(5, 15, 0)), 4.0)
    cam, _ = opposed_pair()
    markers = place_markers(mesh)
    uv, front = cam.project(marker_world_positions(markers, np.zeros((mesh.n_nodes, 3))))
    zc = cam.b + cam.to_local(markers.rest_positions)[:, 2]
    radii = np.where(front, cam.fx * 1.5 / zc, 0.0)
    dirs = cam.pixel_rays()
    scene = ObstacleScene((Sphere((120.0, 0.0, 0.0), 40.0),), 40.0)
    sph, cap, box = scene._arrays()
    return {
        "pcg (FEM solve, default mesh)":
            lambda b: solve_indentation(mesh, K, ind, backend=b),
        "rasterize (144 markers, 640x480)":
            lambda b: _kernels.rasterize_disks(uv, radii, cam.width, cam.height, backend=b),
        "raycast (sphere, 640x480)":
            lambda b: _kernels.raycast(cam.center, dirs, sph, cap, box, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {_kernels.BACKEND})")
    print(f"{'kernel':36s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in cases().items():
        t = {b: _best(lambda: fn(b), args.repeat) for b in backends}
        line = f"{name:36s}" + "".join(f"{1e3 * t[b]:10.2f}ms" for b in backends)
        if "cython" in t:
            line += f"   {t['python'] / t['cython']:8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
