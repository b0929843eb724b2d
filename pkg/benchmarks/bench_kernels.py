"""Compiled vs pure-Python timings for the traversal, transmission and tracing kernels.

    python3 benchmarks/bench_kernels.py [--grid 32] [--rays 360] [--repeat 3]

The pure-Python side runs each kernel's ``.py_func``; nested kernel calls in
that path stay compiled unless the process is started with RADIOMAP_NUMBA=0,
so pass ``--subprocess`` for a fully interpreted comparison.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from radiomap import _accel, kernels
from radiomap.oracle import GeneratorParams, TraceConfig, generate_scene, trace_pathloss
from radiomap.features import transmission_ray_channel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(grid, rays, repeat):
    scene = generate_scene(GeneratorParams(grid_size=grid), 0)
    cfg = TraceConfig(rays_per_tx=rays)
    trans = np.ascontiguousarray(scene.transmittance_db_per_m)
    # warm the JIT cache before timing
    transmission_ray_channel(scene)
    trace_pathloss(scene, cfg)
    return {
        "numba": _accel.HAVE_NUMBA,
        "transmission_map_s": best_of(lambda: transmission_ray_channel(scene), repeat),
        "trace_s": best_of(lambda: trace_pathloss(scene, cfg), repeat),
        "transmission_map_pyfunc_s": best_of(
            lambda: _accel.python_version(kernels.transmission_map)(trans, scene.tx_row, scene.tx_col,
                                                                    scene.cell_size_m), 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", type=int, default=32)
    ap.add_argument("--rays", type=int, default=360)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--subprocess", action="store_true", help="also time a RADIOMAP_NUMBA=0 process")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    result = {"jit": run(args.grid, args.rays, args.repeat)}
    if args.subprocess:
        env = dict(os.environ, RADIOMAP_NUMBA="0")
        out = subprocess.run([sys.executable, __file__, "--grid", str(args.grid), "--rays", str(args.rays),
                              "--repeat", "1", "--json"], env=env, check=True, capture_output=True, text=True)
        result["python"] = json.loads(out.stdout)["jit"]
    if args.json:
        print(json.dumps(result))
        return
    print(f"grid {args.grid}x{args.grid}, {args.rays} rays")
    for mode, r in result.items():
        print(f"  [{mode}] numba={r['numba']} transmission {r['transmission_map_s'] * 1e3:9.2f} ms   "
              f"trace {r['trace_s'] * 1e3:9.2f} ms")
    jit = result["jit"]
    print(f"  transmission .py_func {jit['transmission_map_pyfunc_s'] * 1e3:9.2f} ms "
          f"(x{jit['transmission_map_pyfunc_s'] / jit['transmission_map_s']:.0f})")
    if "python" in result:
        py = result["python"]
        print(f"  speedup: transmission x{py['transmission_map_s'] / jit['transmission_map_s']:.0f}, "
              f"trace x{py['trace_s'] / jit['trace_s']:.0f}")


if __name__ == "__main__":
    main()
