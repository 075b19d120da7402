"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends run on identical inputs; the script also checks that their
outputs agree bit for bit.
"""
import argparse
import time

import numpy as np

from affectsynth import kernels
from affectsynth import testbed as tb
from affectsynth.render import screen_coordinates


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = kernels.backends()

    face = tb.make_face(1)
    cam = tb.default_camera((512, 512), focal=1280.0)
    xy, z = screen_coordinates(face.vertices, cam)
    pts = np.random.default_rng(0).uniform(-1, 1, (600, 2))
    cases = {
        "rasterize 512x512 face": lambda m: m.rasterize_triangles(xy, z, face.triangles, 512, 512, True),
        "ward 600 points -> 50": lambda m: m.ward_merges(pts, 50),
    }
    print(f"{'kernel':<26}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for label, run in cases.items():
        row, outs = [], []
        for mod in backends.values():
            t, out = best_of(lambda: run(mod), args.repeat)
            row.append(t)
            outs.append(out)
        same = all(all(np.array_equal(a, b) for a, b in zip(outs[0], o)) for o in outs[1:])
        speed = f"{row[0] / row[-1]:9.1f}x" if len(row) > 1 else ""
        print(f"{label:<26}" + "".join(f"{t * 1e3:10.1f}ms" for t in row) + speed
              + ("" if same else "  OUTPUTS DIFFER"))


if __name__ == "__main__":
    main()
