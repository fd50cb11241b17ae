"""Time the triangle-fill kernel under both backends and check they agree.

    python benchmarks/bench_raster.py --renders 50 --size 64
"""
import argparse
import time

import numpy as np

from recycle_hand.dataset import memory_corpus
from recycle_hand.hand_model import DeformConfig, generate_sample, load_template
from recycle_hand.renderer import average_color, rasterize


def time_backend(meshes, template, cameras, colors, backend, repeat):
    rasterize(meshes[0], template, cameras[0], colors[0], backend=backend)  # warm-up / compile
    best, images = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        images = [rasterize(m, template, mc, c, backend=backend)[0]
                  for m, mc, c in zip(meshes, cameras, colors)]
        best = min(best, time.perf_counter() - t0)
    return best / len(meshes), images


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--renders", type=int, default=50)
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    template = load_template()
    deform = DeformConfig(image_size=(args.size, args.size))
    samples = [generate_sample(template, args.seed * 100_003 + i, deform) for i in range(args.renders)]
    meshes = [s[0] for s in samples]
    cameras = [s[2] for s in samples]
    corpus = memory_corpus(args.renders, args.seed, (args.size, args.size))
    colors = [average_color(bg) for bg in corpus.images]

    fast, a = time_backend(meshes, template, cameras, colors, "numba", args.repeat)
    slow, b = time_backend(meshes, template, cameras, colors, "numpy", args.repeat)
    same = all(np.array_equal(x, y) for x, y in zip(a, b))
    print(f"{'backend':<8} {'ms/render':>10}")
    print(f"{'numba':<8} {1e3 * fast:10.3f}")
    print(f"{'numpy':<8} {1e3 * slow:10.3f}")
    print(f"speedup {slow / fast:.1f}x, buffers identical: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
