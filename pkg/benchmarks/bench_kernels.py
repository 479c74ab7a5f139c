"""Compiled kernels against the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--rays 1024] [--samples 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from streamnerf._kernels import _fallback

try:
    from streamnerf._kernels import _core
except ImportError:
    _core = None

from streamnerf.field import FieldConfig


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rays", type=int, default=1024)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cfg = FieldConfig()
    n_rays, n_s = args.rays, args.samples
    n = n_rays * n_s

    # ray-coherent sample positions, like the renderer produces
    o = rng.random((n_rays, 3))
    d = rng.normal(size=(n_rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = np.clip(o[:, None] + np.linspace(0, 0.5, n_s)[None, :, None] * d[:, None], 0, 1)
    q = q.reshape(-1, 3).astype(np.float32)
    table = (rng.normal(size=(cfg.n_levels, cfg.table_size, cfg.n_features)) * 1e-2).astype(np.float32)
    res = cfg.resolutions
    grad = rng.normal(size=(n, cfg.encoding_dim)).astype(np.float32)
    sigma = rng.random((n_rays, n_s)).astype(np.float32) * 5
    delta = np.full((n_rays, n_s), 1.0 / n_s, np.float32)
    rgb = rng.random((n_rays, n_s, 3)).astype(np.float32)
    gc = rng.normal(size=(n_rays, 3)).astype(np.float32)
    rgba = rng.integers(0, 256, (1080, 1920, 4), dtype=np.uint8)

    def cases(mod):
        _, idx, w = mod.hash_encode(q, table, res)
        _, _, wts, tr = mod.composite(sigma, delta, rgb)
        y, uv = mod.rgba_to_nv12(rgba)
        return {
            "hash_encode (train)": lambda: mod.hash_encode(q, table, res),
            "hash_encode (infer)": lambda: mod.hash_encode(q, table, res, False),
            "hash_encode_backward": lambda: mod.hash_encode_backward(grad, idx, w, table.shape),
            "composite": lambda: mod.composite(sigma, delta, rgb),
            "composite_backward": lambda: mod.composite_backward(gc, None, sigma, delta, rgb, wts, tr),
            "nv12_to_rgba 1080p": lambda: mod.nv12_to_rgba(y, uv, 1920, 1080),
            "rgba_to_nv12 1080p": lambda: mod.rgba_to_nv12(rgba),
        }

    print(f"{n_rays} rays x {n_s} samples = {n} points; best of {args.repeat}")
    print(f"{'kernel':<24}{'numpy [ms]':>12}{'compiled [ms]':>15}{'speedup':>10}")
    py = cases(_fallback)
    cc = cases(_core) if _core is not None else {}
    for name, fn in py.items():
        t_py = best_of(fn, args.repeat) * 1e3
        if name in cc:
            t_c = best_of(cc[name], args.repeat) * 1e3
            print(f"{name:<24}{t_py:12.1f}{t_c:15.1f}{t_py / t_c:9.1f}x")
        else:
            print(f"{name:<24}{t_py:12.1f}{'n/a':>15}")


if __name__ == "__main__":
    main()
