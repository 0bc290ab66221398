"""Benchmark the compiled tape engine against the pure-Python fallback.

Measures scalar record/backward throughput and a realistic design-step
workload (9 fields x 3 wavelengths x 256 rays through a doublet plus the
spot-loss reduction), confirming the two engines produce identical
numbers while the compiled path does the heavy lifting.

Run:  python benchmarks/bench_engines.py [--rays 256] [--repeats 3]
"""

import argparse
import time


from raylens import autodiff as ad
from raylens import optimize as opt
from raylens import psf, raytrace
from raylens._core import CTape
from raylens._core._pytape import PyTape


def bench_scalar(engine_cls, n=50_000):
    tape = ad.Tape(engine_cls=engine_cls)
    x = tape.leaf(1.1)
    y = tape.leaf(0.7)
    z = x
    t0 = time.perf_counter()
    for _ in range(n):
        z = z * y + 0.1
    t_fwd = time.perf_counter() - t0
    t0 = time.perf_counter()
    tape.backward(z)
    t_bwd = time.perf_counter() - t0
    return tape.n_nodes, t_fwd, t_bwd


def bench_design_step(engine_cls, rays, force_scalar):
    lens = opt.init_from_scratch(2, seed=0)
    cfg = opt.DesignConfig(rays_train=rays, iterations=1, seed=0)
    tape = ad.Tape(engine_cls=engine_cls)
    t0 = time.perf_counter()
    bound = raytrace.bind_system(lens, tape)
    terms = []
    for angle in cfg.field_angles:
        for wl in (psf.WL_RED, psf.WL_GREEN, psf.WL_BLUE):
            bundle = raytrace.sample_pupil_rays(lens, angle, wl, rays, 0)
            res = raytrace.trace_to_sensor(None, bundle, bound=bound,
                                           force_scalar=force_scalar)
            terms.append(psf.rms_spot(res))
    loss = ad.sum_vars(terms) / float(len(terms))
    tape.backward(loss)
    grads = bound.gradients()
    dt = time.perf_counter() - t0
    return dt, loss.val, sum(grads.values()), tape.n_nodes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    engines = [("pure-python", PyTape, True)]
    if CTape is not None:
        engines.append(("compiled", CTape, False))
    else:
        print("compiled engine not built; benchmarking the fallback only")

    print("scalar ops (Python dispatch):")
    for name, cls, _ in engines:
        n, f, b = bench_scalar(cls)
        print("  %-12s %8d nodes  record %7.1f ns/node  backward %7.1f ns/node"
              % (name, n, f / n * 1e9, b / n * 1e9))

    print("\nfull spot-loss design step (%d rays x 27 bundles):" % args.rays)
    ref = None
    for name, cls, force_scalar in engines:
        times = []
        for _ in range(args.repeats):
            dt, loss, gsum, nodes = bench_design_step(cls, args.rays, force_scalar)
            times.append(dt)
        best = min(times)
        print("  %-12s %7.0f ms/step  (%.2e nodes, loss %.9f)"
              % (name, best * 1e3, nodes, loss))
        if ref is None:
            ref = (loss, gsum, best)
        else:
            match = "identical" if (loss == ref[0] and gsum == ref[1]) else "MISMATCH"
            print("  values vs fallback: %s; speedup %.1fx"
                  % (match, ref[2] / best))


if __name__ == "__main__":
    main()
