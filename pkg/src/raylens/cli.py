"""Command-line interface: one executable, one subcommand per pipeline stage.

Every run prints its resolved configuration (unless --quiet) and exits 0
on success, 2 on usage errors (bad flags, missing input files), and 1 on
runtime failures, with a one-line machine-parsable error on stderr.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, engine_name
from . import imaging, io_analysis, optimize, psf, raytrace, tasknet
from .errors import RaylensError

HALF_FOV = 34.4


def _fields(n, half_fov=HALF_FOV):
    return tuple(float(a) for a in np.linspace(0.0, half_fov, n))


def _need_file(parser, path, what):
    if not os.path.exists(path):
        parser.error("%s file not found: %s" % (what, path))


def _print_config(args):
    if args.quiet:
        return
    cfg = {k: v for k, v in vars(args).items()
           if k not in ("func", "parser") and not k.startswith("_")}
    print("raylens %s (%s engine) config: %s"
          % (__version__, engine_name(), json.dumps(cfg, sort_keys=True,
                                                    default=str)))


def _load_lens(parser, path):
    _need_file(parser, path, "lens")
    return io_analysis.load_lens(path)


def _load_net(parser, path):
    _need_file(parser, path, "network")
    return tasknet.load_network(path)


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_analyze(args):
    lens = args._lens
    fields = _fields(args.fields)
    chart = imaging.test_chart()
    per_field = []
    for angle in fields:
        stats = {}
        for name, wl in (("red", psf.WL_RED), ("green", psf.WL_GREEN),
                         ("blue", psf.WL_BLUE)):
            bundle = raytrace.sample_pupil_rays(lens, angle, wl, args.rays,
                                                args.seed)
            res = raytrace.trace_to_sensor(lens, bundle)
            st = psf.spot_stats([((res.x_val[i], res.y_val[i]), res.valid[i])
                                 for i in range(len(res))])
            stats[name] = {"rms_mm": st.rms_radius,
                           "median_mm": st.median_radius,
                           "r80_mm": st.r80,
                           "valid_rays": res.n_valid}
        caps = imaging.simulate_capture_batch(
            lens, [chart], [angle], args.rays, args.seed,
            kernel_crop=args.crop, pitch_scale=args.pitch_scale,
            threads=args.threads)
        stats["psnr_db"] = imaging.psnr(chart, caps[0])
        stats["angle_deg"] = angle
        per_field.append(stats)
    report = {"per_field": per_field,
              "config": {"fields": args.fields, "rays": args.rays,
                         "seed": args.seed, "pitch_scale": args.pitch_scale}}
    if args.net:
        net = args._net
        spec = tasknet.GlyphSpec(seed=args.glyph_seed)
        val = tasknet.generate_glyphs(spec, args.n, "val")
        report["accuracy"] = tasknet.evaluate(
            net, val, system=lens, field_angles=fields,
            rays_per_field=args.rays, seed=args.seed,
            kernel_crop=args.crop, pitch_scale=args.pitch_scale,
            threads=args.threads)
        report["sharp_accuracy"] = tasknet.accuracy(net, val)
    io_analysis.export_report(report, args.out)
    if args.spot:
        results = []
        for angle in fields:
            for wl in (psf.WL_RED, psf.WL_GREEN, psf.WL_BLUE):
                bundle = raytrace.sample_pupil_rays(lens, angle, wl, args.rays,
                                                    args.seed)
                results.append(raytrace.trace_to_sensor(lens, bundle))
        io_analysis.export_spot(results, args.spot)
    if args.psf_prefix:
        pitch = lens.sensor.pixel_pitch * args.pitch_scale
        for fi, angle in enumerate(fields):
            grids = psf.psf_rgb(lens, angle, args.rays, args.seed, pitch=pitch)
            io_analysis.export_psf(grids, "%s_f%d.ppm" % (args.psf_prefix, fi))
    if args.layout:
        io_analysis.export_layout(lens, args.layout,
                                  field_angles=[0.0, fields[-1]])
    if not args.quiet:
        print("report written to %s" % args.out)
    return 0


def cmd_psf(args):
    lens = args._lens
    pitch = lens.sensor.pixel_pitch * args.pitch_scale
    grids = psf.psf_rgb(lens, args.fov, args.rays, args.seed,
                        ks=args.kernel, pitch=pitch)
    io_analysis.export_psf(grids, args.out)
    if not args.quiet:
        print("PSF written to %s (+.csv); totals R/G/B = %.4f/%.4f/%.4f"
              % (args.out, *[g.total() for g in grids]))
    return 0


def cmd_render(args):
    lens = args._lens
    pixels = io_analysis.read_ppm(args.image)
    patch = imaging.ImagePatch.ingest(pixels)
    caps = imaging.simulate_capture_batch(
        lens, [patch], [args.fov], args.rays, args.seed, ks=args.kernel,
        kernel_crop=args.crop, pitch_scale=args.pitch_scale,
        threads=args.threads)
    io_analysis.write_ppm(args.out, np.clip(caps[0].pixels, 0.0, 1.0))
    if not args.quiet:
        print("capture written to %s" % args.out)
    return 0


def cmd_design_imaging(args):
    lens = optimize.init_from_scratch(args.elements, focal_target=args.focal,
                                      stop_radius=args.stop_radius,
                                      seed=args.seed)
    cfg = optimize.DesignConfig(mode="imaging", iterations=args.iters,
                                seed=args.seed, rays_train=args.rays,
                                field_angles=_fields(9, args.half_fov),
                                threads=args.threads)
    log = None if args.quiet else (lambda m: print(m))
    best, history = optimize.design_imaging(lens, cfg, log=log)
    io_analysis.save_lens(best, args.out)
    if args.history:
        history.save_csv(args.history)
    if not args.quiet:
        final = optimize.eval_spot(best, cfg)
        print("designed lens written to %s (eval RMS spot %.2f um)"
              % (args.out, final * 1000))
    return 0


def cmd_train_net(args):
    spec = tasknet.GlyphSpec(seed=args.glyph_seed)
    net = tasknet.train_classifier(spec, epochs=args.epochs, lr=args.lr,
                                   seed=args.seed, n_train=args.n_train,
                                   quiet=args.quiet)
    val = tasknet.generate_glyphs(spec, args.n_val, "val")
    acc = tasknet.accuracy(net, val)
    tasknet.save_network(net, args.out)
    if not args.quiet:
        print("network written to %s (sharp validation accuracy %.4f)"
              % (args.out, acc))
    return 0


def cmd_design_task(args):
    net = args._net
    spec = tasknet.GlyphSpec(seed=args.glyph_seed)
    lens = optimize.init_from_scratch(args.elements, focal_target=args.focal,
                                      stop_radius=args.stop_radius,
                                      seed=args.seed)
    cfg = optimize.DesignConfig(mode="task", iterations=args.iters,
                                seed=args.seed, rays_train=args.rays,
                                batch_size=args.batch,
                                field_angles=_fields(9, args.half_fov),
                                threads=args.threads)
    log = None if args.quiet else (lambda m: print(m))
    lens, history = optimize.design_task(lens, net, spec, cfg, log=log)
    io_analysis.save_lens(lens, args.out)
    if args.history:
        history.save_csv(args.history)
    if not args.quiet:
        print("task-designed lens written to %s" % args.out)
    return 0


def cmd_finetune(args):
    lens = args._lens
    net = args._net
    spec = tasknet.GlyphSpec(seed=args.glyph_seed)
    cfg = optimize.DesignConfig(mode="e2e", iterations=args.iters,
                                seed=args.seed, rays_train=args.rays,
                                batch_size=args.batch,
                                field_angles=_fields(9, args.half_fov),
                                lr_net=args.lr_net, threads=args.threads)
    log = None if args.quiet else (lambda m: print(m))
    lens, net, history = optimize.finetune_e2e(lens, net, spec, cfg,
                                               freeze=args.freeze, log=log)
    io_analysis.save_lens(lens, args.out_lens)
    tasknet.save_network(net, args.out_net)
    if args.history:
        history.save_csv(args.history)
    if not args.quiet:
        print("finetuned lens -> %s, network -> %s"
              % (args.out_lens, args.out_net))
    return 0


def cmd_eval(args):
    lens = args._lens
    net = args._net
    spec = tasknet.GlyphSpec(seed=args.glyph_seed)
    val = tasknet.generate_glyphs(spec, args.n, "val")
    fields = _fields(args.fields)
    acc = tasknet.evaluate(net, val, system=lens, field_angles=fields,
                           rays_per_field=args.rays, seed=args.seed,
                           pitch_scale=args.pitch_scale, threads=args.threads)
    sharp = tasknet.accuracy(net, val)
    report = {"accuracy": acc, "sharp_accuracy": sharp,
              "config": {"n": args.n, "fields": args.fields,
                         "rays": args.rays, "seed": args.seed,
                         "glyph_seed": args.glyph_seed,
                         "pitch_scale": args.pitch_scale}}
    io_analysis.export_report(report, args.out)
    if not args.quiet:
        print("accuracy %.4f (sharp %.4f) -> %s" % (acc, sharp, args.out))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="raylens",
        description="Differentiable geometric-optics lens design toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=0,
                        help="worker threads (0 = auto, 1 = sequential)")
    common.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common],
                       help="spot stats, PSNR, and optional accuracy report")
    p.add_argument("--lens", required=True)
    p.add_argument("--fields", type=int, default=9)
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--out", required=True)
    p.add_argument("--net", default=None)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--glyph-seed", type=int, default=0)
    p.add_argument("--crop", type=int, default=imaging.CAPTURE_KERNEL)
    p.add_argument("--pitch-scale", type=float, default=7.0)
    p.add_argument("--spot", default=None, help="also write a spot CSV")
    p.add_argument("--layout", default=None, help="also write a layout SVG")
    p.add_argument("--psf-prefix", default=None,
                   help="also write per-field PSF PPM/CSV pairs")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("psf", parents=[common], help="export an RGB PSF")
    p.add_argument("--lens", required=True)
    p.add_argument("--fov", type=float, required=True)
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--kernel", type=int, default=psf.DEFAULT_KERNEL)
    p.add_argument("--pitch-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("render", parents=[common],
                       help="simulate a capture of a PPM image")
    p.add_argument("--lens", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--fov", type=float, required=True)
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--kernel", type=int, default=psf.DEFAULT_KERNEL)
    p.add_argument("--crop", type=int, default=imaging.CAPTURE_KERNEL)
    p.add_argument("--pitch-scale", type=float, default=7.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("design-imaging", parents=[common],
                       help="classical spot-size design from scratch")
    p.add_argument("--elements", type=int, default=2)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--rays", type=int, default=256)
    p.add_argument("--focal", type=float, default=2.912)
    p.add_argument("--stop-radius", type=float, default=0.52)
    p.add_argument("--half-fov", type=float, default=HALF_FOV)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_design_imaging)

    p = sub.add_parser("train-net", parents=[common],
                       help="train the glyph classifier on sharp images")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--n-train", type=int, default=12000)
    p.add_argument("--n-val", type=int, default=1000)
    p.add_argument("--glyph-seed", type=int, default=0)
    p.set_defaults(func=cmd_train_net)

    p = sub.add_parser("design-task", parents=[common],
                       help="classifier-supervised design from scratch")
    p.add_argument("--elements", type=int, default=2)
    p.add_argument("--net", required=True)
    p.add_argument("--iters", type=int, default=600)
    p.add_argument("--rays", type=int, default=256)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--focal", type=float, default=2.912)
    p.add_argument("--stop-radius", type=float, default=0.52)
    p.add_argument("--half-fov", type=float, default=HALF_FOV)
    p.add_argument("--glyph-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_design_task)

    p = sub.add_parser("finetune", parents=[common],
                       help="joint or partially-frozen co-optimization")
    p.add_argument("--lens", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--freeze", choices=("lens", "net", "none"), default="none")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--rays", type=int, default=256)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--half-fov", type=float, default=HALF_FOV)
    p.add_argument("--lr-net", type=float, default=1e-5)
    p.add_argument("--glyph-seed", type=int, default=0)
    p.add_argument("--out-lens", required=True)
    p.add_argument("--out-net", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common],
                       help="accuracy on simulated captures at all fields")
    p.add_argument("--lens", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--fields", type=int, default=9)
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--glyph-seed", type=int, default=0)
    p.add_argument("--pitch-scale", type=float, default=7.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads == 0:
        args.threads = min(4, os.cpu_count() or 1)
    # resolve input files up front: missing inputs are usage errors
    if getattr(args, "lens", None):
        args._lens = _load_lens(parser, args.lens)
    if getattr(args, "net", None):
        args._net = _load_net(parser, args.net)
    if getattr(args, "image", None):
        _need_file(parser, args.image, "image")
    _print_config(args)
    try:
        return args.func(args)
    except (RaylensError, ValueError, OSError) as e:
        print("raylens: error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
