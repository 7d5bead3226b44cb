"""Command-line surface: curves, gradcheck, analyze, train, taps.

Exit codes: 0 success, 1 flag/validation failure, 2 runtime failure.
A training breakdown is a result, not a failure, and exits 0.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import analysis, harness, scorefn
from .model import AttentionConfig, DemoConfig
from .scorefn import ScoreError, ScoreFunctionKind

KIND_NAMES = list(scorefn._TAGS)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract here is exit 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _kind_from_flags(name, args):
    return ScoreFunctionKind(
        name,
        taylor_order=getattr(args, "taylor_order", 2),
        margin=getattr(args, "margin", 0.0),
        phase=getattr(args, "phase", math.pi / 4))


def _add_kind_params(p):
    p.add_argument("--taylor-order", type=int, default=2,
                   help="Taylor order n for the taylor kinds (default 2)")
    p.add_argument("--margin", type=float, default=0.0,
                   help="soft margin m for the sm kinds (default 0)")
    p.add_argument("--phase", type=float, default=math.pi / 4,
                   help="phase for sin2-max-shifted (default pi/4)")


def cmd_curves(args):
    kind = _kind_from_flags(args.fn, args)
    if not args.x_min < args.x_max:
        print("error: --x-min must be < --x-max", file=sys.stderr)
        return 1
    if args.prenorm:
        curve = analysis_prenorm_curve(kind, args.m, args.x_min, args.x_max,
                                       args.steps, args.dim, args.var)
    else:
        curve = analysis.gradient_curve(kind, args.m, args.x_min, args.x_max,
                                        args.steps)
    if np.all(np.isnan(curve.y_values)):
        print("error: every point hit a guard", file=sys.stderr)
        return 2
    curve.to_csv(args.out)
    print(f"wrote {args.steps} points to {args.out}")
    return 0


def analysis_prenorm_curve(kind, m, x_min, x_max, steps, d, var):
    """Fixed-M gradient of kind(norm(x)) with the whitening held at
    mean 0 and the given variance and row dimension."""
    xs = np.linspace(x_min, x_max, steps)
    sigma = math.sqrt(var)
    zs = xs / sigma
    ys = analysis.diag_gradient_fixed_m(kind, m, zs) * (d - 1) / (d * sigma)
    return analysis.CurveSeries(
        x_values=xs, y_values=ys,
        label=f"prenormalized {kind.tag} diagonal gradient",
        params={"M": m, "d": d, "var": var,
                "nan_points": int(np.isnan(ys).sum())})


def cmd_gradcheck(args):
    if args.dim < 2:
        print("error: --dim must be >= 2", file=sys.stderr)
        return 1
    names = KIND_NAMES if args.fn == "all" else [args.fn]
    rng = np.random.Generator(np.random.Philox(key=args.seed))
    all_pass = True
    for name in names:
        kind = _kind_from_flags(name, args)
        worst = 0.0
        skipped = 0
        for _ in range(args.trials):
            x = rng.normal(0.0, 1.0, size=args.dim)
            try:
                a = scorefn.jacobian(kind, x).entries
                f = scorefn.finite_diff_jacobian(kind, x).entries
            except ScoreError:
                skipped += 1
                continue
            scale = max(np.abs(f).max(), np.abs(a).max(), 1.0)
            worst = max(worst, float(np.abs(a - f).max() / scale))
        ok = worst <= args.tol
        all_pass &= ok
        print(f"{name:20s} max rel err {worst:.3e}  skipped {skipped:3d}  "
              f"{'PASS' if ok else 'FAIL'}")
    return 0 if all_pass else 2


def cmd_analyze(args):
    if args.report == "saturation":
        with open(args.out, "w") as fh:
            fh.write("kind,fraction_saturated,sample_count,skipped_rows\n")
            for kind in scorefn.ALL_KINDS:
                rep = analysis.saturation_fraction(
                    kind, dim=64, trials=1000, input_scale=8.0,
                    epsilon=1e-4, seed=7)
                fh.write(f"{kind.tag},{rep.fraction_saturated!r},"
                         f"{rep.sample_count},{rep.skipped_rows}\n")
    elif args.report == "extremum-vs-m":
        m_values = [0.5, 1.0, 2.0, 5.0, 10.0]
        with open(args.out, "w") as fh:
            fh.write("kind,m,extremum\n")
            for kind in scorefn.ALL_KINDS:
                curve = analysis.extremum_vs_m_curve(kind, m_values)
                for m, y in zip(curve.x_values, curve.y_values):
                    field = "" if math.isnan(y) else repr(float(y))
                    fh.write(f"{kind.tag},{float(m)!r},{field}\n")
    elif args.report == "submersion":
        curve = analysis.submersion_curve([4, 16, 64, 256])
        with open(args.out, "w") as fh:
            fh.write("d,mean_max_abs_dev\n")
            for d, y in zip(curve.x_values, curve.y_values):
                fh.write(f"{int(d)},{float(y)!r}\n")
    else:
        print(f"error: unknown report {args.report!r}", file=sys.stderr)
        return 1
    print(f"wrote {args.report} report to {args.out}")
    return 0


def _parse_dataset(text):
    if text == "synthetic":
        return harness.SyntheticSpec()
    if text.startswith("cifar100:"):
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("expected cifar100:<path>:<subset>")
        return harness.Cifar100Spec(path=parts[1], subset_size=int(parts[2]))
    raise ValueError(f"unknown dataset {text!r}")


def default_demo_config(kind, depth, input_shape, prenorm, scale,
                        num_classes):
    if input_shape == (8, 8, 1):
        embed, heads, patch = 32, 2, 2
    else:
        embed, heads, patch = 64, 4, 4
    attn = AttentionConfig(embed_dim=embed, num_heads=heads, score_kind=kind,
                           score_scale=scale, prenormalize=prenorm)
    return DemoConfig(depth=depth, attention=attn, patch_size=patch,
                      input_shape=input_shape, mlp_ratio=2.0,
                      num_classes=num_classes)


def cmd_train(args):
    kind = _kind_from_flags(args.score, args)
    try:
        dataset = _parse_dataset(args.dataset)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    if isinstance(dataset, harness.Cifar100Spec):
        if not os.path.isfile(dataset.path):
            print(f"error: cannot read dataset at {dataset.path}",
                  file=sys.stderr)
            return 2
        shape = (32, 32, 3)
        classes = 100
    else:
        shape = (8, 8, 1)
        classes = dataset.num_classes
    demo = default_demo_config(kind, args.depth, shape, args.prenorm,
                               args.scale, classes)
    cfg = harness.TrainConfig(demo=demo, dataset=dataset, steps=args.steps,
                              seed=args.seed, tap_every=args.tap_every,
                              tap_cap=args.tap_cap)
    log = harness.train(cfg)
    harness.write_run_log(log, args.out)
    if log.taps:
        harness.write_taps(log.taps, args.out + ".taps.jsonl")
    if log.breakdown is not None:
        print(f"breakdown at step {log.breakdown.step}: "
              f"{log.breakdown.cause} (logged to {args.out})")
    else:
        print(f"final eval accuracy {log.final_eval_accuracy:.4f} "
              f"(logged to {args.out})")
    return 0


def cmd_taps(args):
    if args.bins < 2:
        print("error: --bins must be >= 2", file=sys.stderr)
        return 1
    sidecar = args.run + ".taps.jsonl"
    if not os.path.isfile(sidecar):
        print(f"error: run has no taps ({sidecar} missing)", file=sys.stderr)
        return 1
    taps = harness.read_taps(sidecar)
    if not taps:
        print("error: run has no taps", file=sys.stderr)
        return 1
    histograms = harness.aggregate_taps(taps, args.bins,
                                        (args.x_min, args.x_max))
    harness.write_histograms(histograms, args.out)
    print(f"wrote {len(histograms)} histograms to {args.out}")
    return 0


def build_parser():
    parser = _Parser(prog="periscore",
                     description="Periodic score functions for attention: "
                                 "curves, gradient checks, analysis sweeps, "
                                 "desk-scale training, tap histograms.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curves", parents=[], help="emit a gradient curve CSV")
    p.add_argument("--fn", required=True, choices=KIND_NAMES)
    p.add_argument("--m", type=float, default=1.0, help="fixed off-sum M")
    p.add_argument("--x-min", type=float, required=True)
    p.add_argument("--x-max", type=float, required=True)
    p.add_argument("--steps", type=int, default=1001)
    p.add_argument("--prenorm", action="store_true")
    p.add_argument("--dim", type=int, default=64,
                   help="row dimension for the prenorm curve")
    p.add_argument("--var", type=float, default=1.0,
                   help="input variance for the prenorm curve")
    p.add_argument("--out", required=True)
    _add_kind_params(p)
    p.set_defaults(fn_impl=cmd_curves)

    p = sub.add_parser("gradcheck",
                       help="analytic vs finite-difference Jacobians")
    p.add_argument("--fn", required=True, choices=KIND_NAMES + ["all"])
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--tol", type=float, default=1e-6)
    _add_kind_params(p)
    p.set_defaults(fn_impl=cmd_gradcheck)

    p = sub.add_parser("analyze", help="saturation / extremum / submersion")
    p.add_argument("--report", required=True,
                   choices=["saturation", "extremum-vs-m", "submersion"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn_impl=cmd_analyze)

    p = sub.add_parser("train", help="train the demo, log JSONL")
    p.add_argument("--score", required=True, choices=KIND_NAMES)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or 'cifar100:<path>:<subset>'")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--prenorm", action="store_true")
    p.add_argument("--scale", default="inv_dmodel",
                   choices=["inv_dmodel", "inv_sqrt_dmodel"])
    p.add_argument("--tap-every", type=int, default=0)
    p.add_argument("--tap-cap", type=int, default=100)
    p.add_argument("--out", required=True)
    _add_kind_params(p)
    p.set_defaults(fn_impl=cmd_train)

    p = sub.add_parser("taps", help="bin tapped gradients into a CSV")
    p.add_argument("--run", required=True, help="run JSONL path (expects "
                   "<run>.taps.jsonl sidecar)")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--x-min", type=float, default=-10.0)
    p.add_argument("--x-max", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn_impl=cmd_taps)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.fn_impl(args)
    except (ValueError, ScoreError) as err:
        print(f"error: {err}", file=sys.stderr)
        code = 2
    raise SystemExit(code)


if __name__ == "__main__":
    main()
