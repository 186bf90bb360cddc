"""Command-line interface: ``ebmkit <command> [--key value ...]``.

Commands: ``train``, ``reconstruct``, ``baseline-tv``, ``verify`` and
``export-potentials``.  Every command takes ``--config file.ini`` with flat
``key = value`` lines (keys are flag names with dashes or underscores);
flags given on the command line win.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser"]

log = logging.getLogger("ebmkit")


class UsageError(Exception):
    """Bad input detected after argument parsing; reported with exit code 2."""


def _positive_float(s):
    v = float(s)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s!r}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s!r}")
    return v


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s!r}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s!r}")
    return v


def _shape(s):
    try:
        h, w = (int(t) for t in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {s!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"expected HxW, got {s!r}")
    return h, w


def _default_threads():
    env = os.environ.get("EBMKIT_THREADS")
    return env if env else "1"


def _common(p):
    p.add_argument("--config", help="INI-style file of key = value defaults")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--threads", type=_positive_int, default=_default_threads(),
                   help="thread count (default $EBMKIT_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _problem_args(p):
    p.add_argument("--image", help="clean PGM image; data are synthesized from it")
    p.add_argument("--measurement", help="measurement CSV (index,value[,imag]) instead of --image")
    p.add_argument("--shape", type=_shape, help="image shape HxW, needed with --measurement")
    p.add_argument("--op", choices=["identity", "fourier", "radon"], default="identity")
    p.add_argument("--noise-var", type=_positive_float,
                   help="noise variance (default 0.01 for identity, 30 dB SNR otherwise)")
    p.add_argument("--noiseless", action="store_true", help="synthesize data without noise")
    p.add_argument("--mask-seed", type=_nonneg_int, default=0, help="seed of the Fourier sampling mask")
    p.add_argument("--out-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebmkit", description="Fields-of-Experts priors for inverse imaging.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a prior by score matching or bilevel learning")
    _common(p)
    p.add_argument("--method", choices=["sm", "bilevel"], default="sm")
    p.add_argument("--data", required=True, help="directory of training PGM images")
    p.add_argument("--out", default="model.json")
    p.add_argument("--trace", help="loss trace CSV (default: <out stem>_loss.csv)")
    p.add_argument("--init", help="start from this model file instead of the default initialization")
    p.add_argument("--steps", type=_nonneg_int, default=1000)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--patch-size", type=_positive_int, default=96)
    p.add_argument("--filters", type=_positive_int, default=24)
    p.add_argument("--components", type=_positive_int, default=123)
    p.add_argument("--noise-sigma", type=_positive_float, default=2e-2, help="score-matching noise level")
    p.add_argument("--noise-var", type=_positive_float, default=0.01, help="bilevel lower-level noise variance")
    p.add_argument("--lambda0", type=_positive_float, default=1 / 25, help="initial bilevel lambda")
    p.add_argument("--lr-weights", type=_positive_float, default=1e-5)
    p.add_argument("--lr-betas", type=_positive_float, help="default 2e-4 (sm) or 5e-4 (bilevel)")
    p.add_argument("--lr-lambda", type=_positive_float, default=1e-4)
    p.add_argument("--apgd-rtol", type=_positive_float, default=1e-10)
    p.add_argument("--cg-iters", type=_positive_int, default=200)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="MAP or MMSE reconstruction with a trained prior")
    _common(p)
    _problem_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=["map", "mmse"], default="map")
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, help="prior weight (default: model's, else 1)")
    p.add_argument("--T", dest="temperature", type=_positive_float,
                   help="temperature (default 0.1 identity, 0.05 fourier/radon)")
    p.add_argument("--samples", type=_positive_int, default=20000)
    p.add_argument("--burn-in", type=_nonneg_int, default=2000)
    p.add_argument("--tau", type=_positive_float, help="ULA step (default from a curvature bound)")
    p.add_argument("--dump-samples", action="store_true",
                   help="MMSE only: also write samples.bin and samples_summary.csv")
    p.add_argument("--thin", type=_positive_int, default=10, help="keep every n-th sample in the dump")
    p.add_argument("--anchor-weight", type=_nonneg_float, default=0.0,
                   help="weight pinning the image mean to the data-consistent value")
    p.add_argument("--max-iters", type=_positive_int, default=2000)
    p.add_argument("--rtol", type=_positive_float, default=1e-7)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("baseline-tv", help="smoothed anisotropic TV reconstruction")
    _common(p)
    _problem_args(p)
    p.add_argument("--tv-weight", type=_nonneg_float, default=8.0)
    p.add_argument("--eps", type=_positive_float, default=1e-3)
    p.add_argument("--max-iters", type=_positive_int, default=3000)
    p.add_argument("--rtol", type=_positive_float, default=1e-6)
    p.set_defaults(func=cmd_baseline_tv)

    p = sub.add_parser("verify", help="run the finite-state oracle suite")
    _common(p)
    p.add_argument("--cases", help="comma-separated subset of cases (default: all)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-potentials", help="write potentials as CSV and filters as PGM")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--points", type=_positive_int, default=501)
    p.set_defaults(func=cmd_export_potentials)
    return parser


def _apply_config(parser, sub_parser, argv):
    """Re-parse with defaults taken from ``--config`` when one is given."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    if not os.path.isfile(args.config):
        parser.error(f"config file not found: {args.config}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    with open(args.config, encoding="utf-8") as fh:
        cp.read_string("[_]\n" + fh.read())
    dests = {a.dest: a for a in sub_parser._actions}
    overrides = {}
    for key, raw in cp["_"].items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lam"
        if dest not in dests or dest in ("help", "config"):
            parser.error(f"unknown config key: {key}")
        action = dests[dest]
        if isinstance(action, argparse._StoreTrueAction):
            overrides[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
            continue
        try:
            overrides[dest] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            parser.error(f"bad config value for {key}: {exc}")
        if action.choices is not None and overrides[dest] not in action.choices:
            parser.error(f"bad config value for {key}: {raw!r}")
    sub_parser.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, parser._subparsers._group_actions[0].choices[args.command], argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from .foe import load_model, save_model
    from .imageio import load_image_dir
    from .training import BilevelConfig, DsmConfig, train_bilevel, train_dsm

    if not os.path.isdir(args.data):
        raise UsageError(f"dataset directory not found: {args.data}")
    images = load_image_dir(args.data)
    if not images:
        raise UsageError(f"no PGM images in {args.data}")
    init = None
    if args.init:
        if not os.path.isfile(args.init):
            raise UsageError(f"model file not found: {args.init}")
        init = load_model(args.init)
    trace = args.trace or str(Path(args.out).with_name(Path(args.out).stem + "_loss.csv"))
    if args.method == "sm":
        cfg = DsmConfig(noise_sigma=args.noise_sigma, batch_size=args.batch_size or 16, n_steps=args.steps,
                        lr_weights=args.lr_weights, lr_betas=args.lr_betas or 2e-4, patch_size=args.patch_size,
                        seed=args.seed, n_filters=args.filters, n_components=args.components)
        print(f"score matching: noise sigma {cfg.noise_sigma:g}, lr weights {cfg.lr_weights:g}, "
              f"lr betas {cfg.lr_betas:g}, {cfg.n_steps} steps")
        model = train_dsm(images, cfg, model=init, trace_path=trace)
    else:
        cfg = BilevelConfig(lower_noise_var=args.noise_var, batch_size=args.batch_size or 4, n_steps=args.steps,
                            lr_weights=args.lr_weights, lr_betas=args.lr_betas or 5e-4, lr_lambda=args.lr_lambda,
                            lambda_init=args.lambda0, apgd_rtol=args.apgd_rtol, cg_iters=args.cg_iters,
                            patch_size=args.patch_size, seed=args.seed, n_filters=args.filters,
                            n_components=args.components)
        if init is None:
            from .training import init_model
            from .tensors import make_rng
            init = init_model("bilevel", make_rng(np.random.SeedSequence(args.seed).spawn(3)[0]),
                              cfg.n_filters, cfg.n_components)
            init.lam = cfg.lambda_init
        print(f"bilevel: lambda0 {cfg.lambda_init:g}, lower noise var {cfg.lower_noise_var:g}, "
              f"lr weights {cfg.lr_weights:g}, lr betas {cfg.lr_betas:g}, lr lambda {cfg.lr_lambda:g}, "
              f"{cfg.n_steps} steps")
        model = train_bilevel(images, cfg, model=init, trace_path=trace)
    save_model(model, args.out)
    print(f"wrote {args.out} and {trace}")
    return 0


# ---------------------------------------------------------- reconstruct

def _load_problem(args):
    """Return ``(op, y, x_clean or None, noise_var)`` from the problem flags."""
    from .imageio import read_pgm
    from .inverse import read_measurement, synthesize_data
    from .recon import make_operator, matched_noise_var
    from .tensors import make_rng

    if bool(args.image) == bool(args.measurement):
        raise UsageError("give exactly one of --image and --measurement")
    rng = make_rng(args.seed)
    if args.image:
        if not os.path.isfile(args.image):
            raise UsageError(f"image not found: {args.image}")
        x = read_pgm(args.image)
        if args.shape is not None and tuple(args.shape) != x.shape:
            raise UsageError(f"--shape {args.shape} does not match image {x.shape}")
        op = make_operator(args.op, x.shape, make_rng(args.mask_seed))
        nv = args.noise_var or matched_noise_var(args.op, op, [x])
        y = op.apply(x) if args.noiseless else synthesize_data(op, x, nv, rng)
        return op, y, x, nv
    if args.shape is None:
        raise UsageError("--shape is required with --measurement")
    if not os.path.isfile(args.measurement):
        raise UsageError(f"measurement not found: {args.measurement}")
    op = make_operator(args.op, args.shape, make_rng(args.mask_seed))
    y = read_measurement(args.measurement)
    if y.shape != (op.out_dim,) or np.iscomplexobj(y) != op.complex_valued:
        raise UsageError(f"measurement of {y.size} {'complex' if np.iscomplexobj(y) else 'real'} values "
                         f"does not fit the {args.op} operator on {args.shape} ({op.out_dim} values)")
    if args.noise_var is None and args.op != "identity":
        raise UsageError("--noise-var is required with a measurement file")
    return op, y, None, args.noise_var or 0.01


def _write_outputs(out_dir, images: dict, metrics: list):
    from .imageio import write_csv, write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (img, normalize) in images.items():
        write_pgm(out / name, img, maxval=65535, normalize=normalize)
    write_csv(out / "metrics.csv", ["metric", "value"], metrics)


def _quality(metrics, x_hat, x_clean, op, y):
    from .baselines import backprojection
    from .tensors import psnr

    if x_clean is not None:
        metrics.append(("psnr", psnr(x_hat, x_clean)))
        metrics.append(("psnr_backprojection", psnr(backprojection(op, y), x_clean)))
        print(f"psnr: {metrics[-2][1]:.4f} dB (backprojection {metrics[-1][1]:.4f} dB)")


def cmd_reconstruct(args) -> int:
    from .baselines import backprojection
    from .foe import load_model
    from .imageio import write_csv, write_samples
    from .inverse import PosteriorSpec
    from .optimize import ApgdConfig
    from .recon import DEFAULT_TEMPERATURE, map_estimate, mmse_estimate

    if not os.path.isfile(args.model):
        raise UsageError(f"model file not found: {args.model}")
    model = load_model(args.model)
    op, y, x_clean, nv = _load_problem(args)
    lam = args.lam if args.lam is not None else (model.lam if model.lam is not None else 1.0)
    T = args.temperature or DEFAULT_TEMPERATURE[args.op]
    x0 = backprojection(op, y) if args.op != "radon" else np.zeros(op.shape)
    anchor = None
    if args.anchor_weight > 0:
        anchor = (float(np.mean(x0)) if args.op != "radon" else 0.5, args.anchor_weight)
    metrics = [("mode", args.mode), ("op", args.op), ("lambda", float(lam)), ("noise_var", float(nv))]
    if args.mode == "map":
        spec = PosteriorSpec(op, nv, lam=lam, temperature=1.0, anchor=anchor)
        cfg = ApgdConfig(max_iters=args.max_iters, lipschitz0=1.0 / nv, rtol=args.rtol)
        res = map_estimate(spec, model, y, x0, cfg)
        metrics.append(("iters", res.iters))
        _quality(metrics, res.x, x_clean, op, y)
        _write_outputs(args.out_dir, {"recon.pgm": (res.x, False)}, metrics)
    else:
        spec = PosteriorSpec(op, nv, lam=lam, temperature=T, anchor=anchor)
        print(f"mmse: T {T:g}, {args.samples} samples after {args.burn_in} burn-in")
        kept = []

        def keep(k, x):
            if (k - args.burn_in) % args.thin == 0:
                kept.append(x.ravel().copy())

        res = mmse_estimate(spec, model, y, x0, args.samples, args.burn_in, args.tau, args.seed,
                            callback=keep if args.dump_samples else None)
        metrics += [("T", T), ("tau", res.tau), ("samples", res.n_samples)]
        _quality(metrics, res.mean, x_clean, op, y)
        _write_outputs(args.out_dir, {"recon.pgm": (res.mean, False), "mean.pgm": (res.mean, False),
                                      "std.pgm": (res.std, True)}, metrics)
        if args.dump_samples:
            out = Path(args.out_dir)
            write_samples(out / "samples.bin", np.array(kept).reshape(len(kept), -1))
            write_csv(out / "samples_summary.csv", ["index", "mean", "std"],
                      zip(range(res.mean.size), res.mean.ravel(), res.std.ravel()))
    return 0


def cmd_baseline_tv(args) -> int:
    from .baselines import baseline_tv
    from .optimize import ApgdConfig

    op, y, x_clean, nv = _load_problem(args)
    cfg = ApgdConfig(max_iters=args.max_iters, lipschitz0=1.0 / nv, rtol=args.rtol)
    res = baseline_tv(op, y, nv, args.tv_weight, args.eps, cfg)
    metrics = [("mode", "tv"), ("op", args.op), ("tv_weight", args.tv_weight), ("noise_var", float(nv)),
               ("iters", res.iters)]
    _quality(metrics, res.x, x_clean, op, y)
    _write_outputs(args.out_dir, {"recon.pgm": (res.x, False)}, metrics)
    return 0


# --------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    from .verify import SUITE_CASES, run_suite

    cases = [c.strip() for c in args.cases.split(",") if c.strip()] if args.cases else None
    if cases:
        unknown = [c for c in cases if c not in SUITE_CASES]
        if unknown:
            raise UsageError(f"unknown cases: {', '.join(unknown)} (known: {', '.join(SUITE_CASES)})")
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    results = run_suite(cases, seed=args.seed, out_dir=args.out_dir)
    for name, ok, details in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {details}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} cases passed")
    return 1 if failed else 0


# ------------------------------------------------------------ export

def cmd_export_potentials(args) -> int:
    from .foe import load_model, potential_eval
    from .imageio import write_csv, write_pgm

    if not os.path.isfile(args.model):
        raise UsageError(f"model file not found: {args.model}")
    model = load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = np.linspace(-model.nu, model.nu, args.points)
    for j, (pot, k) in enumerate(zip(model.potentials, model.filters())):
        phi, _, _ = potential_eval(pot, t)
        write_csv(out / f"potentials_{j}.csv", ["x", "f"], zip(t, phi))
        write_pgm(out / f"kernel_{j}.pgm", k, normalize=True)
    print(f"wrote {model.n_filters} potentials and kernels to {out}")
    return 0
