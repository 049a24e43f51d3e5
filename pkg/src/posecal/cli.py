"""Command-line entry point: ``posecal <subcommand> ...``.

Stages hand off through files: manifest.csv -> features.bin -> bank.pcf ->
posteriors.csv -> report.json. Each run also writes a ``run.json`` holding
its resolved configuration next to its main output. Exit codes: 0 success,
1 validation failure, 2 usage error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import BenchmarkConfig, run_benchmark, summary_table
from .calibration import CalibrationConfig, calibrate_iterate, default_alpha_grid, sweep_alpha
from .core import N_VIEWS, PosecalError, uniform_prior
from .evaluation import evaluate, global_predict, global_train, write_confusion_csv
from .features import featurize, featurize_files, load_feature_cache, save_feature_cache
from .forest import ForestConfig, is_patch_bank, load_forests, predict_bank, save_forests, \
    train_patch_bank
from .fusion import fuse, predict_pose
from .synthgen import RenderOptions, generate_dataset, load_manifest, read_pgm, read_prior_csv

log = logging.getLogger("posecal")

PROB_COLS = [f"p{v}" for v in range(1, N_VIEWS + 1)]


def _default_seed(fallback):
    env = os.environ.get("POSECAL_SEED")
    if env is None:
        return fallback
    try:
        return int(env)
    except ValueError:
        raise PosecalError(f"POSECAL_SEED must be an integer, got {env!r}") from None


def _write_run_json(path, args):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"version": __version__, "command": args.command, "config": cfg}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_json_for_file(out):
    out = Path(out)
    return out.with_name(out.name + ".run.json")


def _forest_config(args):
    return ForestConfig(n_trees=args.trees, max_depth=args.depth,
                        features_per_split=args.features_per_split,
                        min_samples_leaf=args.min_leaf, bootstrap=not args.no_bootstrap,
                        laplace=args.laplace, seed=args.seed)


def _data_features(data_dir, threads):
    """Manifest and features for a data dir, reading features.bin when it matches."""
    manifest = load_manifest(data_dir)
    cache = Path(data_dir) / "features.bin"
    if cache.exists():
        feats = load_feature_cache(cache)
        if len(feats) == len(manifest.entries):
            return manifest, feats
        log.warning("%s has %d rows for %d images; recomputing", cache, len(feats), len(manifest.entries))
    return manifest, featurize_files(manifest.image_paths(), threads)


def _load_bank(path):
    forests = load_forests(path)
    if not is_patch_bank(forests):
        raise PosecalError(f"{path} is not a 36-forest patch bank")
    return forests


def _write_posteriors(path, manifest, post):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "pred"] + PROB_COLS)
        for (rel, _, _), p in zip(manifest.entries, post):
            w.writerow([rel, int(np.argmax(p)) + 1] + [repr(float(x)) for x in p])


def read_posteriors(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    paths = [r["path"] for r in rows]
    post = np.array([[float(r[c]) for c in PROB_COLS] for r in rows]).reshape(-1, N_VIEWS)
    return paths, post


# subcommands

def cmd_gen_data(args):
    prior = uniform_prior() if args.prior == "uniform" else read_prior_csv(args.prior)
    opts = RenderOptions(args.image_size, args.clutter, args.lighting_jitter, args.seed,
                         args.crop_jitter, args.azimuth_jitter)
    manifest = generate_dataset(args.models, args.views_per_model, prior, opts, args.out,
                                args.model_offset)
    _write_run_json(Path(args.out) / "run.json", args)
    print(f"wrote {len(manifest.entries)} images to {args.out}")
    return 0


def cmd_featurize(args):
    manifest = load_manifest(args.data)
    out = Path(args.out or Path(args.data) / "features.bin")
    feats = featurize_files(manifest.image_paths(), args.threads)
    save_feature_cache(out, feats)
    _write_run_json(_run_json_for_file(out), args)
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} x {feats.shape[2]} features to {out}")
    return 0


def cmd_train(args):
    manifest, feats = _data_features(args.data, args.threads)
    cfg = _forest_config(args)
    if args.global_forest:
        forests = [global_train(feats, manifest.labels, cfg, threads=args.threads)]
    else:
        forests = train_patch_bank(feats, manifest.labels, cfg, threads=args.threads)
    save_forests(args.out, forests)
    _write_run_json(_run_json_for_file(args.out), args)
    print(f"wrote {len(forests)} forest(s) of {cfg.n_trees} trees to {args.out}")
    return 0


def cmd_predict(args):
    forests = load_forests(args.model)
    paths = [Path(p) for p in args.images]
    if args.data:
        paths += load_manifest(args.data).image_paths()
    if not paths:
        raise PosecalError("no images given")
    feats = np.stack([featurize(read_pgm(p)) for p in paths])
    post = fuse(predict_bank(forests, feats)) if is_patch_bank(forests) \
        else global_predict(forests[0], feats)
    for p in post:
        print(int(np.argmax(p)) + 1, " ".join(f"{x:.6g}" for x in p))
    if args.run_json:
        _write_run_json(args.run_json, args)
    return 0


def cmd_calibrate(args):
    bank = _load_bank(args.model)
    manifest, feats = _data_features(args.data, args.threads)
    q = predict_bank(bank, feats)
    if args.alpha == "auto":
        grid = default_alpha_grid(args.grid_lo, args.grid_hi, args.grid_n)
        sweep = sweep_alpha(q, grid, args.max_iters, args.tol, args.eta)
        alpha = sweep.alpha_hat
        note = " (fallback)" if sweep.alpha_hat_fallback else ""
        print(f"alpha_hat {alpha:.6g}{note}")
    else:
        try:
            alpha = float(args.alpha)
        except ValueError:
            raise PosecalError(f"--alpha must be 'auto' or a number, got {args.alpha!r}") from None
    post, state = calibrate_iterate(q, CalibrationConfig(alpha, args.max_iters, args.tol))
    _write_posteriors(args.out, manifest, post)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "v", "prior"])
            for it, prior in enumerate(state.prior_history):
                for v, p in enumerate(prior, start=1):
                    w.writerow([it, v, repr(float(p))])
    _write_run_json(_run_json_for_file(args.out), args)
    status = "converged" if state.converged else "not converged"
    print(f"alpha {alpha:.6g}: {status} after {state.iter} iterations "
          f"(last change {state.last_change:.3g})")
    return 0


def cmd_sweep_alpha(args):
    bank = _load_bank(args.model)
    _, feats = _data_features(args.data, args.threads)
    grid = default_alpha_grid(args.grid_lo, args.grid_hi, args.grid_n)
    sweep = sweep_alpha(predict_bank(bank, feats), grid, args.max_iters, args.tol, args.eta)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "iterations", "converged", "final_change"] + PROB_COLS)
        for i, a in enumerate(sweep.alphas):
            w.writerow([repr(float(a)), int(sweep.iterations[i]), int(sweep.converged[i]),
                        repr(float(sweep.final_change[i]))]
                       + [repr(float(x)) for x in sweep.stable_priors[i]])
    _write_run_json(_run_json_for_file(args.out), args)
    if sweep.patterns:
        print("patterns", " ".join(p.value for p in sweep.patterns))
    note = " (fallback)" if sweep.alpha_hat_fallback else ""
    print(f"alpha_hat {sweep.alpha_hat:.6g}{note}")
    return 0


def cmd_evaluate(args):
    manifest = load_manifest(args.data)
    if args.posteriors:
        paths, post = read_posteriors(args.posteriors)
        if paths != [e[0] for e in manifest.entries]:
            raise PosecalError("posteriors rows do not match the manifest order")
    elif args.model:
        forests = load_forests(args.model)
        _, feats = _data_features(args.data, args.threads)
        post = fuse(predict_bank(forests, feats)) if is_patch_bank(forests) \
            else global_predict(forests[0], feats)
    else:
        raise PosecalError("evaluate needs --posteriors or --model")
    report = evaluate(predict_pose(post), manifest.labels)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.confusion:
        write_confusion_csv(args.confusion, report.confusion)
    _write_run_json(_run_json_for_file(args.out), args)
    print(f"accuracy {report.accuracy:.4f} on {report.n_images} images")
    return 0


def cmd_repro(args):
    cfg = BenchmarkConfig(seed=args.seed, train_models=args.train_models,
                          test_images=args.test_images)
    cfg = replace(cfg, forest=replace(cfg.forest, n_trees=args.trees))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_json(out / "run.json", args)
    report = run_benchmark(out, cfg, threads=args.threads, reuse_data=args.reuse_data)
    print(summary_table(report))
    for c in report["checks"]:
        print(f"criterion {c['id']}: {'PASS' if c['passed'] else 'FAIL'}  {c['name']}  {c['value']}")
    return 0 if report["passed"] else 1


def _add_forest_flags(p):
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--features-per-split", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--laplace", type=float, default=1.0)
    p.add_argument("--no-bootstrap", action="store_true")


def _add_calib_flags(p):
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--grid-lo", type=float, default=1e-3)
    p.add_argument("--grid-hi", type=float, default=1e3)
    p.add_argument("--grid-n", type=int, default=25)
    p.add_argument("--eta", type=float, default=0.01)


def build_parser():
    parser = argparse.ArgumentParser(prog="posecal", description="Patch-based viewpoint classification with pose-prior calibration.")
    parser.add_argument("--version", action="version", version=f"posecal {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    threads = argparse.ArgumentParser(add_help=False)
    threads.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("gen-data", parents=[threads], help="render a labeled synthetic dataset")
    p.add_argument("--models", type=int, required=True)
    p.add_argument("--views-per-model", type=int, default=N_VIEWS)
    p.add_argument("--model-offset", type=int, default=0)
    p.add_argument("--prior", default="uniform", help="'uniform' or a view,prob CSV")
    p.add_argument("--clutter", type=float, default=0.0)
    p.add_argument("--lighting-jitter", type=float, default=0.0)
    p.add_argument("--crop-jitter", type=float, default=0.0)
    p.add_argument("--azimuth-jitter", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=112)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("featurize", parents=[threads], help="write features.bin for a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[threads], help="train the 36-forest patch bank")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--global", dest="global_forest", action="store_true",
                   help="train one forest on the whole-image feature instead")
    p.add_argument("--seed", type=int, default=None)
    _add_forest_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[threads], help="print label and 16 probabilities per image")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("images", nargs="*")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--run-json", type=Path, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", parents=[threads], help="iterative prior calibration")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--alpha", default="auto")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path, default=None)
    _add_calib_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep-alpha", parents=[threads], help="stable priors over an alpha grid")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_calib_flags(p)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("evaluate", parents=[threads], help="accuracy and confusion matrix")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--posteriors", type=Path, default=None)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--confusion", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("repro", parents=[threads], help="fixed-seed benchmark with acceptance checks")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("repro_out"))
    p.add_argument("--train-models", type=int, default=200)
    p.add_argument("--test-images", type=int, default=500)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--reuse-data", action="store_true",
                   help="keep rendered data sets already present under OUT/data")
    p.set_defaults(func=cmd_repro)
    return parser


SEED_DEFAULTS = {"repro": 42}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise PosecalError("--threads must be >= 1")
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed(SEED_DEFAULTS.get(args.command, 0))
        return args.func(args)
    except (PosecalError, OSError) as exc:
        print(f"posecal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
