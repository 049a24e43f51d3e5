"""Fixed-seed end-to-end benchmark: data, features, forests, calibration, report.

Training uses 200 chair models rendered at all 16 views under a uniform
prior. Three 500-image test sets use held-out models: clean with a uniform
prior, clean with a front-heavy prior, and cluttered with the same
front-heavy prior. Train and clean test images share one rendering
distribution, so the clean-shifted set differs from training only in its
label prior.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibrate_iterate, calibrate_with_prior, CalibrationConfig, \
    default_alpha_grid, sweep_alpha
from .core import N_VIEWS, derive_seed, uniform_prior
from .evaluation import evaluate, global_predict, global_train, patch_importance, \
    write_confusion_csv
from .features import featurize_files, load_feature_cache, save_feature_cache
from .forest import ForestConfig, predict_bank, save_forests, train_patch_bank
from .fusion import fuse, predict_pose
from .synthgen import RenderOptions, generate_dataset, load_manifest

log = logging.getLogger(__name__)

SYSTEMS = ("RF", "RF_opt", "RF_GT", "Global")
TEST_SETS = ("clean_uniform", "clean_shifted", "cluttered_shifted")

# directional thresholds, pinned from the first frozen seed-42 run
MIN_OPT_GAIN = 0.02
MAX_GT_GAP = 0.05
MIN_GLOBAL_GAP = 0.10
NEUTRAL_ALPHA = 1e8
CONVERGENCE_MIN_ALPHA = 0.1


def front_heavy_prior(concentration):
    """Pose prior proportional to exp(concentration * cos(azimuth)); view 1 faces the camera."""
    az = np.arange(N_VIEWS) * 2 * np.pi / N_VIEWS
    p = np.exp(concentration * np.cos(az))
    return p / p.sum()


@dataclass
class BenchmarkConfig:
    seed: int = 42
    train_models: int = 200
    test_images: int = 500
    prior_concentration: float = 1.0
    clutter_level: float = 0.5
    lighting_jitter: float = 0.3
    crop_jitter: float = 1.0
    azimuth_jitter: float = 0.0
    image_size: int = 112
    forest: ForestConfig = field(default_factory=ForestConfig)
    grid_lo: float = 1e-3
    grid_hi: float = 1e3
    grid_n: int = 25
    max_iters: int = 100
    tol: float = 1e-6

    def to_dict(self):
        return asdict(self)

    def render_options(self, set_index, clutter=0.0):
        return RenderOptions(self.image_size, clutter, self.lighting_jitter,
                             derive_seed(self.seed, set_index), self.crop_jitter,
                             self.azimuth_jitter)

    def alpha_grid(self):
        return default_alpha_grid(self.grid_lo, self.grid_hi, self.grid_n)


def _dataset(root, name, build, reuse, threads):
    """Render and featurize ``name`` under ``root``; with ``reuse`` keep a finished copy."""
    d = Path(root) / name
    cache = d / "features.bin"
    if reuse and (d / "manifest.csv").exists() and cache.exists():
        manifest = load_manifest(d)
        return manifest, load_feature_cache(cache)
    manifest = build(d)
    feats = featurize_files(manifest.image_paths(), threads)
    save_feature_cache(cache, feats)
    return manifest, feats


def generate_benchmark_data(root, cfg, reuse=False, threads=1):
    shifted = front_heavy_prior(cfg.prior_concentration)
    specs = {
        "train": lambda d: generate_dataset(cfg.train_models, N_VIEWS, uniform_prior(),
                                            cfg.render_options(1), d),
        "clean_uniform": lambda d: generate_dataset(cfg.test_images, 1, uniform_prior(),
                                                    cfg.render_options(2), d),
        "clean_shifted": lambda d: generate_dataset(cfg.test_images, 1, shifted,
                                                    cfg.render_options(3), d),
        "cluttered_shifted": lambda d: generate_dataset(cfg.test_images, 1, shifted,
                                                        cfg.render_options(4, cfg.clutter_level), d),
    }
    return {name: _dataset(root, name, build, reuse, threads) for name, build in specs.items()}


def _accuracy(posteriors, labels):
    return float(np.mean(predict_pose(posteriors) == labels))


def evaluate_test_set(q, labels, true_prior, global_post, cfg):
    """All four systems plus the alpha sweep on one test set."""
    sweep = sweep_alpha(q, cfg.alpha_grid(), cfg.max_iters, cfg.tol)
    sweep_acc = [_accuracy(p, labels) for p in sweep.posteriors]
    opt = sweep.posteriors[list(sweep.alphas).index(sweep.alpha_hat)]
    posts = {
        "RF": fuse(q),
        "RF_opt": opt,
        "RF_GT": calibrate_with_prior(q, true_prior),
        "Global": global_post,
    }
    reports = {name: evaluate(predict_pose(p), labels) for name, p in posts.items()}
    neutral, _ = calibrate_iterate(q, CalibrationConfig(NEUTRAL_ALPHA, cfg.max_iters, cfg.tol))
    summary = {
        "n_images": int(len(labels)),
        "true_prior": true_prior.tolist(),
        "uncalibrated_prior": posts["RF"].mean(axis=0).tolist(),
        "systems": {k: r.to_dict() for k, r in reports.items()},
        "alpha_hat": sweep.alpha_hat,
        "alpha_hat_fallback": sweep.alpha_hat_fallback,
        "neutral_argmax_agreement": float(np.mean(predict_pose(neutral) == predict_pose(posts["RF"]))),
        "sweep": {
            "alphas": sweep.alphas.tolist(),
            "accuracy": sweep_acc,
            "iterations": sweep.iterations.tolist(),
            "converged": sweep.converged.tolist(),
            "final_change": sweep.final_change.tolist(),
            "patterns": [p.value for p in sweep.patterns] if sweep.patterns else None,
            "unimodal_sum": sweep.unimodal_sum.tolist() if sweep.unimodal_sum is not None else None,
            "stable_priors": sweep.stable_priors.tolist(),
        },
    }
    return summary, reports


def acceptance_checks(sets, cfg):
    """Benchmark-level acceptance checks as a list of dicts with ``passed`` flags."""
    checks = []
    agree = min(s["neutral_argmax_agreement"] for s in sets.values())
    checks.append({"id": 5, "name": "large-alpha neutrality", "value": agree, "passed": agree == 1.0})

    worst = []
    for name, s in sets.items():
        sw = s["sweep"]
        for a, conv, it in zip(sw["alphas"], sw["converged"], sw["iterations"]):
            if a >= CONVERGENCE_MIN_ALPHA:
                worst.append((conv and it <= cfg.max_iters, it, name, a))
    ok = all(w[0] for w in worst)
    checks.append({"id": 6, "name": "convergence for alpha >= 0.1", "passed": ok,
                   "value": max(w[1] for w in worst)})

    cs = sets["clean_shifted"]["systems"]
    rf, opt, gt = cs["RF"]["accuracy"], cs["RF_opt"]["accuracy"], cs["RF_GT"]["accuracy"]
    checks.append({
        "id": 7, "name": "RF_GT >= RF_opt >= RF, gain and gap bounds (clean shifted)",
        "value": {"RF": rf, "RF_opt": opt, "RF_GT": gt},
        "passed": gt >= opt >= rf and opt - rf >= MIN_OPT_GAIN - 1e-12 and gt - opt <= MAX_GT_GAP + 1e-12,
    })

    sw = sets["clean_shifted"]["sweep"]
    acc = np.array(sw["accuracy"])
    best = np.flatnonzero(acc == acc.max())
    k = sw["alphas"].index(sets["clean_shifted"]["alpha_hat"])
    checks.append({"id": 8, "name": "alpha_hat within one grid step of the accuracy maximum",
                   "value": {"alpha_hat": sw["alphas"][k], "best": [sw["alphas"][b] for b in best]},
                   "passed": bool(np.min(np.abs(best - k)) <= 1)})

    cl = sets["cluttered_shifted"]["systems"]
    gap = cl["RF"]["accuracy"] - cl["Global"]["accuracy"]
    checks.append({"id": 9, "name": "patch RF beats Global on cluttered shifted by >= 0.10",
                   "value": gap, "passed": gap >= MIN_GLOBAL_GAP - 1e-12})
    return checks


def run_benchmark(out_dir, cfg=None, threads=1, reuse_data=False):
    """Run everything and write report.json, confusion.csv, bank.pcf and friends to ``out_dir``.

    ``reuse_data`` skips rendering for data sets already present under
    ``out_dir/data``; it is only safe when they came from the same config.
    """
    cfg = cfg or BenchmarkConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = generate_benchmark_data(out / "data", cfg, reuse_data, threads)
    log.info("data ready in %.1fs", time.perf_counter() - t0)

    train_manifest, train_feats = data["train"]
    forest_cfg = replace(cfg.forest, seed=derive_seed(cfg.seed, 10))
    bank = train_patch_bank(train_feats, train_manifest.labels, forest_cfg, threads=threads)
    save_forests(out / "bank.pcf", bank)
    global_cfg = replace(forest_cfg, seed=derive_seed(cfg.seed, 11))
    glob = global_train(train_feats, train_manifest.labels, global_cfg, threads=threads)
    save_forests(out / "global.pcf", [glob])
    log.info("forests trained in %.1fs", time.perf_counter() - t0)

    sets, confusions, importance = {}, {}, {}
    (out / "confusions").mkdir(exist_ok=True)
    for name in TEST_SETS:
        manifest, feats = data[name]
        q = predict_bank(bank, feats)
        summary, reports = evaluate_test_set(q, manifest.labels, manifest.prior_used,
                                             global_predict(glob, feats), cfg)
        sets[name] = summary
        for system, rep in reports.items():
            write_confusion_csv(out / "confusions" / f"{name}_{system}.csv", rep.confusion)
            confusions[(name, system)] = rep.confusion
        # per-set importance map from a global forest fit on that set's own labels
        local_cfg = replace(global_cfg, seed=derive_seed(cfg.seed, 12 + len(importance)))
        local = global_train(feats, manifest.labels, local_cfg, threads=threads)
        importance[name] = patch_importance(local).tolist()
    importance["train"] = patch_importance(glob).tolist()
    write_confusion_csv(out / "confusion.csv", confusions[("clean_shifted", "RF")])

    checks = acceptance_checks(sets, cfg)
    report = {
        "version": __version__,
        "config": cfg.to_dict(),
        "forest_seed": forest_cfg.seed,
        "sets": sets,
        "patch_importance": importance,
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("benchmark finished in %.1fs", time.perf_counter() - t0)
    return report


def summary_table(report):
    """Accuracy table: one row per system, one column per test set (accuracy in percent)."""
    header = f"{'':8s}" + "".join(f"{n:>20s}" for n in TEST_SETS)
    lines = [header]
    for system in SYSTEMS:
        cells = "".join(f"{100 * report['sets'][n]['systems'][system]['accuracy']:20.2f}" for n in TEST_SETS)
        lines.append(f"{system:8s}{cells}")
    alpha = "".join(f"{report['sets'][n]['alpha_hat']:20.4g}" for n in TEST_SETS)
    lines.append(f"{'alpha^':8s}{alpha}")
    return "\n".join(lines)
