"""End-to-end pipeline at toy scale, through the library API.

Renders a small training set under a uniform prior and a shifted test set,
grows a patch bank, fuses patch posteriors and calibrates the test prior.
Runs in about a minute on one core.

    python demos/small_pipeline.py [workdir]
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from posecal.benchmark import front_heavy_prior
from posecal.calibration import calibrate_with_prior, sweep_alpha
from posecal.core import uniform_prior
from posecal.evaluation import evaluate
from posecal.features import featurize_files
from posecal.forest import ForestConfig, predict_bank, train_patch_bank
from posecal.fusion import fuse, predict_pose
from posecal.synthgen import RenderOptions, generate_dataset


def main(root):
    root = Path(root)
    opts = RenderOptions(lighting_jitter=0.3, crop_jitter=1.0)
    train = generate_dataset(30, 16, uniform_prior(), replace(opts, rng_seed=1), root / "train")
    prior = front_heavy_prior(1.0)
    test = generate_dataset(200, 1, prior, replace(opts, rng_seed=2), root / "test")
    print(f"{len(train.labels)} training images, {len(test.labels)} test images")

    bank = train_patch_bank(featurize_files(train.image_paths()), train.labels,
                            ForestConfig(n_trees=20, seed=3))
    q = predict_bank(bank, featurize_files(test.image_paths()))

    rep = evaluate(predict_pose(fuse(q)), test.labels)
    print(f"RF      accuracy {rep.accuracy:.3f}, quarter-turn errors {rep.quarter_turn_mass:.3f}")
    sweep = sweep_alpha(q)
    k = list(sweep.alphas).index(sweep.alpha_hat)
    acc = evaluate(predict_pose(sweep.posteriors[k]), test.labels).accuracy
    print(f"RF_opt  accuracy {acc:.3f} at alpha {sweep.alpha_hat:.3g}"
          + (" (fallback)" if sweep.alpha_hat_fallback else ""))
    gt = evaluate(predict_pose(calibrate_with_prior(q, prior)), test.labels).accuracy
    print(f"RF_GT   accuracy {gt:.3f}")
    np.set_printoptions(precision=3, suppress=True, linewidth=120)
    print("confusion (rows truth):\n", rep.confusion)


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as d:
            main(d)
