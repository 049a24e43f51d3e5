"""Patch-based viewpoint classification with test-time pose-prior calibration."""

__version__ = "0.1.0"

from .core import (N_PATCHES, N_VIEWS, PATCH_DIM, InvalidArgument, InvalidInput, InvalidShape,
                   NoEstimate, PosecalError, derive_seed, uniform_prior)
from .calibration import (AlphaSweepResult, CalibrationConfig, CurvePattern, calibrate_iterate,
                          calibrate_with_prior, classify_curve, estimate_alpha, estimate_prior,
                          smooth_prior, sweep_alpha)
from .evaluation import EvalReport, evaluate, global_predict, global_train, patch_importance
from .features import compute_hog, featurize, extract_patches
from .forest import ForestConfig, load_forests, predict_bank, save_forests, train_forest, \
    train_patch_bank
from .fusion import fuse, predict_pose
from .synthgen import RenderOptions, ShapeParams, generate_dataset, load_manifest, render, sample_shape
