"""Iterative re-estimation of the test-time pose prior.

Per-patch posteriors from classifiers trained under a uniform prior are
re-weighted by a smoothed estimate of the test prior. The estimate comes from
the mean fused posterior over the test set, and the two steps alternate until
the estimate stops moving. The smoothing strength ``alpha`` is chosen from a
sweep by locating the peak of the summed single-peaked prior-vs-alpha curves.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import InvalidArgument, NoEstimate, check_distribution
from .fusion import normalize_log, patch_log_evidence

DEFAULT_ETA = 0.01
DEGENERATE_MASS = 0.9


class CurvePattern(str, Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"
    UNIMODAL = "unimodal"


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: float
    max_iters: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgument(f"alpha must be > 0, got {self.alpha}")
        if not self.tol > 0 or self.max_iters < 1:
            raise InvalidArgument("tol must be > 0 and max_iters >= 1")


@dataclass
class CalibrationState:
    prior: np.ndarray
    iter: int = 0
    converged: bool = False
    prior_history: list = field(default_factory=list)  # starts with the uniform training prior
    last_change: float = np.inf


@dataclass
class AlphaSweepResult:
    alphas: np.ndarray
    stable_priors: np.ndarray  # (n_alpha, V)
    posteriors: np.ndarray  # (n_alpha, m, V) calibrated fused posteriors
    iterations: np.ndarray
    converged: np.ndarray
    final_change: np.ndarray
    patterns: list = None  # one CurvePattern per view, None when the grid is too short
    unimodal_sum: np.ndarray = None
    alpha_hat: float = None
    alpha_hat_fallback: bool = False


def smooth_prior(prior, alpha):
    """(p + alpha) / (1 + V * alpha): pulls a prior towards uniform."""
    if not alpha > 0:
        raise InvalidArgument(f"alpha must be > 0, got {alpha}")
    p = np.asarray(prior, dtype=np.float64)
    return (p + alpha) / (1.0 + p.shape[-1] * alpha)


def estimate_prior(posteriors):
    """Mean of image-level posteriors, shape (m, V) -> (V,)."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if posteriors.ndim != 2 or len(posteriors) == 0:
        raise InvalidArgument("need a non-empty (m, V) array of posteriors")
    return posteriors.mean(axis=0)


def _iterate(log_evidence, n_patches, cfg):
    v = log_evidence.shape[1]
    prior = np.full(v, 1.0 / v)
    state = CalibrationState(prior, prior_history=[prior])
    log_smoothed = np.log(smooth_prior(prior, cfg.alpha))
    for it in range(1, cfg.max_iters + 1):
        # every patch posterior is scaled by the smoothed prior before the product
        fused = normalize_log(log_evidence + n_patches * log_smoothed)
        new_prior = fused.mean(axis=0)
        state.last_change = float(np.max(np.abs(new_prior - prior)))
        prior = new_prior
        state.prior_history.append(prior)
        state.iter = it
        if state.last_change < cfg.tol:
            state.converged = True
            break
        log_smoothed = np.log(smooth_prior(prior, cfg.alpha))
    state.prior = prior
    return fused, state


def calibrate_iterate(patch_posteriors, cfg):
    """Run the prior re-estimation loop on (m, patches, V) patch posteriors.

    Returns the calibrated fused posteriors (m, V) from the last iteration and
    the loop state. The original patch posteriors are re-weighted on every
    pass; earlier re-weightings are never compounded.
    """
    q = np.asarray(patch_posteriors, dtype=np.float64)
    if q.ndim != 3:
        raise InvalidArgument(f"expected (m, patches, V) posteriors, got shape {q.shape}")
    return _iterate(patch_log_evidence(q), q.shape[1], cfg)


def calibrate_with_prior(patch_posteriors, true_prior):
    """One-shot correction: multiply every patch posterior by ``true_prior`` and fuse."""
    prior = check_distribution(true_prior)
    if np.any(prior <= 0):
        raise InvalidArgument("true prior must be strictly positive")
    q = np.asarray(patch_posteriors, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    return normalize_log(patch_log_evidence(q) + q.shape[1] * np.log(prior))


def _max_drop(s):
    """Largest fall below a running maximum."""
    return float(np.max(np.maximum.accumulate(s) - s)) if len(s) else 0.0


def _max_rise(s):
    return float(np.max(s - np.minimum.accumulate(s))) if len(s) else 0.0


def classify_curve(values, eta=DEFAULT_ETA):
    """Label a stable-prior-vs-alpha curve as increasing, decreasing or unimodal.

    The curve is first smoothed with a 3-point moving average (endpoints kept).
    Monotone labels tolerate reversals of up to ``eta``. Curves that fit none
    of the three shapes get the label whose total violation is smallest.
    """
    s = np.asarray(values, dtype=np.float64)
    if s.ndim != 1 or len(s) < 3:
        raise InvalidArgument("curve classification needs at least 3 grid points")
    s = s.copy()
    s[1:-1] = (s[:-2] + s[1:-1] + s[2:]) / 3.0
    diff = np.diff(s)
    up = np.maximum(diff, 0.0)
    down = np.maximum(-diff, 0.0)

    inc_ok = _max_drop(s) <= eta
    dec_ok = _max_rise(s) <= eta
    if inc_ok and dec_ok:
        return CurvePattern.INCREASING if down.sum() <= up.sum() else CurvePattern.DECREASING
    if inc_ok:
        return CurvePattern.INCREASING
    if dec_ok:
        return CurvePattern.DECREASING

    k = int(np.argmax(s))
    if 0 < k < len(s) - 1 and _max_drop(s[:k + 1]) <= eta and _max_rise(s[k:]) <= eta:
        return CurvePattern.UNIMODAL
    violations = {
        CurvePattern.INCREASING: down.sum(),
        CurvePattern.DECREASING: up.sum(),
        CurvePattern.UNIMODAL: down[:k].sum() + up[k:].sum() if 0 < k < len(s) - 1 else np.inf,
    }
    return min(violations, key=lambda p: (violations[p], list(CurvePattern).index(p)))


def estimate_alpha(sweep, degenerate=DEGENERATE_MASS):
    """Grid alpha maximizing the summed stable prior of the unimodal views.

    Grid points whose stable prior has collapsed onto one view (largest
    entry above ``degenerate``) are not eligible; a collapse produces a
    spurious peak in the curve of whichever view absorbed the mass.
    """
    if sweep.patterns is None or len(sweep.alphas) < 3:
        raise NoEstimate("alpha estimation needs a sweep over at least 3 grid points")
    uni = [v for v, p in enumerate(sweep.patterns) if p == CurvePattern.UNIMODAL]
    if not uni:
        raise NoEstimate("no view shows a unimodal stable-prior curve")
    total = sweep.stable_priors[:, uni].sum(axis=1)
    eligible = sweep.stable_priors.max(axis=1) <= degenerate
    if not eligible.any():
        raise NoEstimate("every grid point collapsed onto a single view")
    return float(sweep.alphas[int(np.argmax(np.where(eligible, total, -np.inf)))])


def default_alpha_grid(lo=1e-3, hi=1e3, n=25):
    return np.logspace(np.log10(lo), np.log10(hi), n)


def sweep_alpha(patch_posteriors, alphas=None, max_iters=100, tol=1e-6, eta=DEFAULT_ETA,
                fallback_alpha=1.0):
    """Calibrate at every grid alpha and pick ``alpha_hat``.

    When the grid is too short to classify curves, or no view is unimodal,
    ``alpha_hat`` falls back to the grid point nearest ``fallback_alpha`` on
    a log scale and ``alpha_hat_fallback`` is set.
    """
    alphas = default_alpha_grid() if alphas is None else np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or len(alphas) == 0 or np.any(alphas <= 0) or np.any(np.diff(alphas) <= 0):
        raise InvalidArgument("alpha grid must be a non-empty, strictly ascending positive sequence")
    q = np.asarray(patch_posteriors, dtype=np.float64)
    if q.ndim != 3:
        raise InvalidArgument(f"expected (m, patches, V) posteriors, got shape {q.shape}")
    log_evidence = patch_log_evidence(q)

    priors, posts, iters, conv, change = [], [], [], [], []
    for a in alphas:
        fused, state = _iterate(log_evidence, q.shape[1], CalibrationConfig(a, max_iters, tol))
        priors.append(state.prior)
        posts.append(fused)
        iters.append(state.iter)
        conv.append(state.converged)
        change.append(state.last_change)
    result = AlphaSweepResult(alphas, np.array(priors), np.array(posts), np.array(iters),
                              np.array(conv), np.array(change))

    if len(alphas) >= 3:
        result.patterns = [classify_curve(result.stable_priors[:, v], eta)
                           for v in range(result.stable_priors.shape[1])]
        uni = [v for v, p in enumerate(result.patterns) if p == CurvePattern.UNIMODAL]
        result.unimodal_sum = result.stable_priors[:, uni].sum(axis=1)
    try:
        result.alpha_hat = estimate_alpha(result)
    except NoEstimate:
        result.alpha_hat = float(alphas[int(np.argmin(np.abs(np.log(alphas / fallback_alpha))))])
        result.alpha_hat_fallback = True
    return result


def simulate_label_shift(true_prior, n_images, n_patches=1, evidence_scale=1.0, rng=None):
    """Simulated patch posteriors from a uniform-prior classifier under label shift.

    Labels are drawn from ``true_prior``. Each image gets one Gaussian score
    vector with its true class boosted by ``evidence_scale``; its softmax is
    the exact posterior under a uniform prior, shared by all patches. The
    posterior under the true prior is that softmax re-weighted by
    ``true_prior``. Returns (labels 1..V, patch posteriors, true posteriors).
    """
    prior = check_distribution(true_prior)
    rng = np.random.default_rng(0) if rng is None else rng
    v = len(prior)
    labels = rng.choice(v, size=n_images, p=prior)
    mean = np.zeros((n_images, v))
    mean[np.arange(n_images), labels] = evidence_scale
    scores = mean + rng.standard_normal((n_images, v))
    # ratio of Gaussian likelihoods with unit variance: exp(scale * x_v) up to a constant
    log_lik = evidence_scale * scores
    uniform_post = normalize_log(log_lik)
    true_post = normalize_log(log_lik + np.log(prior))
    q = np.repeat(uniform_post[:, None, :], n_patches, axis=1)
    return labels + 1, q, true_post

