"""Product-of-experts fusion of per-patch pose posteriors."""

import numpy as np

from .core import InvalidInput


def patch_log_evidence(q):
    """Sum of log patch posteriors over the patch axis (second to last).

    Raises ``InvalidInput`` on any non-positive entry, which means the
    upstream classifier skipped Laplace smoothing.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.all(q > 0) or not np.all(np.isfinite(q)):
        raise InvalidInput("patch posteriors must be strictly positive and finite")
    return np.log(q).sum(axis=-2)


def normalize_log(logp):
    """exp(logp - logsumexp(logp)) along the last axis.

    Shifting by the row maximum and dividing by the sum keeps the result
    normalized to within a few ulps even when logp is far from zero.
    """
    logp = np.asarray(logp, dtype=np.float64)
    e = np.exp(logp - logp.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fuse(q):
    """Normalized product of patch distributions.

    ``q`` has shape (patches, V) for one image or (m, patches, V) for a batch.
    """
    return normalize_log(patch_log_evidence(q))


def predict_pose(p):
    """1-based argmax; ties go to the lowest view index."""
    p = np.asarray(p)
    return np.argmax(p, axis=-1) + 1
