"""Shared constants, error types and seed derivation."""

import numpy as np

N_VIEWS = 16
GRID_N = 6
N_PATCHES = GRID_N * GRID_N
PATCH_DIM = 576


class PosecalError(ValueError):
    """Base class for input validation failures."""


class InvalidArgument(PosecalError):
    pass


class InvalidInput(PosecalError):
    """Raised when probability inputs violate strict positivity."""


class InvalidShape(PosecalError):
    pass


class NoEstimate(PosecalError):
    """No unimodal prior curve was found during an alpha sweep."""


def derive_seed(*keys):
    """Mix integer keys into one 64-bit seed via numpy's SeedSequence.

    The mapping depends only on the key values, so a stream derived for
    (master, model, view) is the same whatever order images are produced in.
    """
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(*keys):
    """PCG64 generator seeded from ``derive_seed(*keys)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*keys)))


def check_distribution(p, strict=False, atol=1e-9):
    """Validate a length-16 probability vector and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_VIEWS,):
        raise InvalidArgument(f"pose distribution must have {N_VIEWS} entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidArgument("pose distribution entries must be finite and non-negative")
    if strict and np.any(p <= 0):
        raise InvalidInput("pose distribution must be strictly positive")
    if abs(p.sum() - 1.0) > atol:
        raise InvalidArgument(f"pose distribution sums to {p.sum():.12g}, expected 1")
    return p


def uniform_prior():
    return np.full(N_VIEWS, 1.0 / N_VIEWS)
