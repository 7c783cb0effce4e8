"""Small input-checking helpers shared across the package."""
from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when user-supplied data or configuration is malformed."""


class EstimationError(RuntimeError):
    """Raised when a fit or resampling procedure fails at run time."""


def as_float_matrix(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{name} contains a non-finite entry at row {bad[0]}, column {bad[1]}")
    return arr


def as_float_vector(x, name="x"):
    arr = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        idx = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise ValidationError(f"{name} contains a non-finite entry at index {idx}")
    return arr


def as_int_vector(x, name="x"):
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        rounded = np.rint(arr)
        if not np.allclose(arr, rounded, atol=0, rtol=0):
            raise ValidationError(f"{name} must be integer-valued")
        arr = rounded
    return arr.astype(np.int64).ravel()


def check_same_length(name_a, a, name_b, b):
    if len(a) != len(b):
        raise ValidationError(f"{name_a} has length {len(a)} but {name_b} has length {len(b)}")


def check_binary(y, name="y"):
    y = as_int_vector(y, name)
    bad = np.setdiff1d(np.unique(y), [0, 1])
    if bad.size:
        raise ValidationError(f"{name} must be 0/1, found values {bad.tolist()}")
    return y


def check_choice(value, choices, name):
    if value not in choices:
        raise ValidationError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_positive(value, name, strict=True):
    if strict and not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def ensure_seed_tuple(seed):
    """Normalize a seed to a tuple of ints; None draws fresh entropy."""
    if seed is None:
        return (int(np.random.SeedSequence().entropy % (2 ** 63)),)
    if isinstance(seed, (tuple, list)):
        return tuple(_flatten_seed(seed))
    return (int(seed),)


def _flatten_seed(seed):
    out = []
    for s in seed:
        if isinstance(s, (tuple, list)):
            out.extend(_flatten_seed(s))
        else:
            out.append(int(s))
    return out


def rng_from(seed):
    """Build a Generator from an int seed, a (nested) tuple of ints, or pass a Generator through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        return np.random.default_rng(np.random.SeedSequence(_flatten_seed(seed)))
    return np.random.default_rng(seed)
