"""Input validation helpers for array-shaped arguments.

Public entry points accept anything array-like; these helpers coerce to the
canonical dtype/layout and raise package errors instead of letting shape
bugs surface deep inside einsums.
"""

import numpy as np

from .errors import DimensionError, NumericError

# Posterior rows must sum to one within this tolerance.
SIMPLEX_TOL = 1e-9


def check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_spectrogram(values, n_channels=None, name="spectrogram"):
    """Coerce to a complex (n_frames, n_bins, n_channels) tensor."""
    x = np.asarray(values)
    if x.ndim != 3:
        raise DimensionError(
            f"{name} must have shape (frames, bins, channels), got {x.shape}"
        )
    if n_channels is not None and x.shape[2] != n_channels:
        raise DimensionError(
            f"{name} has {x.shape[2]} channels, expected {n_channels}"
        )
    x = x.astype(np.complex128, copy=False)
    check_finite(x, name)
    return x


def _check_simplex(p, axis, name, tol=SIMPLEX_TOL):
    if np.any(p < -tol) or np.any(p > 1.0 + tol):
        raise NumericError(f"{name} entries must lie in [0, 1]")
    sums = p.sum(axis=axis)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise NumericError(f"{name} must sum to 1 along axis {axis}")


def check_masks(masks, shape_tf=None, n_sources=None, name="masks"):
    """Coerce to a (n_frames, n_bins, n_sources) soft-mask tensor."""
    z = np.asarray(masks, dtype=np.float64)
    if z.ndim != 3:
        raise DimensionError(
            f"{name} must have shape (frames, bins, sources), got {z.shape}"
        )
    if shape_tf is not None and z.shape[:2] != tuple(shape_tf):
        raise DimensionError(
            f"{name} frame/bin shape {z.shape[:2]} does not match {tuple(shape_tf)}"
        )
    if n_sources is not None and z.shape[2] != n_sources:
        raise DimensionError(
            f"{name} has {z.shape[2]} sources, expected {n_sources}"
        )
    check_finite(z, name)
    _check_simplex(z, axis=2, name=name)
    return z


def check_doa_posterior(doa, n_directions=None, n_sources=None, name="doa posterior"):
    """Coerce to a (n_sources, n_directions) direction-posterior matrix."""
    w = np.asarray(doa, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(
            f"{name} must have shape (sources, directions), got {w.shape}"
        )
    if n_directions is not None and w.shape[1] != n_directions:
        raise DimensionError(
            f"{name} has {w.shape[1]} directions, expected {n_directions}"
        )
    if n_sources is not None and w.shape[0] != n_sources:
        raise DimensionError(
            f"{name} has {w.shape[0]} sources, expected {n_sources}"
        )
    check_finite(w, name)
    _check_simplex(w, axis=1, name=name)
    return w
