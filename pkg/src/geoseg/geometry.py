"""Exact Euclidean distance transforms and signed-distance machinery.

The signed distance map of a binary mask assigns every voxel its exact
Euclidean distance (in voxel units) to the object boundary: negative
strictly inside, zero on the boundary, positive strictly outside.  The
boundary is the set of foreground voxels with at least one face-adjacent
background voxel inside the grid.  Masks without such a boundary
(all-foreground or all-background) are degenerate: they receive the
sentinel +-grid-diagonal and a flag instead of an error, so callers can
keep or drop them.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .tensor import Tensor

_SIGN_MODES = ("inside-negative", "literal")


def _as_binary(mask):
    arr = np.asarray(mask)
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise DataError("mask values must be strictly binary (0/1)")
    return arr.astype(bool)


def _edt_squared_from(seeds):
    """Exact squared distance to the nearest seed voxel, per axis scans."""
    g = np.where(seeds, 0.0, kernels.INF_SQ)
    for axis in range(g.ndim):
        moved = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        shape = moved.shape
        rows = kernels.edt_pass(moved.reshape(-1, shape[-1]))
        g = np.moveaxis(rows.reshape(shape), -1, axis)
    return np.ascontiguousarray(g)


def exact_edt_squared(mask):
    """Squared Euclidean distance to the nearest foreground voxel (int64)."""
    fg = _as_binary(mask)
    if not fg.any():
        raise DataError("exact_edt requires at least one foreground voxel")
    # finite winners are exact integers carried in float64
    return np.rint(_edt_squared_from(fg)).astype(np.int64)


def exact_edt(mask):
    """Euclidean distance field to the nearest foreground voxel."""
    return np.sqrt(exact_edt_squared(mask).astype(np.float64))


def boundary_voxels(mask):
    """Foreground voxels with a face-adjacent background voxel in the grid."""
    fg = _as_binary(mask)
    bnd = np.zeros(fg.shape, dtype=bool)
    for axis in range(fg.ndim):
        lo = [slice(None)] * fg.ndim
        hi = [slice(None)] * fg.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        bnd[lo] |= fg[lo] & ~fg[hi]
        bnd[hi] |= fg[hi] & ~fg[lo]
    return bnd


def grid_diagonal(shape):
    """Diagonal length of the voxel grid; the degenerate-map sentinel value."""
    return float(np.sqrt(sum(float(n) * n for n in shape)))


@dataclass
class SignedDistanceMap:
    values: np.ndarray
    normalized: bool
    degenerate: bool


def signed_distance_map(mask):
    """Signed Euclidean distance to the mask boundary (voxel units).

    Degenerate masks (no boundary) get +-grid-diagonal everywhere with the
    flag set; the sign still follows the inside-negative convention.
    """
    fg = _as_binary(mask)
    bnd = boundary_voxels(fg)
    if not bnd.any():
        diag = grid_diagonal(fg.shape)
        values = np.where(fg, -diag, diag).astype(np.float64)
        return SignedDistanceMap(values, normalized=False, degenerate=True)
    d = np.sqrt(np.rint(_edt_squared_from(bnd)))
    values = np.where(fg, -d, d)
    values[bnd] = 0.0
    return SignedDistanceMap(values, normalized=False, degenerate=False)


def normalize_sdm(sdm):
    """Scale a signed distance map into [-1, 1]; exact zeros stay zero."""
    if sdm.normalized:
        raise ConfigError("signed distance map is already normalized")
    scale = float(np.abs(sdm.values).max())
    values = sdm.values / scale if scale > 0 else sdm.values.copy()
    return SignedDistanceMap(values, normalized=True, degenerate=sdm.degenerate)


def sdm_target(mask):
    """Normalized signed distance map of a ground-truth mask."""
    return normalize_sdm(signed_distance_map(mask))


def approx_inverse(z, k, sign_mode="inside-negative"):
    """Smooth map from normalized signed distances to foreground probability.

    The default ``inside-negative`` mode computes sigmoid(-k*z) so that
    inside voxels (negative distance) approach probability 1.  ``literal``
    keeps sigmoid(k*z), which maps inside voxels toward 0 and exists for
    strict reproduction of the printed inverse transform.

    Accepts a Tensor (gradients flow through) or a plain array.
    """
    if k <= 0:
        raise ConfigError(f"approx_inverse sharpness k must be positive, got {k}")
    if sign_mode not in _SIGN_MODES:
        raise ConfigError(f"sign_mode must be one of {_SIGN_MODES}, got {sign_mode!r}")
    scale = -float(k) if sign_mode == "inside-negative" else float(k)
    if isinstance(z, Tensor):
        return (z * scale).sigmoid()
    a = np.asarray(z, dtype=np.float64) * scale
    return np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))),
                    np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))


def boundary_weights(sdm_pred, rho):
    """Exponential boundary emphasis exp(-rho * |predicted distance|).

    The result is a constant: no gradient flows through it, so the
    optimizer cannot shrink a weighted loss by inflating the predicted
    distances instead of improving agreement.
    """
    if rho <= 0:
        raise ConfigError(f"boundary weight rho must be positive, got {rho}")
    arr = sdm_pred.data if isinstance(sdm_pred, Tensor) else np.asarray(sdm_pred)
    w = np.exp(-float(rho) * np.abs(arr))
    return Tensor(w) if isinstance(sdm_pred, Tensor) else w
