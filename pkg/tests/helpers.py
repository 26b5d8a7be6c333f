"""Shared test oracles: finite differences, brute-force distance searches.

Everything here is deliberately independent of the library's own
implementations (nested python loops, all-pairs searches, scipy morphology)
so the tests compare two genuinely different routes to the same numbers.
"""

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure


def fd_gradient(loss_fn, array, h=1e-6):
    """Central finite differences of a scalar closure w.r.t. one array."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn()
        flat[i] = keep - h
        down = loss_fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def assert_grads_match(analytic, fd, rel=1e-4, abs_floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    tol = rel * np.maximum(np.abs(analytic), np.abs(fd)) + abs_floor
    bad = np.abs(analytic - fd) > tol
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} gradient entries off; worst "
        f"analytic={analytic[bad].flat[0]} fd={fd[bad].flat[0]}")


def conv_oracle(x, k, stride, pad):
    """Direct nested-loop cross-correlation (any spatial rank)."""
    rank = x.ndim - 2
    stride = (stride,) * rank if isinstance(stride, int) else tuple(stride)
    pad = (pad,) * rank if isinstance(pad, int) else tuple(pad)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    n, ci = x.shape[:2]
    co = k.shape[0]
    kext = k.shape[2:]
    out_sp = tuple((xp.shape[2 + a] - kext[a]) // stride[a] + 1
                   for a in range(rank))
    out = np.zeros((n, co) + out_sp)
    for b in range(n):
        for o in range(co):
            for site in np.ndindex(*out_sp):
                acc = 0.0
                for c in range(ci):
                    for tap in np.ndindex(*kext):
                        src = tuple(stride[a] * site[a] + tap[a]
                                    for a in range(rank))
                        acc += xp[(b, c) + src] * k[(o, c) + tap]
                out[(b, o) + site] = acc
    return out


def brute_force_edt_sq(mask):
    """All-pairs nearest-foreground squared distances, exact int64."""
    mask = np.asarray(mask).astype(bool)
    coords = np.indices(mask.shape).reshape(mask.ndim, -1).T.astype(np.int64)
    fg = np.argwhere(mask).astype(np.int64)
    best = np.full(coords.shape[0], np.iinfo(np.int64).max, dtype=np.int64)
    for start in range(0, fg.shape[0], 512):
        chunk = fg[start:start + 512]
        d = ((coords[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
        best = np.minimum(best, d.min(axis=1))
    return best.reshape(mask.shape)


def face_structure(ndim):
    return generate_binary_structure(ndim, 1)


def oracle_boundary(mask):
    """Foreground voxels with a face-adjacent background voxel, via erosion.

    border_value=1 so the grid edge never counts as background.
    """
    mask = np.asarray(mask).astype(bool)
    eroded = binary_erosion(mask, structure=face_structure(mask.ndim),
                            border_value=1)
    return mask & ~eroded


def brute_force_signed_distance(mask):
    mask = np.asarray(mask).astype(bool)
    bnd = oracle_boundary(mask)
    assert bnd.any(), "oracle needs a non-degenerate mask"
    d = np.sqrt(brute_force_edt_sq(bnd).astype(np.float64))
    signed = np.where(mask, -d, d)
    signed[bnd] = 0.0
    return signed


def brute_force_surface_distances(a, b, percentile=95.0):
    sa = np.argwhere(oracle_boundary(a)).astype(np.float64)
    sb = np.argwhere(oracle_boundary(b)).astype(np.float64)
    assert len(sa) and len(sb)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(pooled.mean()), float(np.percentile(pooled, percentile))


def random_mask(rng, shape, p=None):
    """Random Bernoulli mask with at least one foreground voxel."""
    p = rng.uniform(0.15, 0.7) if p is None else p
    mask = rng.random(shape) < p
    if not mask.any():
        mask.flat[int(rng.integers(mask.size))] = True
    return mask


def random_blob_mask(rng, shape):
    """Connected-ish random ellipsoidal blob, non-degenerate by construction."""
    coords = np.indices(shape).astype(np.float64)
    center = np.array([rng.uniform(0.3, 0.7) * n for n in shape])
    radii = np.array([rng.uniform(0.15, 0.35) * n for n in shape])
    q = sum(((coords[i] - center[i]) / radii[i]) ** 2 for i in range(len(shape)))
    mask = q <= 1.0
    if not mask.any() or mask.all():
        return random_mask(rng, shape, p=0.4)
    return mask
