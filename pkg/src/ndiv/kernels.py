"""Inner loops that dominate runtime: pairwise distances (and their
vector-Jacobian product), 2D histogram counting and star membership.

Every kernel has a numba implementation and a numpy implementation with the
same arithmetic. Module-level names are bound to one of the two according to
``ndiv._accel.USE_NUMBA``; both remain reachable through ``IMPLEMENTATIONS``
for benchmarking and cross-checking.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# numpy path


def _pairwise_distances_np(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _pairwise_distances_vjp_np(x, dist, grad):
    n = x.shape[0]
    sym = grad + grad.T
    safe = np.where(dist > 0.0, dist, 1.0)
    coeff = np.where(dist > 0.0, sym / safe, 0.0)
    coeff[np.arange(n), np.arange(n)] = 0.0
    # sum_j coeff_ij (x_i - x_j), formed directly: the expanded form
    # rowsum(coeff) * x - coeff @ x cancels catastrophically for tiny distances
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ij,ijk->ik", coeff, diff)


def _bin_index_np(values, lo, hi, bins):
    scaled = (values - lo) / (hi - lo) * bins
    idx = np.floor(scaled).astype(np.int64)
    idx[values == hi] = bins - 1
    return idx


def _histogram2d_np(points, x_lo, x_hi, y_lo, y_hi, bins):
    x = points[:, 0]
    y = points[:, 1]
    keep = (x >= x_lo) & (x <= x_hi) & (y >= y_lo) & (y <= y_hi)
    ix = _bin_index_np(x[keep], x_lo, x_hi, bins)
    iy = _bin_index_np(y[keep], y_lo, y_hi, bins)
    flat = np.bincount(ix * bins + iy, minlength=bins * bins)
    return flat.reshape(bins, bins).astype(np.float64)


def _star_membership_np(points, cx, cy, arms, r_inner, r_outer, rotation):
    dx = points[:, 0] - cx
    dy = points[:, 1] - cy
    theta = np.arctan2(dy, dx)
    radius = np.sqrt(dx * dx + dy * dy)
    local = theta - rotation
    bound = r_inner + (r_outer - r_inner) * (0.5 + 0.5 * np.cos(arms * local))
    inside = radius <= bound
    width = 2.0 * np.pi / arms
    sector = np.floor((local + 0.5 * width) / width).astype(np.int64) % arms
    return inside, sector


# --------------------------------------------------------------------------
# numba path


@njit
def _pairwise_distances_nb(x):
    n, d = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                t = x[i, k] - x[j, k]
                acc += t * t
            r = np.sqrt(acc)
            out[i, j] = r
            out[j, i] = r
    return out


@njit
def _pairwise_distances_vjp_nb(x, dist, grad):
    n, d = x.shape
    out = np.zeros((n, d))
    for i in range(n):
        for j in range(n):
            if i == j or dist[i, j] <= 0.0:
                continue
            c = (grad[i, j] + grad[j, i]) / dist[i, j]
            for k in range(d):
                out[i, k] += c * (x[i, k] - x[j, k])
    return out


@njit
def _histogram2d_nb(points, x_lo, x_hi, y_lo, y_hi, bins):
    counts = np.zeros((bins, bins))
    for p in range(points.shape[0]):
        x = points[p, 0]
        y = points[p, 1]
        if x < x_lo or x > x_hi or y < y_lo or y > y_hi:
            continue
        if x == x_hi:
            ix = bins - 1
        else:
            ix = int(np.floor((x - x_lo) / (x_hi - x_lo) * bins))
        if y == y_hi:
            iy = bins - 1
        else:
            iy = int(np.floor((y - y_lo) / (y_hi - y_lo) * bins))
        counts[ix, iy] += 1.0
    return counts


@njit
def _star_membership_nb(points, cx, cy, arms, r_inner, r_outer, rotation):
    n = points.shape[0]
    inside = np.zeros(n, dtype=np.bool_)
    sector = np.zeros(n, dtype=np.int64)
    width = 2.0 * np.pi / arms
    for p in range(n):
        dx = points[p, 0] - cx
        dy = points[p, 1] - cy
        local = np.arctan2(dy, dx) - rotation
        radius = np.sqrt(dx * dx + dy * dy)
        bound = r_inner + (r_outer - r_inner) * (0.5 + 0.5 * np.cos(arms * local))
        inside[p] = radius <= bound
        sector[p] = int(np.floor((local + 0.5 * width) / width)) % arms
    return inside, sector


IMPLEMENTATIONS = {
    "numpy": {
        "pairwise_distances": _pairwise_distances_np,
        "pairwise_distances_vjp": _pairwise_distances_vjp_np,
        "histogram2d": _histogram2d_np,
        "star_membership": _star_membership_np,
    },
    "numba": {
        "pairwise_distances": _pairwise_distances_nb,
        "pairwise_distances_vjp": _pairwise_distances_vjp_nb,
        "histogram2d": _histogram2d_nb,
        "star_membership": _star_membership_nb,
    },
}

BACKEND = "numba" if USE_NUMBA else "numpy"

_active = IMPLEMENTATIONS[BACKEND]
pairwise_distances = _active["pairwise_distances"]
pairwise_distances_vjp = _active["pairwise_distances_vjp"]
histogram2d = _active["histogram2d"]
star_membership = _active["star_membership"]
