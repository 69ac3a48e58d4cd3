"""Hot inner loops, each with a numba ``@njit`` body and a pure-numpy twin.

The numba path is used when numba imports cleanly and the environment
variable ``CAMFUSION_DISABLE_NUMBA`` is unset (or ``0``). Both paths are
kept importable so tests and ``benchmarks/bench_kernels.py`` can compare
them directly through :data:`KERNELS`.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _numba_requested() -> bool:
    flag = os.environ.get("CAMFUSION_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by CAMFUSION_DISABLE_NUMBA")
    import numba as nb

    njit = nb.njit(cache=True, nogil=True)
    HAVE_NUMBA = True
except ImportError:
    nb = None
    njit = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference paths


def gelu_forward_np(x):
    return x * 0.5 * (1.0 + _erf(x * _SQRT_HALF))


def gelu_backward_np(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def layer_norm_forward_np(x2d, gain, bias, eps):
    mu = x2d.mean(axis=1, keepdims=True)
    xc = x2d - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layer_norm_backward_np(g2d, xhat, inv_std, gain):
    n = xhat.shape[1]
    dxhat = g2d * gain
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (inv_std[:, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, (g2d * xhat).sum(axis=0), g2d.sum(axis=0)


def l1_cost_np(vectors):
    """Row sums of the pairwise L1 distance matrix."""
    diff = np.abs(vectors[:, None, :] - vectors[None, :, :])
    return diff.sum(axis=2).sum(axis=1)


def intersection_counts_np(a_flat, a_ptr, b_flat, b_ptr):
    """|A_i ∩ B_j| for CSR-packed sorted unique integer sets."""
    na, nb_ = len(a_ptr) - 1, len(b_ptr) - 1
    out = np.zeros((na, nb_), dtype=np.int64)
    for i in range(na):
        ai = a_flat[a_ptr[i]:a_ptr[i + 1]]
        for j in range(nb_):
            bj = b_flat[b_ptr[j]:b_ptr[j + 1]]
            out[i, j] = np.intersect1d(ai, bj, assume_unique=True).size
    return out


# ---------------------------------------------------------------------------
# loop bodies compiled by numba


def _gelu_forward_loop(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = v * 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
    return out.reshape(x.shape)


def _gelu_backward_loop(x, g):
    xf = x.ravel()
    gf = g.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        out[i] = gf[i] * (cdf + v * pdf)
    return out.reshape(x.shape)


def _layer_norm_forward_loop(x2d, gain, bias, eps):
    rows, n = x2d.shape
    out = np.empty_like(x2d)
    xhat = np.empty_like(x2d)
    inv_std = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for k in range(n):
            mu += x2d[r, k]
        mu /= n
        var = 0.0
        for k in range(n):
            d = x2d[r, k] - mu
            var += d * d
        var /= n
        s = 1.0 / math.sqrt(var + eps)
        inv_std[r] = s
        for k in range(n):
            h = (x2d[r, k] - mu) * s
            xhat[r, k] = h
            out[r, k] = h * gain[k] + bias[k]
    return out, xhat, inv_std


def _layer_norm_backward_loop(g2d, xhat, inv_std, gain):
    rows, n = xhat.shape
    dx = np.empty_like(xhat)
    dgain = np.zeros(n)
    dbias = np.zeros(n)
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for k in range(n):
            d = g2d[r, k] * gain[k]
            s1 += d
            s2 += d * xhat[r, k]
            dgain[k] += g2d[r, k] * xhat[r, k]
            dbias[k] += g2d[r, k]
        c = inv_std[r] / n
        for k in range(n):
            d = g2d[r, k] * gain[k]
            dx[r, k] = c * (n * d - s1 - xhat[r, k] * s2)
    return dx, dgain, dbias


def _l1_cost_loop(vectors):
    # full rows in index order so duplicate rows get bitwise-equal costs
    n, d = vectors.shape
    cost = np.zeros(n)
    for i in range(n):
        total = 0.0
        for j in range(n):
            acc = 0.0
            for k in range(d):
                acc += abs(vectors[i, k] - vectors[j, k])
            total += acc
        cost[i] = total
    return cost


def _intersection_counts_loop(a_flat, a_ptr, b_flat, b_ptr):
    na = a_ptr.size - 1
    nb_ = b_ptr.size - 1
    out = np.zeros((na, nb_), dtype=np.int64)
    for i in range(na):
        for j in range(nb_):
            p, pe = a_ptr[i], a_ptr[i + 1]
            q, qe = b_ptr[j], b_ptr[j + 1]
            c = 0
            while p < pe and q < qe:
                u = a_flat[p]
                v = b_flat[q]
                if u == v:
                    c += 1
                    p += 1
                    q += 1
                elif u < v:
                    p += 1
                else:
                    q += 1
            out[i, j] = c
    return out


_LOOPS = {
    "gelu_forward": (gelu_forward_np, _gelu_forward_loop),
    "gelu_backward": (gelu_backward_np, _gelu_backward_loop),
    "layer_norm_forward": (layer_norm_forward_np, _layer_norm_forward_loop),
    "layer_norm_backward": (layer_norm_backward_np, _layer_norm_backward_loop),
    "l1_cost": (l1_cost_np, _l1_cost_loop),
    "intersection_counts": (intersection_counts_np, _intersection_counts_loop),
}

# name -> (numpy implementation, numba implementation or None)
KERNELS = {
    name: (np_fn, njit(loop) if HAVE_NUMBA else None)
    for name, (np_fn, loop) in _LOOPS.items()
}


def _select(name):
    np_fn, nb_fn = KERNELS[name]
    return nb_fn if nb_fn is not None else np_fn


gelu_forward = _select("gelu_forward")
gelu_backward = _select("gelu_backward")
layer_norm_forward = _select("layer_norm_forward")
layer_norm_backward = _select("layer_norm_backward")
l1_cost = _select("l1_cost")
intersection_counts = _select("intersection_counts")

BACKEND = "numba" if HAVE_NUMBA else "numpy"
