"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``STUQ_NUMBA``:

``auto`` (default)
    use numba when it imports, numpy otherwise
``1``
    require numba
``0``
    force the numpy path

Only kernels where the jitted loop measurably beats numpy dispatch to numba
(fused elementwise gradients and interval counting). Both paths compute the
same quantities and differ only in summation order,
so results agree to rounding (checked in tests/test_kernels.py).
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("STUQ_NUMBA", "auto").strip().lower()

if _FLAG not in {"auto", "0", "1"}:
    raise ValueError(f"STUQ_NUMBA must be one of auto/0/1, got {_FLAG!r}")

HAVE_NUMBA = False
if _FLAG != "0":
    try:
        import numba

        HAVE_NUMBA = True
    except ImportError:
        if _FLAG == "1":
            raise

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# numpy reference implementations ------------------------------------------


def node_contract_numpy(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    # z: (B, N, I), w: (N, I, O) -> (B, N, O)
    return np.matmul(z.transpose(1, 0, 2), w).transpose(1, 0, 2)


def node_contract_grad_numpy(
    z: np.ndarray, w: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    gt = g.transpose(1, 0, 2)  # (N, B, O)
    dz = np.matmul(gt, w.transpose(0, 2, 1)).transpose(1, 0, 2)
    dw = np.matmul(z.transpose(1, 2, 0), gt)
    return dz, dw


def interval_counts_numpy(
    y: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> tuple[int, float]:
    inside = (lo <= y) & (y <= hi)
    return int(np.count_nonzero(inside)), float(np.sum(hi - lo))


def sigmoid_numpy(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def masked_act_numpy(pre, mask, kind):
    x = pre if mask is None else pre * mask
    return sigmoid_numpy(x) if kind == 0 else np.tanh(x)


def masked_act_grad_numpy(out, mask, g, kind):
    d = g * out * (1.0 - out) if kind == 0 else g * (1.0 - out * out)
    return d if mask is None else d * mask


def gated_update_numpy(z, h, c):
    return c + z * (h - c)


def gated_update_grad_numpy(z, h, c, g):
    return g * (h - c), g * z, g * (1.0 - z)


_ONE = np.ones((1, 1, 1))


# numba kernels --------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _node_contract_nb(z, w):
        nb, nn, ni = z.shape
        no = w.shape[2]
        out = np.zeros((nb, nn, no), dtype=z.dtype)
        for b in range(nb):
            for n in range(nn):
                for i in range(ni):
                    zv = z[b, n, i]
                    if zv == 0.0:
                        continue
                    for o in range(no):
                        out[b, n, o] += zv * w[n, i, o]
        return out

    @numba.njit(cache=True)
    def _node_contract_grad_nb(z, w, g):
        nb, nn, ni = z.shape
        no = w.shape[2]
        dz = np.zeros_like(z)
        dw = np.zeros_like(w)
        for b in range(nb):
            for n in range(nn):
                for i in range(ni):
                    acc = 0.0
                    zv = z[b, n, i]
                    for o in range(no):
                        gv = g[b, n, o]
                        acc += gv * w[n, i, o]
                        dw[n, i, o] += zv * gv
                    dz[b, n, i] = acc
        return dz, dw

    @numba.njit(cache=True)
    def _masked_act_grad_nb(out, mask, use_mask, g, kind):
        d = np.empty_like(out)
        o = out.ravel()
        m = mask.ravel()
        gg = g.ravel()
        dd = d.ravel()
        for k in range(o.size):
            if kind == 0:
                v = gg[k] * o[k] * (1.0 - o[k])
            else:
                v = gg[k] * (1.0 - o[k] * o[k])
            dd[k] = v * m[k] if use_mask else v
        return d

    @numba.njit(cache=True)
    def _gated_nb(z, h, c):
        out = np.empty_like(z)
        zf, hf, cf, of = z.ravel(), h.ravel(), c.ravel(), out.ravel()
        for k in range(zf.size):
            of[k] = cf[k] + zf[k] * (hf[k] - cf[k])
        return out

    @numba.njit(cache=True)
    def _gated_grad_nb(z, h, c, g):
        dz = np.empty_like(z)
        dh = np.empty_like(z)
        dc = np.empty_like(z)
        zf, hf, cf, gf = z.ravel(), h.ravel(), c.ravel(), g.ravel()
        a, b, e = dz.ravel(), dh.ravel(), dc.ravel()
        for k in range(zf.size):
            a[k] = gf[k] * (hf[k] - cf[k])
            b[k] = gf[k] * zf[k]
            e[k] = gf[k] * (1.0 - zf[k])
        return dz, dh, dc

    @numba.njit(cache=True)
    def _interval_counts_nb(y, lo, hi):
        hits = 0
        width = 0.0
        for k in range(y.size):
            if lo[k] <= y[k] and y[k] <= hi[k]:
                hits += 1
            width += hi[k] - lo[k]
        return hits, width


# Batched BLAS beats hand loops for the contraction at every size we run, so
# both backends use numpy here; the loop kernels stay for the benchmark
# (benchmarks/bench_kernels.py).
node_contract = node_contract_numpy
node_contract_grad = node_contract_grad_numpy


def node_contract_loops(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    if not HAVE_NUMBA:
        return node_contract_numpy(z, w)
    return _node_contract_nb(np.ascontiguousarray(z), np.ascontiguousarray(w))


def node_contract_grad_loops(z, w, g):
    if not HAVE_NUMBA:
        return node_contract_grad_numpy(z, w, g)
    return _node_contract_grad_nb(
        np.ascontiguousarray(z), np.ascontiguousarray(w), np.ascontiguousarray(g)
    )


def masked_act(pre: np.ndarray, mask: np.ndarray | None, kind: int) -> np.ndarray:
    """``act(pre * mask)`` with act sigmoid (kind 0) or tanh (kind 1).

    Always numpy: its vectorised tanh is several times faster than the scalar
    libm call a jitted loop makes.
    """
    return masked_act_numpy(pre, mask, kind)


def masked_act_grad(out: np.ndarray, mask: np.ndarray | None, g: np.ndarray, kind: int) -> np.ndarray:
    if HAVE_NUMBA:
        m = _ONE if mask is None else np.ascontiguousarray(mask)
        return _masked_act_grad_nb(np.ascontiguousarray(out), m, mask is not None,
                                   np.ascontiguousarray(g), kind)
    return masked_act_grad_numpy(out, mask, g, kind)


def gated_update(z: np.ndarray, h: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``z * h + (1 - z) * c``."""
    if HAVE_NUMBA:
        return _gated_nb(*(np.ascontiguousarray(a) for a in np.broadcast_arrays(z, h, c)))
    return gated_update_numpy(z, h, c)


def gated_update_grad(z, h, c, g):
    if HAVE_NUMBA:
        z, h, c = (np.ascontiguousarray(a) for a in np.broadcast_arrays(z, h, c))
        return _gated_grad_nb(z, h, c, np.ascontiguousarray(g))
    return gated_update_grad_numpy(z, h, c, g)


def interval_counts(y: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[int, float]:
    """Return (number of y inside the closed interval, summed widths)."""
    y, lo, hi = (np.ascontiguousarray(a, dtype=np.float64).ravel() for a in (y, lo, hi))
    if HAVE_NUMBA:
        hits, width = _interval_counts_nb(y, lo, hi)
        return int(hits), float(width)
    return interval_counts_numpy(y, lo, hi)
