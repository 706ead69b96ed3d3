"""Hot numeric kernels: 2-d convolution forward/backward.

Two interchangeable implementations are provided: numba-jitted loops and a
pure-numpy im2col path. Selection is made once at import time from the
``MPF_KERNELS`` environment variable (``numba`` or ``numpy``); the default is
numba when it imports, numpy otherwise. ``benchmarks/bench_kernels.py``
compares the two.

All kernels take float64 arrays. Inputs are NCHW, kernels FCkk, valid
cross-correlation (padding is applied by the caller).
"""

import os

import numpy as np

try:
    import numba

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via MPF_KERNELS=numpy
    _HAS_NUMBA = False


def _select_backend() -> str:
    choice = os.environ.get("MPF_KERNELS", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"MPF_KERNELS must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not _HAS_NUMBA:
        raise ValueError("MPF_KERNELS=numba but numba is not importable")
    if choice:
        return choice
    return "numba" if _HAS_NUMBA else "numpy"


_BACKEND = _select_backend()


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _BACKEND


# ---------------------------------------------------------------------------
# pure-numpy path
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N,C,H,W) -> (N,C,Ho,Wo,k,k) strided view, no copy
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    v = _windows(x, w.shape[2], stride)
    return np.einsum("nchwij,fcij->nfhw", v, w, optimize=True)


def conv2d_backward_input_numpy(
    gout: np.ndarray, w: np.ndarray, stride: int, h: int, wid: int
) -> np.ndarray:
    n, f, ho, wo = gout.shape
    _, c, k, _ = w.shape
    gx = np.zeros((n, c, h, wid), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            patch = np.einsum("nfhw,fc->nchw", gout, w[:, :, ki, kj], optimize=True)
            gx[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += patch
    return gx


def conv2d_backward_kernels_numpy(
    gout: np.ndarray, x: np.ndarray, stride: int, k: int
) -> np.ndarray:
    v = _windows(x, k, stride)
    return np.einsum("nchwij,nfhw->fcij", v, gout, optimize=True)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if _HAS_NUMBA:

    @numba.njit(cache=True)
    def _conv2d_forward_nb(x, w, stride, out):
        n, c, h, wid = x.shape
        f, _, k, _ = w.shape
        _, _, ho, wo = out.shape
        for ni in range(n):
            for fi in range(f):
                for oi in range(ho):
                    for oj in range(wo):
                        acc = 0.0
                        for ci in range(c):
                            for ki in range(k):
                                for kj in range(k):
                                    acc += (
                                        x[ni, ci, oi * stride + ki, oj * stride + kj]
                                        * w[fi, ci, ki, kj]
                                    )
                        out[ni, fi, oi, oj] = acc

    @numba.njit(cache=True)
    def _conv2d_backward_input_nb(gout, w, stride, gx):
        n, f, ho, wo = gout.shape
        _, c, k, _ = w.shape
        for ni in range(n):
            for fi in range(f):
                for oi in range(ho):
                    for oj in range(wo):
                        g = gout[ni, fi, oi, oj]
                        for ci in range(c):
                            for ki in range(k):
                                for kj in range(k):
                                    gx[ni, ci, oi * stride + ki, oj * stride + kj] += (
                                        g * w[fi, ci, ki, kj]
                                    )

    @numba.njit(cache=True)
    def _conv2d_backward_kernels_nb(gout, x, stride, gw):
        n, f, ho, wo = gout.shape
        _, c, k, _ = gw.shape
        for ni in range(n):
            for fi in range(f):
                for oi in range(ho):
                    for oj in range(wo):
                        g = gout[ni, fi, oi, oj]
                        for ci in range(c):
                            for ki in range(k):
                                for kj in range(k):
                                    gw[fi, ci, ki, kj] += (
                                        g * x[ni, ci, oi * stride + ki, oj * stride + kj]
                                    )

    def conv2d_forward_numba(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
        n, _, h, wid = x.shape
        f, _, k, _ = w.shape
        ho = (h - k) // stride + 1
        wo = (wid - k) // stride + 1
        out = np.empty((n, f, ho, wo), dtype=np.float64)
        _conv2d_forward_nb(x, w, stride, out)
        return out

    def conv2d_backward_input_numba(
        gout: np.ndarray, w: np.ndarray, stride: int, h: int, wid: int
    ) -> np.ndarray:
        n = gout.shape[0]
        c = w.shape[1]
        gx = np.zeros((n, c, h, wid), dtype=np.float64)
        _conv2d_backward_input_nb(gout, w, stride, gx)
        return gx

    def conv2d_backward_kernels_numba(
        gout: np.ndarray, x: np.ndarray, stride: int, k: int
    ) -> np.ndarray:
        f = gout.shape[1]
        c = x.shape[1]
        gw = np.zeros((f, c, k, k), dtype=np.float64)
        _conv2d_backward_kernels_nb(gout, x, stride, gw)
        return gw


if _BACKEND == "numba":
    conv2d_forward = conv2d_forward_numba
    conv2d_backward_input = conv2d_backward_input_numba
    conv2d_backward_kernels = conv2d_backward_kernels_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_kernels = conv2d_backward_kernels_numpy
