"""Hot inner loops behind the tensor ops: im2col/col2im and max pooling.

Two interchangeable backends live here. The default is numba ``@njit``
kernels; a pure-numpy path is selected with ``CELLWATCH_KERNELS=numpy``
(or automatically when numba is not importable). Both backends are written
so that per-element accumulation order is identical, which makes their
outputs bit-for-bit equal — switching the backend changes speed, never
numbers. ``benchmarks/bench_kernels.py`` compares the two.

The matrix multiplications of convolution itself are not here: both
backends feed the same BLAS GEMM in ``tensor.py``.
"""

import os

import numpy as np

try:
    import numba as nb

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_ENV_FLAG = "CELLWATCH_KERNELS"
_backend = None  # "numba" | "numpy"


def available_backends():
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def use_backend(name):
    """Force a kernel backend ("numba" or "numpy"). Returns the active name."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend: {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name
    return _backend


def active_backend():
    return _backend


def _default_backend():
    choice = os.environ.get(_ENV_FLAG, "").strip().lower()
    if choice in ("numba", "numpy"):
        if choice == "numba" and not _HAVE_NUMBA:
            return "numpy"
        return choice
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _im2col_numpy(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    # row order (c, kh, kw) matches the numba kernel
    return np.ascontiguousarray(win).reshape(n, c * kh * kw, ho * wo)


def _col2im_numpy(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    # accumulate in (kh, kw) order; the numba gather uses the same order
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + ho * stride : stride, b : b + wo * stride : stride] += cols6[
                :, :, a, b
            ]
    return out


def _maxpool_fwd_numpy(x, wh, ww, stride):
    n, c, h, w = x.shape
    ho = (h - wh) // stride + 1
    wo = (w - ww) // stride + 1
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, wh, ww),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = win.reshape(n, c, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    a, b = idx // ww, idx % ww
    oh = np.arange(ho)[None, None, :, None]
    ow = np.arange(wo)[None, None, None, :]
    absidx = (oh * stride + a) * w + (ow * stride + b)
    return out, absidx.astype(np.int64)


def _maxpool_bwd_numpy(gy, absidx, h, w):
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    ii = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx, (ii, cc, absidx), gy[:, :, :, :])
    return gx.reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @nb.njit(cache=True, parallel=True)
    def _im2col_nb(xp, kh, kw, stride, out):
        n, c, hp, wp = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        for i in nb.prange(n):
            for ci in range(c):
                for a in range(kh):
                    for b in range(kw):
                        row = (ci * kh + a) * kw + b
                        for ohi in range(ho):
                            ih = ohi * stride + a
                            base = ohi * wo
                            for owi in range(wo):
                                out[i, row, base + owi] = xp[i, ci, ih, owi * stride + b]

    @nb.njit(cache=True, parallel=True)
    def _col2im_nb(cols6, stride, out):
        n, c, kh, kw, ho, wo = cols6.shape
        hp, wp = out.shape[2], out.shape[3]
        for i in nb.prange(n):
            for ci in range(c):
                for h in range(hp):
                    for w in range(wp):
                        acc = out[i, ci, h, w]  # zero of the array dtype
                        for a in range(kh):
                            hh = h - a
                            if hh < 0 or hh % stride != 0:
                                continue
                            ohi = hh // stride
                            if ohi >= ho:
                                continue
                            for b in range(kw):
                                ww = w - b
                                if ww < 0 or ww % stride != 0:
                                    continue
                                owi = ww // stride
                                if owi >= wo:
                                    continue
                                acc += cols6[i, ci, a, b, ohi, owi]
                        out[i, ci, h, w] = acc

    @nb.njit(cache=True, parallel=True)
    def _maxpool_fwd_nb(x, wh, ww, stride, out, absidx):
        n, c, h, w = x.shape
        ho, wo = out.shape[2], out.shape[3]
        for i in nb.prange(n):
            for ci in range(c):
                for ohi in range(ho):
                    for owi in range(wo):
                        h0 = ohi * stride
                        w0 = owi * stride
                        best = x[i, ci, h0, w0]
                        bh, bw = h0, w0
                        for a in range(wh):
                            for b in range(ww):
                                v = x[i, ci, h0 + a, w0 + b]
                                if v > best:  # strict: keep first occurrence
                                    best = v
                                    bh, bw = h0 + a, w0 + b
                        out[i, ci, ohi, owi] = best
                        absidx[i, ci, ohi, owi] = bh * w + bw

    @nb.njit(cache=True)
    def _maxpool_bwd_nb(gy, absidx, gx):
        n, c, ho, wo = gy.shape
        for i in range(n):
            for ci in range(c):
                for ohi in range(ho):
                    for owi in range(wo):
                        gx[i, ci, absidx[i, ci, ohi, owi]] += gy[i, ci, ohi, owi]


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def im2col(xp, kh, kw, stride):
    """Unfold padded input (N,C,Hp,Wp) into (N, C*kh*kw, Ho*Wo) patch columns."""
    if _backend == "numba":
        n, c, hp, wp = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        out = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
        _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, out)
        return out
    return _im2col_numpy(xp, kh, kw, stride)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    """Fold patch columns back onto the padded input grid, accumulating overlaps."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if _backend == "numba":
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        _col2im_nb(np.ascontiguousarray(cols).reshape(n, c, kh, kw, ho, wo), stride, out)
        return out
    return _col2im_numpy(cols, n, c, hp, wp, kh, kw, stride, ho, wo)


def maxpool_forward(x, window, stride):
    """Window maxima plus the flat (h*W+w) index of each winner.

    Ties go to the first maximal element in row-major window order.
    """
    wh, ww = window
    if _backend == "numba":
        n, c, h, w = x.shape
        ho = (h - wh) // stride + 1
        wo = (w - ww) // stride + 1
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        absidx = np.empty((n, c, ho, wo), dtype=np.int64)
        _maxpool_fwd_nb(np.ascontiguousarray(x), wh, ww, stride, out, absidx)
        return out, absidx
    return _maxpool_fwd_numpy(x, wh, ww, stride)


def maxpool_backward(gy, absidx, h, w):
    """Scatter pooled gradients back to the argmax positions."""
    if _backend == "numba":
        n, c = gy.shape[:2]
        gx = np.zeros((n, c, h * w), dtype=gy.dtype)
        _maxpool_bwd_nb(np.ascontiguousarray(gy), absidx, gx)
        return gx.reshape(n, c, h, w)
    return _maxpool_bwd_numpy(gy, absidx, h, w)


_backend = _default_backend()
