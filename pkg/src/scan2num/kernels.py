"""Hot inner loops: patch extraction, pooling, bilinear sampling, row ranks.

Every kernel has a numba version (``*_nb``) and a numpy version (``*_np``).
The public name dispatches on :data:`scan2num._accel.USE_NUMBA`.  Both
paths perform the same floating point operations in the same order, so
their results agree bitwise for the gather/scatter kernels and to rounding
for bilinear sampling.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scan2num._accel import USE_NUMBA, njit


def conv_out_size(h, k, s):
    return (h - k) // s + 1


def pool_out_size(h, k, s):
    # ceil((h - k) / s) + 1, never emitting a window that starts past the input
    n = -(-(h - k) // s) + 1
    return max(1, min(n, (h - 1) // s + 1))


# ---------------------------------------------------------------- im2col
# Activations are channel-major (C, N, H, W).  Patch matrices are
# (C*k*k, N*OH*OW) so a conv is one ``W2 @ cols`` with no transposes.

def _im2col_np(x, k, s):
    c, n, h, w = x.shape
    oh, ow = conv_out_size(h, k, s), conv_out_size(w, k, s)
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = x[:, :, di:di + s * (oh - 1) + 1:s, dj:dj + s * (ow - 1) + 1:s]
    return cols.reshape(c * k * k, n * oh * ow)


@njit
def _im2col_nb(x, k, s):
    c, n, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = np.empty((c * k * k, n * oh * ow), dtype=x.dtype)
    for ch in range(c):
        for di in range(k):
            for dj in range(k):
                row = (ch * k + di) * k + dj
                for b in range(n):
                    for i in range(oh):
                        base = (b * oh + i) * ow
                        y = i * s + di
                        for j in range(ow):
                            cols[row, base + j] = x[ch, b, y, j * s + dj]
    return cols


def _col2im_np(cols, shape, k, s):
    c, n, h, w = shape
    oh, ow = conv_out_size(h, k, s), conv_out_size(w, k, s)
    d = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + s * (oh - 1) + 1:s, dj:dj + s * (ow - 1) + 1:s] += d[:, di, dj]
    return out


@njit
def _col2im_nb(cols, shape, k, s):
    c, n, h, w = shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.zeros((c, n, h, w), dtype=cols.dtype)
    # (di, dj) outermost: each cell receives its contributions in the same
    # order as the numpy path
    for di in range(k):
        for dj in range(k):
            for ch in range(c):
                row = (ch * k + di) * k + dj
                for b in range(n):
                    for i in range(oh):
                        base = (b * oh + i) * ow
                        y = i * s + di
                        for j in range(ow):
                            out[ch, b, y, j * s + dj] += cols[row, base + j]
    return out


def im2col(x, k, s):
    """Unfold ``(C, N, H, W)`` into ``(C*k*k, N*OH*OW)`` patches (valid, no padding)."""
    # the k*k strided block copies beat the compiled loop at every desk
    # shape (see benchmarks/bench_kernels.py), so both modes use numpy here
    return _im2col_np(x, k, s)


def col2im(cols, shape, k, s):
    """Adjoint of :func:`im2col`: scatter-add patches back onto a ``(C, N, H, W)`` grid."""
    if USE_NUMBA:
        return _col2im_nb(np.ascontiguousarray(cols), tuple(shape), k, s)
    return _col2im_np(cols, tuple(shape), k, s)


# ---------------------------------------------------------------- max pool
# Pooling acts on the last two axes; leading axes are flattened into planes.

def _maxpool_fwd_np(x, k, s):
    p, h, w = x.shape
    oh, ow = pool_out_size(h, k, s), pool_out_size(w, k, s)
    ph, pw = (oh - 1) * s + k, (ow - 1) * s + k
    padded = np.full((p, max(ph, h), max(pw, w)), -np.inf, dtype=x.dtype)
    padded[:, :h, :w] = x
    win = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::s, ::s][:, :oh, :ow]
    win = win.reshape(p, oh, ow, k * k)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, k)
    rows = np.arange(oh)[:, None] * s + di
    cols_ = np.arange(ow)[None, :] * s + dj
    return np.ascontiguousarray(out), (rows * w + cols_).astype(np.int64)


@njit
def _maxpool_fwd_nb(x, k, s, oh, ow):
    p, h, w = x.shape
    out = np.empty((p, oh, ow), dtype=x.dtype)
    arg = np.empty((p, oh, ow), dtype=np.int64)
    for b in range(p):
        for i in range(oh):
            for j in range(ow):
                best = x[b, i * s, j * s]
                bi = i * s * w + j * s
                for di in range(k):
                    y = i * s + di
                    if y >= h:
                        break
                    for dj in range(k):
                        xx = j * s + dj
                        if xx >= w:
                            break
                        v = x[b, y, xx]
                        if v > best:
                            best = v
                            bi = y * w + xx
                out[b, i, j] = best
                arg[b, i, j] = bi
    return out, arg


def _maxpool_bwd_np(grad, arg, shape):
    p, h, w = shape
    dx = np.zeros((p, h * w), dtype=grad.dtype)
    g = grad.reshape(p, -1)
    a = arg.reshape(p, -1)
    rows = np.broadcast_to(np.arange(p)[:, None], a.shape)
    np.add.at(dx, (rows, a), g)
    return dx.reshape(shape)


@njit
def _maxpool_bwd_nb(grad, arg, shape):
    p, h, w = shape
    dx = np.zeros((p, h * w), dtype=grad.dtype)
    oh, ow = grad.shape[1], grad.shape[2]
    for b in range(p):
        for i in range(oh):
            for j in range(ow):
                dx[b, arg[b, i, j]] += grad[b, i, j]
    return dx.reshape((p, h, w))


def maxpool_forward(x, k, s):
    """Max over ``k x k`` windows of the last two axes, ceil-mode boundaries.

    Returns the pooled map and, per output cell, the flat ``y*W + x`` index
    of the first maximal input element.
    """
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    x3 = np.ascontiguousarray(x).reshape(-1, h, w)
    if USE_NUMBA:
        out, arg = _maxpool_fwd_nb(x3, k, s, pool_out_size(h, k, s), pool_out_size(w, k, s))
    else:
        out, arg = _maxpool_fwd_np(x3, k, s)
    return out.reshape(lead + out.shape[1:]), arg.reshape(lead + arg.shape[1:])


def maxpool_backward(grad, arg, shape):
    shape = tuple(shape)
    p = int(np.prod(shape[:-2]))
    g3 = np.ascontiguousarray(grad).reshape(p, *grad.shape[-2:])
    a3 = arg.reshape(p, *arg.shape[-2:])
    if USE_NUMBA:
        dx = _maxpool_bwd_nb(g3, a3, (p,) + shape[-2:])
    else:
        dx = _maxpool_bwd_np(g3, a3, (p,) + shape[-2:])
    return dx.reshape(shape)


# ---------------------------------------------------------------- bilinear

@njit
def _sample_at(images, b, y, x, fill):
    h, w = images.shape[1], images.shape[2]
    if y < 0 or y > h - 1 or x < 0 or x > w - 1:
        return fill
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    y1 = min(y0 + 1, h - 1)
    x1 = min(x0 + 1, w - 1)
    wy = y - y0
    wx = x - x0
    top = np.float64(images[b, y0, x0]) * (1.0 - wx) + np.float64(images[b, y0, x1]) * wx
    bot = np.float64(images[b, y1, x0]) * (1.0 - wx) + np.float64(images[b, y1, x1]) * wx
    return top * (1.0 - wy) + bot * wy



def _bilinear_np(images, ys, xs, fill):
    n, h, w = images.shape
    ys = np.broadcast_to(ys, (n,) + ys.shape[-2:]).astype(np.float64)
    xs = np.broadcast_to(xs, (n,) + xs.shape[-2:]).astype(np.float64)
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    yc = np.where(inside, ys, 0.0)
    xc = np.where(inside, xs, 0.0)
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.floor(xc).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0
    b = np.arange(n)[:, None, None]
    src = images.astype(np.float64)
    top = src[b, y0, x0] * (1.0 - wx) + src[b, y0, x1] * wx
    bot = src[b, y1, x0] * (1.0 - wx) + src[b, y1, x1] * wx
    val = top * (1.0 - wy) + bot * wy
    return np.where(inside, val, fill).astype(np.float32)


@njit
def _bilinear_nb(images, ys, xs, fill):
    n = images.shape[0]
    oh, ow = ys.shape[1], ys.shape[2]
    out = np.empty((n, oh, ow), dtype=np.float32)
    for b in range(n):
        bi = b if ys.shape[0] > 1 else 0
        for i in range(oh):
            for j in range(ow):
                out[b, i, j] = _sample_at(images, b, ys[bi, i, j], xs[bi, i, j], fill)
    return out


def bilinear_sample(images, ys, xs, fill=0.0):
    """Sample each image of an ``(n, H, W)`` stack at fractional coordinates.

    ``ys``/``xs`` have shape ``(n, h, w)`` or ``(1, h, w)`` (shared grid).
    Coordinates outside ``[0, H-1] x [0, W-1]`` return ``fill``.
    """
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if ys.ndim == 2:
        ys, xs = ys[None], xs[None]
    if USE_NUMBA:
        return _bilinear_nb(np.ascontiguousarray(images), np.ascontiguousarray(ys),
                            np.ascontiguousarray(xs), float(fill))
    return _bilinear_np(images, ys, xs, float(fill))


def _grid_step(src, size):
    return (src - 1) / (size - 1) if size > 1 else 0.0


def _rotation_coords(h, w, cos_t, sin_t):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy = (np.arange(h) - cy)[None, :, None]
    xx = (np.arange(w) - cx)[None, None, :]
    c, s = cos_t[:, None, None], sin_t[:, None, None]
    return c * yy - s * xx + cy, s * yy + c * xx + cx


@njit
def _rotate_nb(images, cos_t, sin_t, fill):
    n, h, w = images.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    out = np.empty((n, h, w), dtype=np.float32)
    for b in range(n):
        c = cos_t[b]
        s = sin_t[b]
        for i in range(h):
            yy = i - cy
            for j in range(w):
                xx = j - cx
                out[b, i, j] = _sample_at(images, b, c * yy - s * xx + cy, s * yy + c * xx + cx, fill)
    return out


@njit
def _resample_nb(images, size, step_y, step_x):
    n = images.shape[0]
    out = np.empty((n, size, size), dtype=np.float32)
    for b in range(n):
        for i in range(size):
            y = i * step_y
            for j in range(size):
                out[b, i, j] = _sample_at(images, b, y, j * step_x, 0.0)
    return out


def rotate_stack(images, angles_rad, fill=-1.0):
    """Rotate each ``(H, W)`` image about its center by its own angle."""
    angles = np.asarray(angles_rad, dtype=np.float64)
    cos_t, sin_t = np.cos(angles), np.sin(angles)
    if USE_NUMBA:
        return _rotate_nb(np.ascontiguousarray(images), cos_t, sin_t, float(fill))
    ys, xs = _rotation_coords(images.shape[1], images.shape[2], cos_t, sin_t)
    return _bilinear_np(images, ys, xs, float(fill))


def resample_stack(images, size):
    """Bilinear corner-aligned resize of every image to ``size x size``."""
    n, h, w = images.shape
    sy, sx = _grid_step(h, size), _grid_step(w, size)
    if USE_NUMBA:
        return _resample_nb(np.ascontiguousarray(images), size, sy, sx)
    ys = (np.arange(size) * sy)[:, None] + np.zeros(size)[None, :]
    xs = np.zeros(size)[:, None] + (np.arange(size) * sx)[None, :]
    return _bilinear_np(images, ys[None], xs[None], 0.0)


# ---------------------------------------------------------------- ranks

def _rank_rows_np(a):
    from scipy.stats import rankdata
    return rankdata(a, method="average", axis=1).astype(np.float64)


@njit
def _rank_rows_nb(a):
    r, n = a.shape
    out = np.empty((r, n), dtype=np.float64)
    for row in range(r):
        order = np.argsort(a[row], kind="mergesort")
        i = 0
        while i < n:
            j = i
            v = a[row, order[i]]
            while j + 1 < n and a[row, order[j + 1]] == v:
                j += 1
            avg = 0.5 * (i + j) + 1.0
            for t in range(i, j + 1):
                out[row, order[t]] = avg
            i = j + 1
    return out


def rank_rows(a):
    """Average (fractional) ranks, 1-based, computed independently per row."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if USE_NUMBA:
        return _rank_rows_nb(np.ascontiguousarray(a))
    return _rank_rows_np(a)
