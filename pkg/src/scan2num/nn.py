"""Layer kernels with explicit forward/backward passes, plus init and SGD.

Forward functions return ``(out, cache)``; the matching backward takes the
upstream gradient and that cache.  Arrays are float32 in training; the
same code runs in float64 for gradient checking.
"""
from dataclasses import dataclass, field

import numpy as np

from scan2num import kernels
from scan2num.errors import NumericalError


@dataclass
class Param:
    """A trainable tensor with its gradient and momentum buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    momentum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.momentum.shape):
            raise ValueError(f"{self.name}: value/grad/momentum shapes differ")

    def zero_grad(self):
        self.grad[...] = 0


# ------------------------------------------------------------------ conv

def _check_conv(c, h, wd, w):
    cout, cin, k, k2 = w.shape
    if cin != c or k != k2:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {cin} (kernel {k}x{k2})")
    if h < k or wd < k:
        raise ValueError(f"conv2d: input {h}x{wd} smaller than kernel {k}")
    return cout, k


def conv2d_cnhw_forward(x, w, b, stride):
    """Channel-major conv: ``x`` is (C, N, H, W), output (C', N, OH, OW)."""
    c, n, h, wd = x.shape
    cout, k = _check_conv(c, h, wd, w)
    oh, ow = kernels.conv_out_size(h, k, stride), kernels.conv_out_size(wd, k, stride)
    cols = kernels.im2col(x, k, stride)
    out = w.reshape(cout, -1) @ cols
    out += b[:, None]
    return out.reshape(cout, n, oh, ow), (x.shape, cols, w, stride)


def conv2d_cnhw_backward(dout, cache, need_dx=True):
    x_shape, cols, w, stride = cache
    cout, _, k, _ = w.shape
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = kernels.col2im(w.reshape(cout, -1).T @ d2, x_shape, k, stride) if need_dx else None
    return dx, dw, db


def conv2d_forward(x, w, b, stride):
    """Valid 2-D cross-correlation. ``x``: (N, C, H, W); ``w``: (C', C, k, k)."""
    out, cache = conv2d_cnhw_forward(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), w, b, stride)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cache


def conv2d_backward(dout, cache):
    dx, dw, db = conv2d_cnhw_backward(np.ascontiguousarray(dout.transpose(1, 0, 2, 3)), cache)
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dw, db


# ------------------------------------------------------------------ pool

def maxpool2d_forward(x, kernel, stride):
    h, w = x.shape[2:]
    if kernel > h + stride or kernel > w + stride:
        raise ValueError(f"maxpool2d: kernel {kernel} exceeds input {h}x{w} plus stride {stride}")
    out, arg = kernels.maxpool_forward(x, kernel, stride)
    return out, (x.shape, arg)


def maxpool2d_backward(dout, cache):
    shape, arg = cache
    return kernels.maxpool_backward(dout, arg, shape)


# ------------------------------------------------------------------ relu

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0).astype(dout.dtype, copy=False)


# --------------------------------------------------------------- dropout

def dropout_forward(x, rate, training, rng=None):
    """Inverted dropout; identity at inference time."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------- affine

def affine_forward(x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine: input has {x.shape[-1]} features, weights expect {w.shape[0]}")
    return x @ w + b, (x, w)


def affine_backward(dout, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


# ------------------------------------------------------------- mean fuse

def mean_fuse_forward(per_slice):
    """Average ``(..., n, F)`` slice features to ``(..., F)``."""
    n = per_slice.shape[-2]
    if n == 0:
        raise ValueError("mean_fuse: no slices")
    return per_slice.mean(axis=-2, dtype=per_slice.dtype), n


def mean_fuse_backward(dout, n):
    d = dout[..., None, :] / dout.dtype.type(n)
    return np.repeat(d, n, axis=-2)


# ------------------------------------------------------------------ loss

def l2_loss(pred, target):
    """Return ``(loss, dpred)`` with loss = sum((pred - target)**2) / (2N)."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"l2_loss: shapes {pred.shape} and {target.shape} differ")
    n = pred.shape[0]
    diff = pred - target
    return float((diff * diff).sum() / (2 * n)), diff / pred.dtype.type(n)


# ------------------------------------------------------------- optimizer

def xavier_init(shape, fan_in, rng, dtype=np.float32):
    """Uniform on ``[-sqrt(3/fan_in), sqrt(3/fan_in)]`` (variance 1/fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def sgd_step(params, lr, momentum, weight_decay):
    """Momentum SGD with L2 weight decay, then clear gradients.

    g = grad + wd * w;  buf = mu * buf - lr * g;  w += buf
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        g = p.grad + weight_decay * p.value
        p.momentum *= momentum
        p.momentum -= lr * g
        p.value += p.momentum
        p.zero_grad()


def lr_schedule(iteration, base_lr, max_iter):
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter)


# ------------------------------------------------------ gradient checking

def relative_error(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def numeric_gradient(fn, arrays, name, index, eps):
    arr = arrays[name]
    old = arr[index]
    arr[index] = old + eps
    fp = fn(arrays)
    arr[index] = old - eps
    fm = fn(arrays)
    arr[index] = old
    return (fp - fm) / (2 * eps)


def gradient_check(fn, arrays, analytic, eps=1e-6, max_coords=None, rng=None):
    """Max relative error between ``analytic`` grads and central differences.

    ``fn(arrays) -> float`` must be a pure function of the float64 arrays it
    is given; they are perturbed in place and restored.  ``max_coords``
    limits the number of coordinates probed per array (sampled with ``rng``).
    Returns ``(max_error, per_name_errors)``.
    """
    worst = {}
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, arr in arrays.items():
        if name not in analytic:
            continue
        size = arr.size
        if max_coords is None or size <= max_coords:
            flat = np.arange(size)
        else:
            flat = np.sort(rng.choice(size, max_coords, replace=False))
        err = 0.0
        grad = np.asarray(analytic[name], dtype=np.float64)
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            num = numeric_gradient(fn, arrays, name, idx, eps)
            err = max(err, float(relative_error(grad[idx], num)))
        worst[name] = err
    return (max(worst.values()) if worst else 0.0), worst
