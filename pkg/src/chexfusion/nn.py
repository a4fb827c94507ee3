"""Differentiable primitives on numpy arrays.

Every forward function is pure and preserves the input dtype; float32 is the
working precision and float64 is used for gradient checks. Each ``*_backward``
takes the upstream gradient followed by the forward inputs and returns the
vector-Jacobian products, recomputing whatever intermediate it needs.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import GradCheckError, ShapeError

BCE_EPS = 1e-7


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


def _require_ndim(x, ndim, what):
    if x.ndim != ndim:
        raise ShapeError(f"{what} expects a {ndim}-d tensor, got shape {x.shape}")


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x, weight, stride, padding):
    _require_ndim(x, 4, "conv2d")
    _require_ndim(weight, 4, "conv2d weight")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    return n, c, h, w, cout, kh, kw, _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)


def _pointwise(kh, kw, stride, padding):
    return kh == 1 and kw == 1 and stride == 1 and padding == 0


def _patches(x, kh, kw, stride, padding, oh, ow):
    if _pointwise(kh, kw, stride, padding):
        n, c, h, w = x.shape
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    xpad = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    return kernels.im2col(np.ascontiguousarray(xpad), kh, kw, stride, oh, ow)


def conv2d(x, weight, stride=1, padding=0):
    """Cross-correlation with zero padding and no bias."""
    return conv2d_with_patches(x, weight, stride, padding)[0]


def conv2d_with_patches(x, weight, stride=1, padding=0):
    """Like :func:`conv2d` but also returns the patch matrix for reuse in backward."""
    n, c, h, w, cout, kh, kw, oh, ow = _conv_geometry(x, weight, stride, padding)
    cols = _patches(x, kh, kw, stride, padding, oh, ow)
    out = weight.reshape(cout, -1) @ cols
    return np.ascontiguousarray(out.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3)), cols


def conv2d_backward(dout, x, weight, stride=1, padding=0, cols=None):
    n, c, h, w, cout, kh, kw, oh, ow = _conv_geometry(x, weight, stride, padding)
    if cols is None:
        cols = _patches(x, kh, kw, stride, padding, oh, ow)
    dout_r = dout.transpose(1, 0, 2, 3).reshape(cout, -1)
    dweight = (dout_r @ cols.T).reshape(weight.shape)
    dcols = weight.reshape(cout, -1).T @ dout_r
    if _pointwise(kh, kw, stride, padding):
        dx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    else:
        hp, wp = h + 2 * padding, w + 2 * padding
        dxpad = kernels.col2im(np.ascontiguousarray(dcols), n, c, hp, wp, kh, kw, stride, oh, ow)
        dx = dxpad[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx), dweight


# ---------------------------------------------------------------------------
# batch norm


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, mode="train", momentum=0.1, eps=1e-5):
    """Per-channel normalisation over (N, H, W).

    In train mode the batch statistics (biased variance) are used and the
    running arrays, if given, are updated in place. Eval mode reads them.
    """
    _require_ndim(x, 4, "batch_norm")
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ShapeError("batch_norm: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = 1 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return (xhat * gamma[None, :, None, None] + beta[None, :, None, None]).astype(x.dtype, copy=False)


def batch_norm_backward(dout, x, gamma, running_mean=None, running_var=None, mode="train", eps=1e-5):
    dbeta = dout.sum(axis=(0, 2, 3))
    if mode == "eval":
        inv_std = 1 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        return dout * (gamma * inv_std)[None, :, None, None], dgamma, dbeta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    inv_std = 1 / np.sqrt(x.var(axis=(0, 2, 3)) + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std / m)[None, :, None, None]
    dx = scale * (m * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations and pooling


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    # subgradient 0 at x == 0
    return dout * (x > 0)


def _pool_geometry(x, kind, kh, kw, stride, padding):
    _require_ndim(x, 4, "pool")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    if kind == "avg" and padding:
        raise ShapeError("avg pool does not support padding")
    h, w = x.shape[2], x.shape[3]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ShapeError("pool stride must be >= 1")
    return _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)


def _neg_pad(x, padding):
    if not padding:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)


def pool(x, kind="max", kh=2, kw=2, stride=2, padding=0):
    """Window max or mean. Max pooling pads with -inf."""
    oh, ow = _pool_geometry(x, kind, kh, kw, stride, padding)
    if kind == "avg":
        return kernels.avgpool_forward(np.ascontiguousarray(x), kh, kw, stride, oh, ow)
    out, _ = kernels.maxpool_forward(_neg_pad(x, padding), kh, kw, stride, oh, ow)
    return out


def pool_backward(dout, x, kind="max", kh=2, kw=2, stride=2, padding=0):
    oh, ow = _pool_geometry(x, kind, kh, kw, stride, padding)
    h, w = x.shape[2], x.shape[3]
    dout = np.ascontiguousarray(dout)
    if kind == "avg":
        return kernels.avgpool_backward(dout, h, w, kh, kw, stride)
    _, arg = kernels.maxpool_forward(_neg_pad(x, padding), kh, kw, stride, oh, ow)
    dxpad = kernels.maxpool_backward(dout, arg, h + 2 * padding, w + 2 * padding, kh, kw, stride)
    return np.ascontiguousarray(dxpad[:, :, padding : padding + h, padding : padding + w])


def maxpool_argmax(x, kh, kw, stride, padding=0):
    """Window-relative argmax indices, used to detect kink crossings."""
    oh, ow = _pool_geometry(x, "max", kh, kw, stride, padding)
    return kernels.maxpool_forward(_neg_pad(x, padding), kh, kw, stride, oh, ow)[1]


def global_avg_pool(x):
    _require_ndim(x, 4, "global_avg_pool")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("global_avg_pool needs H, W >= 1")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dout, x):
    h, w = x.shape[2], x.shape[3]
    return np.broadcast_to((dout / (h * w))[:, :, None, None], x.shape).copy()


# ---------------------------------------------------------------------------
# dense pieces


def linear(x, weight, bias):
    """``x @ weight.T + bias``."""
    _require_ndim(x, 2, "linear")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape} do not conform")
    return x @ weight.T + bias


def linear_backward(dout, x, weight):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def concat_features(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features: shapes {a.shape} and {b.shape} do not share a batch axis")
    return np.concatenate([a, b], axis=1)


def concat_features_backward(dout, a_width):
    return dout[:, :a_width], dout[:, a_width:]


def elementwise_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add: shapes {a.shape} and {b.shape} differ")
    return a + b


def elementwise_add_backward(dout):
    return dout, dout


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    # keep the output strictly inside (0, 1) even where it rounds to an endpoint
    info = np.finfo(s.dtype)
    return np.clip(s, info.tiny, 1 - info.epsneg)


def sigmoid_backward(dout, x):
    s = sigmoid(x)
    return dout * s * (1 - s)


def _bce_weights(p, y, pos_weight):
    if np.shape(p) != np.shape(y):
        raise ShapeError(f"bce: predictions {np.shape(p)} and targets {np.shape(y)} differ")
    if pos_weight is None:
        return 1
    return np.asarray(pos_weight, dtype=y.dtype)[None, :]


def bce_loss(p, y, eps=BCE_EPS, pos_weight=None):
    """Mean binary cross-entropy over all N*C entries.

    ``pos_weight`` optionally scales the positive term per class.
    """
    pc = np.clip(p, eps, 1 - eps)
    w = _bce_weights(p, y, pos_weight)
    terms = -(w * y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return float(np.mean(terms, dtype=np.float64))


def bce_loss_backward(p, y, eps=BCE_EPS, pos_weight=None):
    pc = np.clip(p, eps, 1 - eps)
    w = _bce_weights(p, y, pos_weight)
    d = (-(w * y) / pc + (1 - y) / (1 - pc)) / y.size
    # clipped entries are flat
    inside = (p >= eps) & (p <= 1 - eps)
    return np.where(inside, d, 0).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tested_points: int
    tolerance: float = 1e-6
    attempts: int = 1
    skipped_points: int = 0

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


@dataclass
class GradOp:
    """An operation packaged for :func:`gradient_check`.

    ``forward(inputs)`` maps a dict of arrays to an array (or scalar).
    ``backward(inputs, upstream)`` returns a dict of gradients for the
    inputs being checked. ``sample(rng)`` draws a fresh input dict and is
    used to resample after hitting a kink. ``kink_distance(inputs)`` gives
    the distance to the nearest non-differentiable point; ``pattern(inputs)``
    returns the discrete activation state (ReLU masks, max-pool argmaxes)
    of a forward pass at ``inputs``.
    """

    name: str
    forward: Callable
    backward: Callable
    sample: Optional[Callable] = None
    kink_distance: Optional[Callable] = None
    pattern: Optional[Callable] = None


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


class _KinkHit(Exception):
    pass


def _check_once(op, inputs, rng, n_coords, h, kink_margin):
    if op.kink_distance is not None and op.kink_distance(inputs) < kink_margin:
        raise _KinkHit
    base_pattern = op.pattern(inputs) if op.pattern is not None else None
    out = np.asarray(op.forward(inputs))
    upstream = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)
    grads = op.backward(inputs, upstream)

    def objective(inp):
        return float(np.sum(np.asarray(op.forward(inp)) * upstream))

    def crosses_kink(inp):
        return base_pattern is not None and not _same_pattern(op.pattern(inp), base_pattern)

    worst, tested, skipped = 0.0, 0, 0
    for key, analytic in grads.items():
        x = inputs[key]
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
        want = min(x.size, n_coords)
        done = 0
        # a probe whose +-h step flips the activation pattern is replaced
        # by another coordinate; budget 3x the requested count
        for i in rng.permutation(x.size)[: 3 * want]:
            if done == want:
                break
            probe = dict(inputs)
            xp = x.copy()
            flat = xp.reshape(-1)
            orig = flat[i]
            probe[key] = xp
            flat[i] = orig + h
            fp = objective(probe)
            if crosses_kink(probe):
                skipped += 1
                continue
            flat[i] = orig - h
            fm = objective(probe)
            if crosses_kink(probe):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
            done += 1
        if done < want:
            raise _KinkHit
        tested += done
    return worst, tested, skipped


def gradient_check(op, inputs=None, tolerance=1e-6, *, seed=0, n_coords=50, h=1e-5, kink_margin=1e-4, max_attempts=10):
    """Compare ``op.backward`` with central differences at random coordinates.

    ``n_coords`` coordinates (or all, if fewer) are probed per checked input,
    in double precision with step ``h``. A sample point within
    ``kink_margin`` of a kink is redrawn through ``op.sample``; so is one
    where too many probes cross a kink. After ``max_attempts`` draws a
    :class:`GradCheckError` is raised.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        if inputs is None or attempt > 1:
            if op.sample is None:
                raise GradCheckError(f"{op.name}: sample point is at a kink and no sampler was given")
            inputs = op.sample(rng)
        inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
        try:
            worst, tested, skipped = _check_once(op, inputs, rng, n_coords, h, kink_margin)
        except _KinkHit:
            continue
        return GradCheckReport(op.name, worst, tested, tolerance, attempt, skipped)
    raise GradCheckError(f"{op.name}: no kink-free sample point after {max_attempts} attempts")
