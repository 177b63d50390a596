"""Dense numerical substrate: matrices, activations, initialization, and
per-layer manual backprop primitives.

Matrices are plain 2-D numpy arrays (row-major). The global float width
defaults to 64-bit; 32-bit can be selected with set_default_dtype() for
speed runs. All ops are pure functions of their inputs, keep a fixed
evaluation order, and are bit-reproducible for a fixed seed and platform.
Matrix products go through the C kernel in _kernels, which sums strictly
left to right over the inner dimension.
"""

import os

import numpy as np

from spinn import _kernels

_DEFAULT_DTYPE = np.dtype(np.float64)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def set_default_dtype(name):
    """Select the global float width: 'float64' (default) or 'float32'."""
    global _DEFAULT_DTYPE
    dt = np.dtype(name)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {name!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


def make_rng(seed):
    """Deterministic generator (PCG64); one seed gives one stream on any platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def num_threads():
    """Worker-thread cap from SPINN_THREADS (default 1)."""
    try:
        n = int(os.environ.get("SPINN_THREADS", "1"))
    except ValueError:
        return 1
    return max(1, n)


def assert_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# matmul


class PackedMatrix:
    """Column-panel repack of a matrix `b`, reusable across matmul calls.

    Packing only changes the storage layout, never the summation order, so
    results are bit-identical with or without it. The caller must not mutate
    `b` while the pack is in use.
    """

    def __init__(self, b):
        b = np.ascontiguousarray(b)
        nj = _kernels.NJ_F32 if b.dtype == np.float32 else _kernels.NJ_F64
        k, n = b.shape
        npan = (n + nj - 1) // nj
        self.b = b
        self.buf = np.empty(npan * k * nj, dtype=b.dtype)
        _kernels.pack(b, self.buf)


def matmul(a, b, out=None, packed=None):
    """Matrix product with deterministic left-to-right summation over k.

    `packed`, if given, must be a PackedMatrix built from this same `b`.
    """
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    if out is None:
        out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    _kernels.mm(a, b, out, packed.buf if packed is not None else None)
    return out


def linear(x, w, b=None, packed=None):
    """x @ w + b for row-batched x."""
    y = matmul(x, w, packed=packed)
    if b is not None:
        y += b
    return y


def linear_backward(x, w, dy):
    """Gradients of y = x @ w + b. Returns (dx, dw, db)."""
    dx = matmul(np.ascontiguousarray(dy), np.ascontiguousarray(w.T))
    dw = matmul(np.ascontiguousarray(x.T), np.ascontiguousarray(dy))
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    # split form saturates instead of overflowing exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, dy):
    return dy * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(y, dy):
    return dy * (1.0 - y * y)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return np.where(x > 0, dy, 0)


def softmax(x):
    """Row-wise softmax; rows sum to 1."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits, labels):
    """Mean cross entropy of rows of `logits` against integer `labels`.

    Returns (loss, probs, dlogits) where dlogits is the gradient of the
    mean loss.
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean() if n else logits.dtype.type(0.0)
    dlogits = probs.copy()
    if n:
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
    return loss, probs, dlogits


# ---------------------------------------------------------------------------
# LSTM cell


def lstm_cell(x, h_prev, c_prev, w, b, packed=None):
    """One LSTM step; gate layout [i, f, o, g] over [x; h_prev] @ w + b.

    Returns (h, c, cache).
    """
    xi = np.concatenate([x, h_prev], axis=1)
    dt = h_prev.shape[1]
    pre = linear(xi, w, b, packed=packed)
    i = sigmoid(pre[:, 0:dt])
    f = sigmoid(pre[:, dt:2 * dt])
    o = sigmoid(pre[:, 2 * dt:3 * dt])
    g = tanh(pre[:, 3 * dt:4 * dt])
    c = f * c_prev + i * g
    tc = tanh(c)
    h = o * tc
    return h, c, (xi, i, f, o, g, c_prev, tc)


def lstm_cell_backward(cache, d_h, d_c, w):
    """Returns (d_x, d_h_prev, d_c_prev, d_w, d_b)."""
    xi, i, f, o, g, c_prev, tc = cache
    dt = i.shape[1]
    d_o = d_h * tc
    d_cc = d_c + d_h * o * (1.0 - tc * tc)
    d_f = d_cc * c_prev
    d_c_prev = d_cc * f
    d_i = d_cc * g
    d_g = d_cc * i
    d_pre = np.concatenate([
        d_i * i * (1.0 - i),
        d_f * f * (1.0 - f),
        d_o * o * (1.0 - o),
        d_g * (1.0 - g * g),
    ], axis=1)
    d_xi, d_w, d_b = linear_backward(xi, w, d_pre)
    x_width = xi.shape[1] - dt
    return d_xi[:, :x_width], d_xi[:, x_width:], d_c_prev, d_w, d_b


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, keep_rate, rng):
    """Inverted-dropout mask with entries in {0, 1/keep_rate}.

    keep_rate=1 returns exact ones without consuming random draws.
    Evaluation-mode callers skip masking entirely.
    """
    if not 0.0 < keep_rate <= 1.0:
        raise ConfigError(f"keep_rate must be in (0, 1], got {keep_rate}")
    if keep_rate == 1.0:
        return np.ones(shape, dtype=_DEFAULT_DTYPE)
    kept = rng.random(shape) < keep_rate
    return kept.astype(_DEFAULT_DTYPE) / _DEFAULT_DTYPE.type(keep_rate)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, mode, running_mean, running_var,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-feature batch normalization over rows of x.

    Train mode normalizes with batch statistics (biased variance), updates
    the running stats in place, and returns (y, cache) for the backward
    pass. Eval mode normalizes with the running stats and returns (y, cache).
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigError(f"batch_norm train mode needs batch >= 2, got {x.shape[0]}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        y = gamma * xhat + beta
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        return y, ("train", xhat, inv_std, gamma)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        return gamma * xhat + beta, ("eval", xhat, inv_std, gamma)
    raise ConfigError(f"unknown batch_norm mode {mode!r}")


def batch_norm_backward(cache, dy):
    """Returns (dx, dgamma, dbeta) for either mode's cache."""
    kind, xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if kind == "eval":
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# initialization


def he_init(rows, cols, rng):
    """Gaussian init with variance 2/fan_in; fan_in is `rows` (the input
    width under the x @ W convention)."""
    if rows < 1 or cols < 1:
        raise ConfigError(f"he_init needs positive dims, got {rows}x{cols}")
    scale = np.sqrt(2.0 / rows)
    return (rng.standard_normal((rows, cols)) * scale).astype(_DEFAULT_DTYPE)


def uniform_init(rows, cols, lo, hi, rng):
    if rows < 1 or cols < 1:
        raise ConfigError(f"uniform_init needs positive dims, got {rows}x{cols}")
    if lo > hi:
        raise ConfigError(f"uniform_init needs lo <= hi, got {lo} > {hi}")
    return rng.uniform(lo, hi, size=(rows, cols)).astype(_DEFAULT_DTYPE)


def zeros(*shape):
    return np.zeros(shape, dtype=_DEFAULT_DTYPE)


def ones(*shape):
    return np.ones(shape, dtype=_DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named parameter tensors with paired gradient and RMS accumulators.

    Shapes of value/grad/rms are identical per entry and names are unique.
    Mutation (gradient accumulation, optimizer updates) is single-writer:
    the training loop owns the store during a step.
    """

    def __init__(self):
        self._entries = {}  # name -> [value, grad, rms]

    def add(self, name, value):
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=_DEFAULT_DTYPE)
        self._entries[name] = [value, np.zeros_like(value), np.zeros_like(value)]
        return value

    def names(self):
        return list(self._entries.keys())

    def __contains__(self, name):
        return name in self._entries

    def value(self, name):
        return self._entries[name][0]

    def grad(self, name):
        return self._entries[name][1]

    def rms(self, name):
        return self._entries[name][2]

    def set_value(self, name, value):
        entry = self._entries[name]
        if value.shape != entry[0].shape:
            raise ShapeError(f"shape mismatch for {name!r}: {value.shape} vs {entry[0].shape}")
        entry[0][...] = value

    def accumulate(self, name, grad):
        entry = self._entries[name]
        if grad.shape != entry[0].shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        entry[1] += grad

    def zero_grads(self):
        for entry in self._entries.values():
            entry[1][...] = 0.0

    def l2_norm_sq(self):
        return sum(float(np.sum(e[0] * e[0])) for e in self._entries.values())

    def items(self):
        return [(name, e[0], e[1], e[2]) for name, e in self._entries.items()]

    def num_params(self):
        return sum(e[0].size for e in self._entries.values())
