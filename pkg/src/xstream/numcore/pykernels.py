"""NumPy implementations of the hot kernels.

Portable fallback for the compiled extension in ``_ckernels``. Both modules
expose the same functions with the same contracts; ``kernels`` picks one at
import time. Arrays are C-contiguous float32 or float64; masks are uint8
(1 = attend allowed).
"""

import numpy as np

BACKEND_NAME = "numpy"


def softmax_fwd(x):
    """Row softmax with max subtraction. x: (R, C) -> y: (R, C)."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y, gy):
    """dL/dx for y = softmax(x): y * (gy - sum(gy * y))."""
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, gain, bias, eps):
    """Per-row layernorm. Returns (y, mean, rstd); mean/rstd kept for backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, mean[..., 0].copy(), rstd[..., 0].copy()


def layernorm_bwd(x, gain, mean, rstd, gy):
    """Gradients (gx, ggain, gbias) for layernorm_fwd."""
    n = x.shape[-1]
    xhat = (x - mean[..., None]) * rstd[..., None]
    gxhat = gy * gain
    gx = rstd[..., None] * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    ggain = (gy * xhat).reshape(-1, n).sum(axis=0)
    gbias = gy.reshape(-1, n).sum(axis=0)
    return gx, ggain, gbias


def gelu_fwd(x):
    """Tanh-approximation GELU."""
    c = np.sqrt(2.0 / np.pi).astype(x.dtype) if hasattr(x, "dtype") else np.sqrt(2.0 / np.pi)
    t = np.tanh(c * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t)


def gelu_bwd(x, gy):
    """dL/dx for the tanh-approximation GELU."""
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = c * (1.0 + 3 * 0.044715 * x**2)
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return (gy * dydx).astype(x.dtype)


def rope_fwd(x, cos, sin):
    """Rotate adjacent even/odd pairs of x by per-token angles.

    x: (H, T, D), cos/sin: (T, D/2). Pair i is (x[..., 2i], x[..., 2i+1]).
    """
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    y = np.empty_like(x)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos
    return y


def rope_bwd(gy, cos, sin):
    """Adjoint of rope_fwd: rotation by the negated angles."""
    return rope_fwd(gy, cos, -sin)


def attention_fwd(q, k, v, mask, scale):
    """Masked multi-head attention.

    q: (H, Tq, D), k/v: (H, Tk, D), mask: (Tq, Tk) uint8 shared across heads.
    Returns (out (H, Tq, D), probs (H, Tq, Tk)). Rows with no allowed key
    are the caller's bug; they produce NaN.
    """
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    neg = np.asarray(-np.inf, dtype=scores.dtype)
    scores = np.where(mask.astype(bool), scores, neg)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, v)
    return out, probs


def attention_bwd(q, k, v, probs, gout, scale):
    """Gradients (gq, gk, gv) for attention_fwd. Mask is implicit in probs."""
    gv = np.matmul(probs.transpose(0, 2, 1), gout)
    gprobs = np.matmul(gout, v.transpose(0, 2, 1))
    dot = (gprobs * probs).sum(axis=-1, keepdims=True)
    gscores = probs * (gprobs - dot)
    gq = np.matmul(gscores, k) * scale
    gk = np.matmul(gscores.transpose(0, 2, 1), q) * scale
    return gq, gk, gv
