"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Inputs are C-contiguous float64 arrays; 2-D arrays are
``(rows, n)`` and the attention kernels take ``(N, L, dh)`` stacks where
``N`` folds batch and heads together.
"""

import numpy as np

GELU_C = 0.7978845608  # sqrt(2/pi), pinned
GELU_A = 0.044715


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(gy, xhat, rstd, gamma):
    ghat = gy * gamma
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    gx = (ghat - m1 - xhat * m2) * rstd[:, None]
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    inner = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, gy):
    inner = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def attention_fwd(q, k, v):
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.matmul(q, k.transpose(0, 2, 1)) * scale
    p = softmax_fwd(s.reshape(-1, s.shape[-1])).reshape(s.shape)
    return np.matmul(p, v), p


def attention_bwd(q, k, v, p, gout):
    scale = 1.0 / np.sqrt(q.shape[-1])
    gv = np.matmul(p.transpose(0, 2, 1), gout)
    gp = np.matmul(gout, v.transpose(0, 2, 1))
    gs = softmax_bwd(p, gp) * scale
    gq = np.matmul(gs, k)
    gk = np.matmul(gs.transpose(0, 2, 1), q)
    return gq, gk, gv
