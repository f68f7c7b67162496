"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Arrays are float64; 2-D kernels operate on rows (last axis).
"""
import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def layernorm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_backward(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    n = xhat.shape[1]
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(g, x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _window(tau):
    left = (tau - 1) // 2
    return left, tau - 1 - left


def moving_average(x, tau):
    """Centered moving average along axis 1 of a [B, T, D] array, edge-replicated."""
    left, right = _window(tau)
    xp = np.concatenate(
        [np.repeat(x[:, :1], left, axis=1), x, np.repeat(x[:, -1:], right, axis=1)], axis=1
    )
    n = x.shape[1]
    acc = xp[:, :n].copy()
    for k in range(1, tau):
        acc += xp[:, k:k + n]
    return acc / tau


def moving_average_backward(g, tau):
    left, right = _window(tau)
    b, n, d = g.shape
    gp = np.zeros((b, n + tau - 1, d))
    gs = g / tau
    for k in range(tau):
        gp[:, k:k + n] += gs
    out = gp[:, left:left + n].copy()
    out[:, 0] += gp[:, :left].sum(axis=1)
    out[:, -1] += gp[:, left + n:].sum(axis=1)
    return out
