"""Small float64 layer kit with hand-written forward/backward passes.

Activations use channels-last layout ``(n, h, w, c)`` so every convolution
reduces to plain GEMMs (one per kernel offset). Forward passes return
``(output, cache)`` and backward passes take ``(grad_output, cache)`` and
return ``(grad_input, param_grads)``; layers hold parameters but no
activation state, so the same layer can run several forward passes per step.
"""

from __future__ import annotations

import numpy as np


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1 (same-size output)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.w = he_normal(rng, (3, 3, in_ch, out_ch), fan_in=9 * in_ch)
        self.b = np.zeros(out_ch)

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: np.ndarray):
        n, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.tile(self.b, (n, h, w, 1))
        for dy in range(3):
            for dx in range(3):
                window = xp[:, dy : dy + h, dx : dx + w, :]
                out += window.reshape(-1, x.shape[3]).dot(self.w[dy, dx]).reshape(n, h, w, -1)
        return out, xp

    def backward(self, dout: np.ndarray, cache):
        xp = cache
        n, h, w, _ = dout.shape
        in_ch = xp.shape[3]
        dw = np.empty_like(self.w)
        dxp = np.zeros_like(xp)
        dflat = dout.reshape(-1, dout.shape[3])
        for dy in range(3):
            for dx in range(3):
                window = xp[:, dy : dy + h, dx : dx + w, :].reshape(-1, in_ch)
                dw[dy, dx] = window.T.dot(dflat)
                dxp[:, dy : dy + h, dx : dx + w, :] += dflat.dot(self.w[dy, dx].T).reshape(n, h, w, in_ch)
        db = dout.sum(axis=(0, 1, 2))
        return dxp[:, 1:-1, 1:-1, :], {"w": dw, "b": db}


class MaxPool2x2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        hh, ww = h // 2, w // 2
        blocks = x[:, : 2 * hh, : 2 * ww, :].reshape(n, hh, 2, ww, 2, c)
        stacked = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, hh, ww, c, 4)
        # First-maximum routing keeps gradients deterministic under ties.
        winners = stacked.argmax(axis=-1)
        out = np.take_along_axis(stacked, winners[..., None], axis=-1)[..., 0]
        return out, (x.shape, winners)

    def backward(self, dout: np.ndarray, cache):
        x_shape, winners = cache
        n, h, w, c = x_shape
        hh, ww = h // 2, w // 2
        dstack = np.zeros((n, hh, ww, c, 4))
        np.put_along_axis(dstack, winners[..., None], dout[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, : 2 * hh, : 2 * ww, :] = (
            dstack.reshape(n, hh, ww, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * hh, 2 * ww, c)
        )
        return dx, {}


class Relu:
    def forward(self, x: np.ndarray):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dout: np.ndarray, cache):
        return dout * cache, {}


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = he_normal(rng, (n_in, n_out), fan_in=n_in)
        self.b = np.zeros(n_out)

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: np.ndarray):
        return x.dot(self.w) + self.b, x

    def backward(self, dout: np.ndarray, cache):
        x = cache
        return dout.dot(self.w.T), {"w": x.T.dot(dout), "b": dout.sum(axis=0)}


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """Overflow-safe log(1 + exp(x))."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax via the log-sum-exp trick."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
