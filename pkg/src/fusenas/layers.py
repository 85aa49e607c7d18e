"""Minimal float64 layer primitives with hand-written backward passes.

Activations are NHWC arrays (batch, height, width, channels).  Every
parameterised layer keeps ``params`` and ``grads`` dicts with matching
shapes; ``backward`` accumulates into ``grads`` (call ``zero_grads``
between steps) and returns the gradient w.r.t. the layer input.
"""

from __future__ import annotations

import numpy as np


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class ParamLayer:
    """Base for layers that own parameters."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grads(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


class Dense(ParamLayer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.params["W"] = he_uniform(rng, (in_features, out_features), in_features)
        self.params["b"] = np.zeros(out_features)
        self.zero_grads()
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.grads["W"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"].T


def _extract_patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col for stride-1 same-padding kxk kernels: (B,H,W,C) -> (B,H,W,k*k*C)."""
    b, h, w, c = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, h, w, k * k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = x[:, i:i + h, j:j + w, :]
    return cols.reshape(b, h, w, k * k * c)


def _scatter_patches(dpatches: np.ndarray, shape, k: int) -> np.ndarray:
    """Adjoint of _extract_patches."""
    b, h, w, c = shape
    p = k // 2
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    dp = dpatches.reshape(b, h, w, k, k, c)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dp[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w, :] if p else dxp


class Conv2D(ParamLayer):
    """Stride-1 same-padding convolution (kernel 3 or 1).

    Runs one GEMM per kernel offset against a contiguous copy of the shifted
    input, which profiles faster here than a single im2col GEMM because the
    feature maps are tiny and the patch gather dominates.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        fan_in = kernel * kernel * in_ch
        self.params["W"] = he_uniform(rng, (fan_in, out_ch), fan_in)
        self.params["b"] = np.zeros(out_ch)
        self.zero_grads()
        self._patches = None
        self._xshape = None

    def _offset_weights(self):
        k = self.kernel
        return self.params["W"].reshape(k * k, self.in_ch, self.out_ch)

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        self._xshape = x.shape
        k = self.kernel
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        self._patches = [
            np.ascontiguousarray(xp[:, i:i + h, j:j + w, :]).reshape(b * h * w, c)
            for i in range(k) for j in range(k)
        ]
        out = np.empty((b * h * w, self.out_ch))
        out[:] = self.params["b"]
        for patch, wk in zip(self._patches, self._offset_weights()):
            out += patch @ wk
        return out.reshape(b, h, w, self.out_ch)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, h, w, c = self._xshape
        k = self.kernel
        p = k // 2
        dflat = dy.reshape(b * h * w, self.out_ch)
        self.grads["b"] += dflat.sum(axis=0)
        gw = self.grads["W"].reshape(k * k, c, self.out_ch)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
        for idx, (patch, wk) in enumerate(zip(self._patches, self._offset_weights())):
            i, j = divmod(idx, k)
            gw[idx] += patch.T @ dflat
            dxp[:, i:i + h, j:j + w, :] += (dflat @ wk.T).reshape(b, h, w, c)
        return dxp[:, p:p + h, p:p + w, :] if p else dxp


class LocallyConnected2D(ParamLayer):
    """3x3 same-padding layer with unshared kernels per spatial site."""

    def __init__(self, height: int, width: int, in_ch: int, out_ch: int,
                 rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        self.h, self.w, self.in_ch, self.out_ch, self.kernel = height, width, in_ch, out_ch, kernel
        fan_in = kernel * kernel * in_ch
        self.params["W"] = he_uniform(rng, (height, width, fan_in, out_ch), fan_in)
        self.params["b"] = np.zeros((height, width, out_ch))
        self.zero_grads()
        self._sites = None
        self._xshape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1:3] != (self.h, self.w):
            raise ValueError(f"expected {self.h}x{self.w} input, got {x.shape[1]}x{x.shape[2]}")
        self._xshape = x.shape
        b = x.shape[0]
        k2c = self.kernel * self.kernel * self.in_ch
        patches = _extract_patches(x, self.kernel)
        # site-major batched matmul: (HW, B, K) @ (HW, K, O)
        self._sites = np.ascontiguousarray(
            patches.reshape(b, self.h * self.w, k2c).transpose(1, 0, 2))
        out = self._sites @ self.params["W"].reshape(self.h * self.w, k2c, self.out_ch)
        return out.transpose(1, 0, 2).reshape(b, self.h, self.w, self.out_ch) + self.params["b"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b = dy.shape[0]
        hw = self.h * self.w
        k2c = self.kernel * self.kernel * self.in_ch
        dsites = np.ascontiguousarray(
            dy.reshape(b, hw, self.out_ch).transpose(1, 0, 2))  # (HW, B, O)
        wflat = self.params["W"].reshape(hw, k2c, self.out_ch)
        self.grads["W"] += (self._sites.transpose(0, 2, 1) @ dsites).reshape(self.grads["W"].shape)
        self.grads["b"] += dy.sum(axis=0)
        dpatches = (dsites @ wflat.transpose(0, 2, 1)).transpose(1, 0, 2)  # (B, HW, K)
        return _scatter_patches(dpatches.reshape(b, self.h, self.w, k2c),
                                self._xshape, self.kernel)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


class AdaptiveAvgPool:
    """Average-pool to a fixed output grid; identity when shapes match."""

    def __init__(self, out_h: int, out_w: int):
        self.out_h, self.out_w = out_h, out_w
        self._xshape = None

    @staticmethod
    def _bins(n: int, m: int):
        return [(int(np.floor(i * n / m)), int(np.ceil((i + 1) * n / m))) for i in range(m)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._xshape = x.shape
        b, h, w, c = x.shape
        if (h, w) == (self.out_h, self.out_w):
            return x
        out = np.empty((b, self.out_h, self.out_w, c))
        for i, (si, ei) in enumerate(self._bins(h, self.out_h)):
            for j, (sj, ej) in enumerate(self._bins(w, self.out_w)):
                out[:, i, j, :] = x[:, si:ei, sj:ej, :].mean(axis=(1, 2))
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, h, w, c = self._xshape
        if (h, w) == (self.out_h, self.out_w):
            return dy
        dx = np.zeros(self._xshape)
        for i, (si, ei) in enumerate(self._bins(h, self.out_h)):
            for j, (sj, ej) in enumerate(self._bins(w, self.out_w)):
                dx[:, si:ei, sj:ej, :] += dy[:, i:i + 1, j:j + 1, :] / ((ei - si) * (ej - sj))
        return dx


class GlobalAvgPool:
    def __init__(self):
        self._xshape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._xshape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, h, w, c = self._xshape
        return np.broadcast_to(dy[:, None, None, :] / (h * w), self._xshape).copy()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Architecture blocks
# ---------------------------------------------------------------------------

class Block:
    """Common interface: forward/backward plus named parameter holders."""

    out_channels: int

    def param_items(self):
        return []

    def zero_grads(self):
        for _, layer in self.param_items():
            layer.zero_grads()


class OrdinaryConvBlock(Block):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv = Conv2D(in_ch, out_ch, rng)
        self.relu = ReLU()
        self.out_channels = out_ch

    def forward(self, x):
        return self.relu.forward(self.conv.forward(x))

    def backward(self, dy):
        return self.conv.backward(self.relu.backward(dy))

    def param_items(self):
        return [("conv", self.conv)]


class ResidualConvBlock(Block):
    """conv-relu-conv plus shortcut (1x1 conv when channel counts differ)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv1 = Conv2D(in_ch, out_ch, rng)
        self.relu1 = ReLU()
        self.conv2 = Conv2D(out_ch, out_ch, rng)
        self.shortcut = None if in_ch == out_ch else Conv2D(in_ch, out_ch, rng, kernel=1)
        self.relu_out = ReLU()
        self.out_channels = out_ch

    def forward(self, x):
        h = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        s = x if self.shortcut is None else self.shortcut.forward(x)
        return self.relu_out.forward(h + s)

    def backward(self, dy):
        dz = self.relu_out.backward(dy)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(dz)))
        dx += dz if self.shortcut is None else self.shortcut.backward(dz)
        return dx

    def param_items(self):
        items = [("conv1", self.conv1), ("conv2", self.conv2)]
        if self.shortcut is not None:
            items.append(("shortcut", self.shortcut))
        return items


class LocalConvBlock(Block):
    def __init__(self, height: int, width: int, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.local = LocallyConnected2D(height, width, in_ch, out_ch, rng)
        self.relu = ReLU()
        self.out_channels = out_ch

    def forward(self, x):
        return self.relu.forward(self.local.forward(x))

    def backward(self, dy):
        return self.local.backward(self.relu.backward(dy))

    def param_items(self):
        return [("local", self.local)]


class LocalResidualConvBlock(Block):
    """Residual pair of locally connected layers with a conv shortcut."""

    def __init__(self, height: int, width: int, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.local1 = LocallyConnected2D(height, width, in_ch, out_ch, rng)
        self.relu1 = ReLU()
        self.local2 = LocallyConnected2D(height, width, out_ch, out_ch, rng)
        self.shortcut = None if in_ch == out_ch else Conv2D(in_ch, out_ch, rng, kernel=1)
        self.relu_out = ReLU()
        self.out_channels = out_ch

    def forward(self, x):
        h = self.local2.forward(self.relu1.forward(self.local1.forward(x)))
        s = x if self.shortcut is None else self.shortcut.forward(x)
        return self.relu_out.forward(h + s)

    def backward(self, dy):
        dz = self.relu_out.backward(dy)
        dx = self.local1.backward(self.relu1.backward(self.local2.backward(dz)))
        dx += dz if self.shortcut is None else self.shortcut.backward(dz)
        return dx

    def param_items(self):
        items = [("local1", self.local1), ("local2", self.local2)]
        if self.shortcut is not None:
            items.append(("shortcut", self.shortcut))
        return items


class ChannelAttentionBlock(Block, ParamLayer):
    """Gate each channel by a shared avg/max-pooled bottleneck MLP."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        ParamLayer.__init__(self)
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.out_channels = channels
        self.params["W1"] = he_uniform(rng, (channels, hidden), channels)
        self.params["b1"] = np.zeros(hidden)
        self.params["W2"] = he_uniform(rng, (hidden, channels), hidden)
        self.params["b2"] = np.zeros(channels)
        self.zero_grads()
        self._cache = None

    def _mlp_forward(self, v):
        h_pre = v @ self.params["W1"] + self.params["b1"]
        h = np.maximum(h_pre, 0.0)
        return h_pre, h, h @ self.params["W2"] + self.params["b2"]

    def _mlp_backward(self, dz, v, h_pre, h):
        self.grads["W2"] += h.T @ dz
        self.grads["b2"] += dz.sum(axis=0)
        dh = (dz @ self.params["W2"].T) * (h_pre > 0)
        self.grads["W1"] += v.T @ dh
        self.grads["b1"] += dh.sum(axis=0)
        return dh @ self.params["W1"].T

    def forward(self, x):
        b, h, w, c = x.shape
        avg = x.mean(axis=(1, 2))
        flat = x.reshape(b, h * w, c)
        argmax = flat.argmax(axis=1)
        mx = np.take_along_axis(flat, argmax[:, None, :], axis=1)[:, 0, :]
        a_pre, a_hid, za = self._mlp_forward(avg)
        m_pre, m_hid, zm = self._mlp_forward(mx)
        gate = _sigmoid(za + zm)
        self._cache = (x, avg, mx, a_pre, a_hid, m_pre, m_hid, gate, argmax)
        return x * gate[:, None, None, :]

    def backward(self, dy):
        x, avg, mx, a_pre, a_hid, m_pre, m_hid, gate, argmax = self._cache
        b, h, w, c = x.shape
        dgate = (dy * x).sum(axis=(1, 2))
        dx = dy * gate[:, None, None, :]
        dz = dgate * gate * (1.0 - gate)
        davg = self._mlp_backward(dz, avg, a_pre, a_hid)
        dmx = self._mlp_backward(dz, mx, m_pre, m_hid)
        dx += davg[:, None, None, :] / (h * w)
        dflat = np.zeros((b, h * w, c))
        np.put_along_axis(dflat, argmax[:, None, :], dmx[:, None, :], axis=1)
        dx += dflat.reshape(b, h, w, c)
        return dx

    def param_items(self):
        return [("mlp", self)]

    def zero_grads(self):
        ParamLayer.zero_grads(self)


class SpatialAttentionBlock(Block):
    """Gate each spatial site by a conv over channel-wise mean and max maps."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.out_channels = channels
        self.conv = Conv2D(2, 1, rng)
        self._cache = None

    def forward(self, x):
        mean_c = x.mean(axis=3, keepdims=True)
        argmax = x.argmax(axis=3)
        max_c = np.take_along_axis(x, argmax[..., None], axis=3)
        s = self.conv.forward(np.concatenate([mean_c, max_c], axis=3))
        gate = _sigmoid(s)
        self._cache = (x, gate, argmax)
        return x * gate

    def backward(self, dy):
        x, gate, argmax = self._cache
        c = x.shape[3]
        dgate = (dy * x).sum(axis=3, keepdims=True)
        dx = dy * gate
        ds = dgate * gate * (1.0 - gate)
        dcat = self.conv.backward(ds)
        dx += dcat[..., 0:1] / c
        dmax = np.zeros_like(x)
        np.put_along_axis(dmax, argmax[..., None], dcat[..., 1:2], axis=3)
        dx += dmax
        return dx

    def param_items(self):
        return [("conv", self.conv)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.clip(p, 1e-12, None)).mean())


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the logits."""
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return d / len(labels)
