"""Differentiable layer primitives with hand-written backward passes.

Each layer caches whatever the backward pass needs during forward. Backward
returns the gradient w.r.t. the input and accumulates parameter gradients
into ``self.grads`` (same keys as ``self.params``).

Convolution is computed with a shifted-window loop whose per-element
accumulation order is (input channel, ky, kx); the naive reference in the
test suite uses the same order so results are bit-identical.
"""

import numpy as np

from .tensor import ShapeError, check_nchw


class Layer:
    """Base class: parameter/gradient bookkeeping and the fwd/bwd contract."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _register(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(
                f"{type(self).__name__}.backward called without a cached forward"
            )
        return self._cache


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Layer):
    """2-D convolution with square kernel, optional channel groups.

    Weights are shaped (out_channels, in_channels // groups, k, k).
    ``depthwise=True`` is the g == in == out special case.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 groups=1, depthwise=False, bias=False, rng=None):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if (pad == 1) != (kernel == 3):
            raise ValueError("pad must be 1 exactly when kernel is 3")
        if depthwise:
            if not (groups == in_channels == out_channels):
                raise ValueError(
                    "depthwise requires groups == in_channels == out_channels"
                )
        if in_channels % groups or out_channels % groups:
            raise ValueError(
                f"channels ({in_channels}->{out_channels}) not divisible by "
                f"groups={groups}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.groups = groups
        self.depthwise = depthwise
        wshape = (out_channels, in_channels // groups, kernel, kernel)
        if rng is None:
            w = np.zeros(wshape)
        else:
            # fan-out initialization: var = 2 / (k^2 * out_channels)
            std = np.sqrt(2.0 / (kernel * kernel * out_channels))
            w = rng.normal(0.0, std, size=wshape)
        self._register("weight", w)
        if bias:
            self._register("bias", np.zeros(out_channels))

    def forward(self, x, train=False):
        check_nchw(x)
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        w = self.params["weight"]
        out = conv2d_raw(x, w, self.stride, self.pad, self.groups)
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        self._cache = x
        return out

    def backward(self, grad_out):
        x = self._need_cache()
        w = self.params["weight"]
        grad_x, grad_w = conv2d_backward_raw(
            x, w, grad_out, self.stride, self.pad, self.groups
        )
        self.grads["weight"] += grad_w
        if "bias" in self.params:
            self.grads["bias"] += grad_out.sum(axis=(0, 2, 3))
        return grad_x


def conv2d_raw(x, w, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, cout, oh, ow))
    opg = cout // groups
    for g in range(groups):
        osl = slice(g * opg, (g + 1) * opg)
        for ci in range(cpg):
            xc = xp[:, g * cpg + ci]
            for ky in range(k):
                for kx in range(k):
                    win = xc[:, ky:ky + stride * oh:stride,
                              kx:kx + stride * ow:stride]
                    out[:, osl] += win[:, None] * w[osl, ci, ky, kx][None, :, None, None]
    return out


def conv2d_backward_raw(x, w, grad_out, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    oh, ow = grad_out.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    opg = cout // groups
    for g in range(groups):
        osl = slice(g * opg, (g + 1) * opg)
        go = grad_out[:, osl]
        for ci in range(cpg):
            xc = xp[:, g * cpg + ci]
            gxc = gxp[:, g * cpg + ci]
            for ky in range(k):
                for kx in range(k):
                    hsl = slice(ky, ky + stride * oh, stride)
                    wsl = slice(kx, kx + stride * ow, stride)
                    win = xc[:, hsl, wsl]
                    gw[osl, ci, ky, kx] += np.einsum("nohw,nhw->o", go, win)
                    gxc[:, hsl, wsl] += np.einsum(
                        "nohw,o->nhw", go, w[osl, ci, ky, kx]
                    )
    if pad:
        grad_x = gxp[:, :, pad:-pad, pad:-pad]
    else:
        grad_x = gxp
    return grad_x, gw


class BatchNorm2d(Layer):
    """Per-channel batch normalization with train / eval / identity modes.

    Identity mode passes the input through untouched; the analysis module
    uses it so structural perturbation tests are not cancelled by
    normalization.
    """

    def __init__(self, channels, epsilon=1e-5, momentum=0.1, mode="train"):
        super().__init__()
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must be in (0, 1)")
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.mode = mode
        self._register("gamma", np.ones(channels))
        self._register("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x, train=False):
        check_nchw(x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        if self.mode == "identity":
            self._cache = ("identity",)
            return x
        gamma = self.params["gamma"]
        beta = self.params["beta"]
        use_batch_stats = train and self.mode == "train"
        if use_batch_stats:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise ShapeError(
                    "train-mode batch norm needs at least 2 elements per channel"
                )
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (
                (1 - self.momentum) * self.running_mean + self.momentum * mean
            )
            self.running_var = (
                (1 - self.momentum) * self.running_var + self.momentum * var
            )
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            self._cache = ("train", xhat, inv_std, m)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
            xhat = (x - self.running_mean[None, :, None, None]) \
                * inv_std[None, :, None, None]
            self._cache = ("eval", xhat, inv_std)
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def backward(self, grad_out):
        cache = self._need_cache()
        if cache[0] == "identity":
            return grad_out
        gamma = self.params["gamma"]
        if cache[0] == "eval":
            _, xhat, inv_std = cache
            self.grads["gamma"] += (grad_out * xhat).sum(axis=(0, 2, 3))
            self.grads["beta"] += grad_out.sum(axis=(0, 2, 3))
            return grad_out * (gamma * inv_std)[None, :, None, None]
        _, xhat, inv_std, m = cache
        self.grads["gamma"] += (grad_out * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += grad_out.sum(axis=(0, 2, 3))
        g = grad_out * gamma[None, :, None, None]
        sum_g = g.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        grad_x = (inv_std[None, :, None, None] / m) * (
            m * g - sum_g - xhat * sum_gx
        )
        return grad_x


class ReLU(Layer):
    """max(0, x); gradient at exactly 0 is defined as 0."""

    def forward(self, x, train=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad_out):
        mask = self._need_cache()
        return np.where(mask, grad_out, 0.0)


class Sigmoid(Layer):
    def forward(self, x, train=False):
        out = 1.0 / (1.0 + np.exp(-x))
        self._cache = out
        return out

    def backward(self, grad_out):
        out = self._need_cache()
        return grad_out * out * (1.0 - out)


class ChannelShuffle(Layer):
    """Reshape-(g, c/g), transpose, flatten channel permutation."""

    def __init__(self, groups):
        super().__init__()
        self.groups = groups

    @staticmethod
    def permutation(channels, groups):
        """Output-position -> input-channel index map."""
        if channels % groups:
            raise ShapeError(f"channels={channels} not divisible by groups={groups}")
        n = channels // groups
        return np.arange(channels).reshape(groups, n).T.reshape(-1)

    def forward(self, x, train=False):
        check_nchw(x)
        c = x.shape[1]
        perm = self.permutation(c, self.groups)
        self._cache = (c, perm)
        return x[:, perm]

    def backward(self, grad_out):
        c, perm = self._need_cache()
        inv = np.empty(c, dtype=int)
        inv[perm] = np.arange(c)
        return grad_out[:, inv]


class MaxPool3x3s2(Layer):
    """3x3 max pooling, stride 2, pad 1 (halves spatial dims, ceil)."""

    def forward(self, x, train=False):
        check_nchw(x)
        n, c, h, w = x.shape
        oh = conv_out_size(h, 3, 2, 1)
        ow = conv_out_size(w, 3, 2, 1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)),
                    constant_values=-np.inf)
        out = np.full((n, c, oh, ow), -np.inf)
        for ky in range(3):
            for kx in range(3):
                win = xp[:, :, ky:ky + 2 * oh:2, kx:kx + 2 * ow:2]
                np.maximum(out, win, out=out)
        self._cache = (x.shape, xp, out)
        return out

    def backward(self, grad_out):
        shape, xp, out = self._need_cache()
        oh, ow = out.shape[2:]
        gxp = np.zeros_like(xp)
        claimed = np.zeros_like(out, dtype=bool)
        for ky in range(3):
            for kx in range(3):
                hsl = slice(ky, ky + 2 * oh, 2)
                wsl = slice(kx, kx + 2 * ow, 2)
                win = xp[:, :, hsl, wsl]
                hit = (win == out) & ~claimed
                claimed |= hit
                gxp[:, :, hsl, wsl] += np.where(hit, grad_out, 0.0)
        return gxp[:, :, 1:-1, 1:-1]


class AvgPool3x3s2(Layer):
    """3x3 average pooling, stride 2, pad 1; padded taps count (divide by 9)."""

    def forward(self, x, train=False):
        check_nchw(x)
        n, c, h, w = x.shape
        oh = conv_out_size(h, 3, 2, 1)
        ow = conv_out_size(w, 3, 2, 1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((n, c, oh, ow))
        for ky in range(3):
            for kx in range(3):
                out += xp[:, :, ky:ky + 2 * oh:2, kx:kx + 2 * ow:2]
        out /= 9.0
        self._cache = (x.shape, (oh, ow))
        return out

    def backward(self, grad_out):
        shape, (oh, ow) = self._need_cache()
        gxp = np.zeros((shape[0], shape[1], shape[2] + 2, shape[3] + 2))
        for ky in range(3):
            for kx in range(3):
                gxp[:, :, ky:ky + 2 * oh:2, kx:kx + 2 * ow:2] += grad_out
        return gxp[:, :, 1:-1, 1:-1] / 9.0


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        check_nchw(x)
        self._cache = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad_out):
        n, c, h, w = self._need_cache()
        return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()


class Linear(Layer):
    """Fully-connected classifier head on (n, c, 1, 1) inputs."""

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / in_features),
                           size=(out_features, in_features))
        self._register("weight", w)
        self._register("bias", np.zeros(out_features))

    def forward(self, x, train=False):
        check_nchw(x)
        if x.shape[2:] != (1, 1):
            raise ShapeError(f"expected 1x1 spatial dims, got {x.shape[2:]}")
        if x.shape[1] != self.in_features:
            raise ShapeError(
                f"expected {self.in_features} features, got {x.shape[1]}"
            )
        flat = x[:, :, 0, 0]
        self._cache = flat
        return flat @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        flat = self._need_cache()
        self.grads["weight"] += grad_out.T @ flat
        self.grads["bias"] += grad_out.sum(axis=0)
        grad_flat = grad_out @ self.params["weight"]
        return grad_flat[:, :, None, None]


def activation(x, kind):
    """Stateless activation helper (relu or sigmoid)."""
    if kind == "relu":
        return np.where(x > 0, x, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {kind!r}")
