"""Dense CNN layers with explicit reverse-mode gradients (numpy, CPU).

Every layer caches what its backward pass needs only when forward runs with
train=True; eval-mode forwards are pure. Convolution is im2col + one GEMM,
its input gradient is a strided col2im accumulation, so the heavy work stays
inside BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..shuffle import BlockSpec, apply_block_shuffle, shuffle_vjp


class NumericsError(FloatingPointError):
    """A non-finite value appeared in an engine computation."""


class Layer:
    """Base layer: parameter-free identity-like interface."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that still belongs in checkpoints (BN running stats)."""
        return {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Padded (N,C,H,W) -> ((C*k*k, N*OH*OW) patch matrix, OH, OW).

    The channel-major column layout keeps the materializing copy (and the
    matching col2im accumulation) streaming through memory; the cheap
    (N,C)-swap transposes happen on the much smaller activation tensors.
    """
    n, c, h, w = xp.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (c, k, k, n, oh, ow), (s1, s2, s3, s0, s2 * stride, s3 * stride))
    return win.reshape(c * k * k, n * oh * ow), oh, ow


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add (C*k*k, N*OH*OW) patch gradients back onto the padded input."""
    n, c, hp, wp = xp_shape
    dc = dcols.reshape(c, k, k, n, oh, ow)
    dxp_cn = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp_cn[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dc[
                :, ki, kj
            ]
    return np.ascontiguousarray(dxp_cn.swapaxes(0, 1))


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 bias: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype) if bias else None
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.skip_input_grad = False  # set on the first layer; nothing consumes its dx
        self.gw = None
        self.gb = None
        self._cache = None
        self._scratch: dict[str, np.ndarray] = {}

    def _ws(self, key: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        """Reusable scratch buffer; training reallocates these shapes every step."""
        buf = self._scratch.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._scratch[key] = buf
        return buf

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def grads(self):
        g = {"weight": self.gw}
        if self.bias is not None:
            g["bias"] = self.gb
        return g

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.weight.shape[1]:
            raise ValueError(f"conv expects {self.weight.shape[1]} input channels, got {c}")
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"conv output collapsed for input {in_shape}")
        return (self.weight.shape[0], oh, ow)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"conv2d: bad input shape {x.shape}")
        if self.pad:
            p = self.pad
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        n, c, h, w = x.shape
        k, stride = self.kernel, self.stride
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        s0, s1, s2, s3 = x.strides
        win = as_strided(x, (c, k, k, n, oh, ow), (s1, s2, s3, s0, s2 * stride, s3 * stride))
        # scratch reuse only while training: eval forwards stay re-entrant
        ws = self._ws if train else (lambda key, shape, dt: np.empty(shape, dt))
        cols = ws("cols", (c * k * k, n * oh * ow), x.dtype)
        np.copyto(cols.reshape(win.shape), win)
        wmat = self.weight.reshape(self.weight.shape[0], -1)
        y2 = np.matmul(wmat, cols, out=ws("y2", (wmat.shape[0], cols.shape[1]), x.dtype))
        if self.bias is not None:
            y2 += self.bias[:, None]
        y = np.ascontiguousarray(y2.reshape(-1, n, oh, ow).swapaxes(0, 1))
        if train:
            self._cache = (cols, x.shape, oh, ow)
        return y

    def backward(self, g_out):
        cols, xp_shape, oh, ow = self._cache
        out_ch = self.weight.shape[0]
        k = self.kernel
        n = g_out.shape[0]
        gmat = self._ws("gmat", (out_ch, n * oh * ow), g_out.dtype)
        np.copyto(gmat.reshape(out_ch, n, oh, ow), g_out.swapaxes(0, 1))
        gwt = np.matmul(cols, gmat.T, out=self._ws("gwt", (cols.shape[0], out_ch), g_out.dtype))
        self.gw = np.ascontiguousarray(gwt.T).reshape(self.weight.shape)
        if self.bias is not None:
            self.gb = gmat.sum(axis=1)
        if self.skip_input_grad:
            return None
        if self.stride == 1 and k - 1 - self.pad >= 0:
            # stride-1 input gradient as a correlation with the flipped kernel:
            # pad g by k-1-pad and run one more im2col GEMM instead of col2im
            q = k - 1 - self.pad
            gp = np.pad(g_out, ((0, 0), (0, 0), (q, q), (q, q))) if q else g_out
            _, _, gph, gpw = gp.shape
            gh, gw_ = gph - k + 1, gpw - k + 1
            t0, t1, t2, t3 = gp.strides
            gwin = as_strided(gp, (out_ch, k, k, n, gh, gw_), (t1, t2, t3, t0, t2, t3))
            gcols = self._ws("gcols", (out_ch * k * k, n * gh * gw_), g_out.dtype)
            np.copyto(gcols.reshape(gwin.shape), gwin)
            wrot = np.ascontiguousarray(self.weight[:, :, ::-1, ::-1].swapaxes(0, 1))
            in_ch = wrot.shape[0]
            dx2 = np.matmul(wrot.reshape(in_ch, -1), gcols,
                            out=self._ws("dx2", (in_ch, gcols.shape[1]), g_out.dtype))
            return np.ascontiguousarray(dx2.reshape(-1, n, gh, gw_).swapaxes(0, 1))
        dcols = np.matmul(self.weight.reshape(out_ch, -1).T, gmat,
                          out=self._ws("dcols", (cols.shape[0], gmat.shape[1]), g_out.dtype))
        dxp = _col2im(dcols, xp_shape, self.kernel, self.stride, oh, ow)
        if self.pad:
            p = self.pad
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class BatchNorm2d(Layer):
    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.gamma = np.ones(ch, dtype=dtype)
        self.beta = np.zeros(ch, dtype=dtype)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self.eps, self.momentum = eps, momentum
        self.ggamma = None
        self.gbeta = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.ggamma, "beta": self.gbeta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ValueError(f"batchnorm2d: bad input shape {x.shape}")
        dtype = x.dtype
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            # trailing-axis sums stream; the (0,2,3) reduction form does not
            s = x.sum(axis=(2, 3), dtype=np.float64).sum(axis=0)
            sq = np.einsum("nchw,nchw->c", x, x, dtype=np.float64)
            mean = s / m
            var = np.maximum(sq / m - mean * mean, 0.0)
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.running_mean += self.momentum * (mean.astype(dtype) - self.running_mean)
            self.running_var += self.momentum * (unbiased.astype(dtype) - self.running_var)
            mean = mean.astype(dtype)
            inv_std = (1.0 / np.sqrt(var + self.eps)).astype(dtype)
        else:
            mean = self.running_mean
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        if not train:
            a = (self.gamma * inv_std)[:, None, None]
            b = (self.beta - mean * self.gamma * inv_std)[:, None, None]
            return x * a + b
        xhat = x - mean[:, None, None]
        xhat *= inv_std[:, None, None]
        y = xhat * self.gamma[:, None, None]
        y += self.beta[:, None, None]
        self._cache = (xhat, inv_std)
        return y

    def backward(self, g_out):
        xhat, inv_std = self._cache
        m = g_out.shape[0] * g_out.shape[2] * g_out.shape[3]
        dtype = g_out.dtype
        self.ggamma = np.einsum("nchw,nchw->c", g_out, xhat, dtype=np.float64).astype(dtype)
        self.gbeta = g_out.sum(axis=(2, 3), dtype=np.float64).sum(axis=0).astype(dtype)
        dx = g_out * float(m)
        dx -= self.gbeta[:, None, None]
        dx -= xhat * self.ggamma[:, None, None]
        dx *= (self.gamma * inv_std / m)[:, None, None]
        return dx


class ReLU(Layer):
    """max(0, x); the subgradient at exactly 0 is taken as 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
            return x * self._mask
        return np.maximum(x, 0)

    def backward(self, g_out):
        return g_out * self._mask


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride == window)."""

    def __init__(self, kernel: int, stride: int | None = None):
        stride = kernel if stride is None else stride
        if stride != kernel:
            raise ValueError("only non-overlapping pooling is supported (stride == kernel)")
        self.kernel = kernel
        self._cache = None

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel
        if h % k or w % k:
            raise ValueError(f"pooling window {k} does not tile input {in_shape}")
        return (c, h // k, w // k)

    def _windows(self, x):
        n, c, h, w = x.shape
        k = self.kernel
        oh, ow = h // k, w // k
        r = x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
        return r.reshape(n, c, oh, ow, k * k), oh, ow

    def forward(self, x, train=False):
        if x.shape[2] % self.kernel or x.shape[3] % self.kernel:
            raise ValueError(f"pooling window {self.kernel} does not tile input {x.shape}")
        win, oh, ow = self._windows(x)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (idx, x.shape)
        return np.ascontiguousarray(y)

    def backward(self, g_out):
        idx, in_shape = self._cache
        n, c, h, w = in_shape
        k = self.kernel
        oh, ow = h // k, w // k
        dwin = np.zeros((n, c, oh, ow, k * k), dtype=g_out.dtype)
        np.put_along_axis(dwin, idx[..., None], g_out[..., None], axis=-1)
        dx = dwin.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dx.reshape(in_shape))


class GlobalAvgPool(Layer):
    """(N,C,H,W) -> (N,C) mean over the spatial grid."""

    def __init__(self):
        self._in_shape = None

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False):
        if train:
            self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g_out):
        n, c, h, w = self._in_shape
        g = g_out / (h * w)
        return np.broadcast_to(g[:, :, None, None], self._in_shape).astype(g_out.dtype, copy=True)


class Flatten(Layer):
    def __init__(self):
        self._in_shape = None

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        if train:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g_out):
        return g_out.reshape(self._in_shape)


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype)
        self.bias = np.zeros(out_dim, dtype=dtype)
        self.gw = None
        self.gb = None
        self._x = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.gw, "bias": self.gb}

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.weight.shape[1]:
            raise ValueError(f"linear expects {self.weight.shape[1]} features, got {in_shape}")
        return (self.weight.shape[0],)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"linear: bad input shape {x.shape}")
        if train:
            self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, g_out):
        self.gw = g_out.T @ self._x
        self.gb = g_out.sum(axis=0)
        return g_out @ self.weight


class BlockShuffle(Layer):
    """Keyed feature-map permutation slot; identity until a permutation is supplied.

    The active permutation is passed per forward call (and cached for the
    matching backward), so eval-mode forwards never mutate the layer and a
    trained model can be shared across threads.
    """

    def __init__(self, placement_id: str):
        self.placement_id = placement_id
        self.spec: BlockSpec | None = None
        self._train_perm = None

    def configure(self, spec: BlockSpec) -> None:
        self.spec = spec

    def forward(self, x, train=False, perm: np.ndarray | None = None):
        if perm is None:
            if train:
                self._train_perm = None
            return x
        if self.spec is None:
            raise ValueError(f"shuffle {self.placement_id!r} has no block spec configured")
        y = apply_block_shuffle(x, perm, self.spec)
        if train:
            self._train_perm = perm
        return y

    def backward(self, g_out):
        if self._train_perm is None or g_out is None:
            return g_out
        return shuffle_vjp(g_out, self._train_perm, self.spec)


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus a (possibly projected) skip, then relu."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.relu_out = ReLU()
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, 1, stride=stride, pad=0, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm2d(out_ch, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def _sublayers(self):
        subs = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.down_conv is not None:
            subs["down_conv"] = self.down_conv
            subs["down_bn"] = self.down_bn
        return subs

    def params(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers().items() for k, v in sub.params().items()}

    def grads(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers().items() for k, v in sub.grads().items()}

    def buffers(self):
        return {f"{n}.{k}": v for n, sub in self._sublayers().items() for k, v in sub.buffers().items()}

    def out_shape(self, in_shape):
        return self.bn2.out_shape(self.conv2.out_shape(self.conv1.out_shape(in_shape)))

    def forward(self, x, train=False):
        main = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        main = self.bn2.forward(self.conv2.forward(main, train), train)
        if self.down_conv is not None:
            skip = self.down_bn.forward(self.down_conv.forward(x, train), train)
        else:
            skip = x
        return self.relu_out.forward(main + skip, train)

    def backward(self, g_out):
        g = self.relu_out.backward(g_out)
        g_main = self.conv1.backward(
            self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(g))))
        )
        if self.down_conv is not None:
            g_skip = self.down_conv.backward(self.down_bn.backward(g))
        else:
            g_skip = g
        return g_main + g_skip
