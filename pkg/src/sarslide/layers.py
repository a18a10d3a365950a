"""Neural-network building blocks with explicit forward/backward passes.

Every layer is a plain object holding float32 parameter arrays (``w``, ``b``,
``gamma``, ``beta``) and matching gradient buffers (``gw``, ``gb``, ...).
``forward`` returns ``(output, ctx)`` where ``ctx`` carries whatever the
backward pass needs; ``backward(ctx, grad_out)`` returns the gradient wrt the
layer input and accumulates parameter gradients in place.  Because contexts
are explicit, one layer instance can safely appear several times in a single
step (the weight-shared branches of the classifier rely on this).

Layers are dtype-generic: parameters are float32 by default, but if a test
promotes them to float64 every op stays float64, which is how the network
gradient checks get full precision.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend


def _rng_uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    """2D cross-correlation, fan-in-scaled uniform init, zero-init bias."""

    param_names = ("w", "b")

    def __init__(self, c_in, c_out, k=3, *, stride=1, pad=None, bias=True, rng=None):
        if pad is None:
            pad = k // 2
        self.stride = stride
        self.pad = pad
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.w = _rng_uniform(rng, bound, (c_out, c_in, k, k))
        self.b = np.zeros(c_out, dtype=np.float32) if bias else None
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b) if bias else None

    def forward(self, x):
        y = backend.conv2d_forward(x, self.w, self.b, self.stride, self.pad)
        return y, (x.shape, x)

    def backward(self, ctx, gy):
        x_shape, x = ctx
        self.gw += backend.conv2d_backward_weight(
            x, gy, self.stride, self.pad, self.w.shape[2], self.w.shape[3]
        )
        if self.b is not None:
            self.gb += gy.sum(axis=(0, 2, 3))
        return backend.conv2d_backward_input(
            gy, self.w, self.stride, self.pad, (x_shape[2], x_shape[3])
        )


class GroupNorm:
    """Per-sample group normalization with affine parameters.

    Deterministic and identical in train/eval mode (no running statistics).
    """

    param_names = ("gamma", "beta")

    def __init__(self, channels, groups=None, eps=1e-5):
        if groups is None:
            groups = math.gcd(channels, 8)
        if channels % groups != 0:
            raise ValueError(f"groups {groups} must divide channels {channels}")
        self.groups = groups
        self.eps = eps
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, c // g * h * w)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        istd = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mean) * istd).reshape(b, c, h, w)
        y = xhat * self.gamma[:, None, None] + self.beta[:, None, None]
        return y, (xhat, istd)

    def backward(self, ctx, gy):
        xhat, istd = ctx
        b, c, h, w = gy.shape
        g = self.groups
        self.ggamma += (gy * xhat).sum(axis=(0, 2, 3))
        self.gbeta += gy.sum(axis=(0, 2, 3))
        dxhat = (gy * self.gamma[:, None, None]).reshape(b, g, c // g * h * w)
        xhat_g = xhat.reshape(b, g, c // g * h * w)
        n = dxhat.shape[2]
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xhat_g).sum(axis=2, keepdims=True)
        dx = istd * (dxhat - (s1 + xhat_g * s2) / n)
        return dx.reshape(b, c, h, w)


class ReLU:
    param_names = ()

    def forward(self, x):
        y = np.maximum(x, 0)
        return y, x > 0

    def backward(self, ctx, gy):
        return gy * ctx


class Linear:
    """Dense layer on (B, in_features)."""

    param_names = ("w", "b")

    def __init__(self, n_in, n_out, *, rng=None):
        bound = 1.0 / math.sqrt(n_in)
        self.w = _rng_uniform(rng, bound, (n_out, n_in))
        self.b = np.zeros(n_out, dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x):
        return x @ self.w.T + self.b, x

    def backward(self, ctx, gy):
        x = ctx
        self.gw += gy.T @ x
        self.gb += gy.sum(axis=0)
        return gy @ self.w


class ConvBlock:
    """conv -> group norm -> relu."""

    def __init__(self, c_in, c_out, k=3, *, stride=1, rng=None):
        self.conv = Conv2d(c_in, c_out, k, stride=stride, rng=rng)
        self.norm = GroupNorm(c_out)
        self.act = ReLU()

    def sublayers(self):
        return [("conv", self.conv), ("norm", self.norm)]

    def forward(self, x):
        y, c1 = self.conv.forward(x)
        y, c2 = self.norm.forward(y)
        y, c3 = self.act.forward(y)
        return y, (c1, c2, c3)

    def backward(self, ctx, gy):
        c1, c2, c3 = ctx
        gy = self.act.backward(c3, gy)
        gy = self.norm.backward(c2, gy)
        return self.conv.backward(c1, gy)


class ResidualBlock:
    """Two 3x3 convs with group norm; identity or 1x1-projection shortcut."""

    def __init__(self, c_in, c_out, *, stride=1, rng=None):
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, rng=rng)
        self.norm1 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng=rng)
        self.norm2 = GroupNorm(c_out)
        self.act = ReLU()
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride=stride, pad=0, rng=rng)
            self.proj_norm = GroupNorm(c_out)
        else:
            self.proj = None
            self.proj_norm = None

    def sublayers(self):
        subs = [("conv1", self.conv1), ("norm1", self.norm1),
                ("conv2", self.conv2), ("norm2", self.norm2)]
        if self.proj is not None:
            subs += [("proj", self.proj), ("proj_norm", self.proj_norm)]
        return subs

    def forward(self, x):
        y, c1 = self.conv1.forward(x)
        y, cn1 = self.norm1.forward(y)
        y, ca1 = self.act.forward(y)
        y, c2 = self.conv2.forward(y)
        y, cn2 = self.norm2.forward(y)
        if self.proj is not None:
            s, cp = self.proj.forward(x)
            s, cpn = self.proj_norm.forward(s)
        else:
            s, cp, cpn = x, None, None
        out, ca2 = self.act.forward(y + s)
        return out, (c1, cn1, ca1, c2, cn2, cp, cpn, ca2)

    def backward(self, ctx, gy):
        c1, cn1, ca1, c2, cn2, cp, cpn, ca2 = ctx
        gy = self.act.backward(ca2, gy)
        gs = gy
        g = self.norm2.backward(cn2, gy)
        g = self.conv2.backward(c2, g)
        g = self.act.backward(ca1, g)
        g = self.norm1.backward(cn1, g)
        gx = self.conv1.backward(c1, g)
        if self.proj is not None:
            gs = self.proj_norm.backward(cpn, gs)
            gx = gx + self.proj.backward(cp, gs)
        else:
            gx = gx + gs
        return gx


# ---------------------------------------------------------------------------
# stateless ops

def upsample2x(x):
    """Nearest-neighbour 2x upsampling."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(gy):
    b, c, h, w = gy.shape
    return gy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C)."""
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(gy, x_shape):
    b, c, h, w = x_shape
    return np.broadcast_to(gy[:, :, None, None] / (h * w), x_shape).astype(gy.dtype)


def concat_channels(parts):
    return np.concatenate(parts, axis=1)


def split_channels(g, sizes):
    out = []
    lo = 0
    for s in sizes:
        out.append(g[:, lo:lo + s])
        lo += s
    return out


# ---------------------------------------------------------------------------
# parameter traversal

def named_param_slots(root):
    """Walk a layer tree and list (full_name, layer, attr) parameter slots.

    The traversal order is fixed by construction order, so it is the canonical
    ordering for serialization and optimizer state.
    """
    slots = []

    def visit(prefix, node):
        if hasattr(node, "sublayers"):
            for name, child in node.sublayers():
                visit(f"{prefix}{name}.", child)
        else:
            for attr in node.param_names:
                if getattr(node, attr) is not None:
                    slots.append((f"{prefix}{attr}", node, attr))

    visit("", root)
    return slots


def param_arrays(root):
    return [getattr(layer, attr) for _, layer, attr in named_param_slots(root)]


def grad_arrays(root):
    return [getattr(layer, "g" + attr) for _, layer, attr in named_param_slots(root)]


def set_param_arrays(root, arrays):
    slots = named_param_slots(root)
    if len(arrays) != len(slots):
        raise ValueError(f"expected {len(slots)} arrays, got {len(arrays)}")
    for (_, layer, attr), arr in zip(slots, arrays):
        setattr(layer, attr, arr)


def zero_grads(root):
    for _, layer, attr in named_param_slots(root):
        setattr(layer, "g" + attr, np.zeros_like(getattr(layer, attr)))
