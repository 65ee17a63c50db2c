"""Conv layers: a plain 2-d convolution and the dual-branch range-aware
attention convolution.

The attention layer splits its output channels across two branches.  Each
branch convolves the input, builds a single-channel attention map from
channel-pooled features plus position/range encodings (branch b sees the
mirrored encodings 1-xi and -rho), and applies the sigmoid map through a
gamma-scaled residual.  Branch outputs are concatenated channel-wise, so
the layer is a drop-in replacement for a plain conv of the same shape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encodings import make_encodings
from .tensor import Parameter, Tensor


def _init_conv(rng, cout, cin, k, dtype, name):
    """Uniform +-sqrt(1/fan_in) weight and bias."""
    fan_in = cin * k * k
    bound = float(np.sqrt(1.0 / fan_in))
    w = Parameter(
        rng.uniform(-bound, bound, size=(cout, cin, k, k)), name=name + ".weight",
        dtype=dtype,
    )
    b = Parameter(
        rng.uniform(-bound, bound, size=(cout,)), name=name + ".bias", dtype=dtype
    )
    return w, b


class PlainConv2d:
    """Standard conv layer, optionally followed by ReLU."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, padding=1, relu=True,
                 dtype=np.float32, name="conv"):
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.padding = stride, padding
        self.relu = relu
        self.name = name
        self.weight, self.bias = _init_conv(rng, c_out, c_in, k, dtype, name)

    def forward(self, x):
        out = T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        return T.relu(out) if self.relu else out

    def parameters(self):
        return [self.weight, self.bias]


class RangeAttentionConv:
    """Dual-branch attention conv; C_out must be even."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, padding=1, relu=True,
                 dtype=np.float32, name="raa"):
        if c_out % 2 != 0:
            raise ValueError(f"{name}: attention conv needs even C_out, got {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.padding = stride, padding
        self.relu = relu
        self.name = name
        half = c_out // 2
        self.kernel_a, self.bias_a = _init_conv(rng, half, c_in, k, dtype, name + ".a")
        self.kernel_b, self.bias_b = _init_conv(rng, half, c_in, k, dtype, name + ".b")
        self.squeeze_a_w, self.squeeze_a_b = _init_conv(
            rng, 1, 2, 1, dtype, name + ".squeeze_a"
        )
        self.squeeze_b_w, self.squeeze_b_b = _init_conv(
            rng, 1, 2, 1, dtype, name + ".squeeze_b"
        )
        self.attn_a_w, self.attn_a_b = _init_conv(rng, 1, 2, 3, dtype, name + ".attn_a")
        self.attn_b_w, self.attn_b_b = _init_conv(rng, 1, 2, 3, dtype, name + ".attn_b")
        self.gamma_a = Parameter(np.ones((), dtype=dtype), name=name + ".gamma_a")
        self.gamma_b = Parameter(np.ones((), dtype=dtype), name=name + ".gamma_b")

    def _branch(self, feat, squeeze_w, squeeze_b, attn_w, attn_b, gamma,
                pos, rng_map):
        # Encodings appended channel-wise; they exist only to shape attention.
        appended = T.concat_channels(feat, pos)
        pooled = T.concat_channels(T.channel_max(appended), T.channel_mean(appended))
        spatial = T.conv2d(pooled, squeeze_w, squeeze_b, 1, 0)
        with_range = T.concat_channels(spatial, rng_map)
        logits = T.conv2d(with_range, attn_w, attn_b, 1, 1)
        attn = T.sigmoid(logits)
        out = T.add(T.broadcast_mul(T.mul(gamma, attn), feat), feat)
        return out, attn

    def _forward_impl(self, x):
        if x.data.shape[1] != self.c_in:
            raise ValueError(
                f"{self.name}: expected {self.c_in} input channels, "
                f"got {x.data.shape[1]}"
            )
        h = (x.data.shape[2] + 2 * self.padding - self.kernel_a.data.shape[2]) \
            // self.stride + 1
        w = (x.data.shape[3] + 2 * self.padding - self.kernel_a.data.shape[3]) \
            // self.stride + 1
        enc = make_encodings(h, w, dtype=x.dtype)
        xi, rho = enc.xi, enc.rho
        xi_rev = Tensor(1.0 - xi.data)
        rho_neg = Tensor(-rho.data)
        # Both branch convs see the same input, so they share one im2col.
        half = self.c_out // 2
        feat = T.conv2d_pair(
            x, self.kernel_a, self.bias_a, self.kernel_b, self.bias_b,
            self.stride, self.padding,
        )
        feat_a = T.slice_channels(feat, 0, half)
        feat_b = T.slice_channels(feat, half, self.c_out)
        out_a, f_a = self._branch(
            feat_a, self.squeeze_a_w, self.squeeze_a_b,
            self.attn_a_w, self.attn_a_b, self.gamma_a, xi, rho,
        )
        out_b, f_b = self._branch(
            feat_b, self.squeeze_b_w, self.squeeze_b_b,
            self.attn_b_w, self.attn_b_b, self.gamma_b, xi_rev, rho_neg,
        )
        out = T.concat_channels(out_a, out_b)
        if self.relu:
            out = T.relu(out)
        return out, f_a, f_b

    def forward(self, x):
        out, _, _ = self._forward_impl(x)
        return out

    def attention_maps(self, x):
        """The two sigmoid maps of the forward pass, each N x 1 x H' x W'."""
        _, f_a, f_b = self._forward_impl(x)
        return f_a, f_b

    def parameters(self):
        return [
            self.kernel_a, self.bias_a, self.kernel_b, self.bias_b,
            self.squeeze_a_w, self.squeeze_a_b, self.squeeze_b_w, self.squeeze_b_b,
            self.attn_a_w, self.attn_a_b, self.attn_b_w, self.attn_b_b,
            self.gamma_a, self.gamma_b,
        ]
