"""Small network-building helpers shared by the autoencoders, the two
denoisers, and the latent adapter: parameterized layers over a
ParameterStore, sinusoidal timestep embeddings, and layer descriptors for
analytic cost accounting."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def sinusoidal_pe(t, dim):
    """pe[2i] = sin(t / 10000^(2i/dim)), pe[2i+1] = cos(.)."""
    if dim % 2 != 0:
        raise ValueError(f"positional-encoding dim must be even, got {dim}")
    if t < 0:
        raise ValueError(f"timestep must be non-negative, got {t}")
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    pe = np.zeros(dim, dtype=np.float64)
    pe[0::2] = np.sin(t * freq)
    pe[1::2] = np.cos(t * freq)
    return pe


class Conv:
    def __init__(self, store, name, cin, cout, k, stride=1, padding=0, rng=None,
                 weight_init=None):
        self.stride = stride
        self.padding = padding
        self.cin, self.cout, self.k = cin, cout, k
        if weight_init is None:
            weight_init = T.kaiming_uniform((cout, cin, k, k), cin * k * k, rng)
        self.w = store.add(f"{name}.weight", weight_init)
        self.b = store.add(f"{name}.bias", np.zeros(cout, dtype=np.float32))

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def out_dim(self, h):
        return (h + 2 * self.padding - self.k) // self.stride + 1

    def describe(self, h_in):
        ho = self.out_dim(h_in)
        return {"kind": "conv", "cin": self.cin, "cout": self.cout, "k": self.k,
                "out_h": ho, "out_w": ho}


class ConvT:
    """Transposed conv; weight stored as (cin, cout, k, k)."""

    def __init__(self, store, name, cin, cout, k, stride=1, padding=0, rng=None):
        self.stride = stride
        self.padding = padding
        self.cin, self.cout, self.k = cin, cout, k
        init = T.kaiming_uniform((cin, cout, k, k), cin * k * k, rng)
        self.w = store.add(f"{name}.weight", init)
        self.b = store.add(f"{name}.bias", np.zeros(cout, dtype=np.float32))

    def __call__(self, x):
        return T.conv2d_transposed(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def out_dim(self, h):
        return (h - 1) * self.stride - 2 * self.padding + self.k

    def describe(self, h_in):
        ho = self.out_dim(h_in)
        return {"kind": "conv", "cin": self.cin, "cout": self.cout, "k": self.k,
                "out_h": ho, "out_w": ho}


class Dense:
    def __init__(self, store, name, fan_in, fan_out, rng=None):
        self.fan_in, self.fan_out = fan_in, fan_out
        init = T.kaiming_uniform((fan_in, fan_out), fan_in, rng)
        self.w = store.add(f"{name}.weight", init)
        self.b = store.add(f"{name}.bias", np.zeros(fan_out, dtype=np.float32))

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def describe(self):
        return {"kind": "linear", "fan_in": self.fan_in, "fan_out": self.fan_out}


def timestep_features(t, dim, t_scale=1.0):
    """Embedding input for a (possibly clean, t = -1) latent timestep."""
    return sinusoidal_pe(max(int(t), 0) * t_scale, dim).astype(np.float32)


def add_channel_bias(x, vec_tensor):
    """Broadcast-add a (N, C) tensor onto an (N, C, H, W) activation."""
    n, c, h, w = x.shape
    tiled = T.matmul(T.reshape(vec_tensor, (n, c, 1)),
                     T.Tensor(np.ones((1, h * w), dtype=x.data.dtype)))
    return T.add(x, T.reshape(tiled, (n, c, h, w)))
