"""Layer-table U-Net autoencoder and the encoder-based discriminator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn.layers import (
    Conv3x3,
    LeakyReLU,
    MaxPool2,
    Module,
    Param,
    UpConv2,
    concat_channels,
    concat_channels_backward,
    global_mean,
    global_mean_backward,
    sigmoid,
    sigmoid_backward,
)

__all__ = ["NetSpec", "Encoder", "UNet", "Discriminator", "table_param_count"]


@dataclass(frozen=True)
class NetSpec:
    """Layer table of the stage-one autoencoder.

    ``width`` is the Conv1 channel count (32 in the reference table); every
    other layer scales with it, so ``width=32`` reproduces the table exactly.
    ``residual`` adds the input's middle channel to the output.
    """

    in_channels: int = 1
    width: int = 32
    residual: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.width < 1:
            raise ValueError("in_channels and width must be positive")

    @property
    def levels(self) -> tuple[int, ...]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w, 16 * w)

    @property
    def tail(self) -> int:
        return max(1, round(12 * self.width / 32))

    def encoder_rows(self):
        c = self.levels
        rows = []
        prev = self.in_channels
        for i, ch in enumerate(c, start=1):
            rows.append((f"Conv{i}_1", "conv", prev, ch))
            rows.append((f"Conv{i}_2", "conv", ch, ch))
            if i < 5:
                rows.append((f"Pool{i}", "pool", ch, ch))
            prev = ch
        return rows

    def decoder_rows(self):
        c = self.levels
        rows = []
        for stage, (hi, lo) in enumerate(zip(c[:0:-1], c[-2::-1]), start=6):
            skip = f"Conv{10 - stage}"
            rows.append((f"UpConv{stage}", "upconv", hi, lo))
            rows.append(("Concat", "concat", f"UpConv{stage}", skip))
            rows.append((f"Conv{stage}_1", "conv", 2 * lo, lo))
            if stage < 9:
                rows.append((f"Conv{stage}_2", "conv", lo, lo))
        rows.append(("Conv9_2", "conv", c[0], self.tail))
        rows.append(("Conv9_3", "conv", self.tail, 1))
        return rows


def table_param_count(spec: NetSpec) -> int:
    total = 0
    for name, kind, ic, oc in spec.encoder_rows() + spec.decoder_rows():
        if kind == "conv":
            total += ic * oc * 9 + oc
        elif kind == "upconv":
            total += ic * oc * 4 + oc
    return total


class Encoder(Module):
    """Conv1_1 ... Conv5_2 with four max pools; LeakyReLU after every conv.

    ``forward`` returns the Conv5_2 activation and keeps the Conv1-Conv4
    activations in ``self.skips``.
    """

    def __init__(self, spec: NetSpec, rng, dtype=np.float32, prefix=""):
        self.spec = spec
        self.convs = []
        self.acts = []
        self.pools = []
        for name, kind, ic, oc in spec.encoder_rows():
            if kind == "conv":
                self.convs.append(Conv3x3(ic, oc, rng, prefix + name, dtype))
                self.acts.append(LeakyReLU())
            else:
                self.pools.append(MaxPool2())
        self.skips = []

    def params(self):
        return [p for c in self.convs for p in c.params()]

    def forward(self, x):
        self.skips = []
        h = x
        for level in range(5):
            for k in (2 * level, 2 * level + 1):
                h = self.acts[k](self.convs[k](h))
            if level < 4:
                self.skips.append(h)
                h = self.pools[level](h)
        return h

    def backward(self, g, skip_grads=None):
        for level in range(4, -1, -1):
            if level < 4:
                g = self.pools[level].backward(g)
                if skip_grads is not None:
                    g = g + skip_grads[level]
            for k in (2 * level + 1, 2 * level):
                g = self.convs[k].backward(self.acts[k].backward(g))
        return g


class UNet(Module):
    """The stage-one autoencoder: ``(N, in_c, H, W) -> (N, 1, H, W)``, H and W divisible by 16."""

    def __init__(self, spec: NetSpec = NetSpec(), seed=0, dtype=np.float32, prefix="ae."):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.dtype = dtype
        self.encoder = Encoder(spec, rng, dtype, prefix)
        self.ups = []
        self.dec_convs = []  # per decoder stage: list of (conv, act)
        c = spec.levels
        for stage, (hi, lo) in enumerate(zip(c[:0:-1], c[-2::-1]), start=6):
            self.ups.append((UpConv2(hi, lo, rng, f"{prefix}UpConv{stage}", dtype), LeakyReLU()))
            layers = [(Conv3x3(2 * lo, lo, rng, f"{prefix}Conv{stage}_1", dtype), LeakyReLU())]
            if stage < 9:
                layers.append((Conv3x3(lo, lo, rng, f"{prefix}Conv{stage}_2", dtype), LeakyReLU()))
            else:
                layers.append((Conv3x3(lo, spec.tail, rng, f"{prefix}Conv9_2", dtype), LeakyReLU()))
            self.dec_convs.append(layers)
        # zero-initialised output layer: a fresh residual network is the identity
        self.head = Conv3x3(spec.tail, 1, rng, f"{prefix}Conv9_3", dtype, zero=spec.residual)
        self._splits = []

    def params(self) -> list[Param]:
        ps = self.encoder.params()
        for (up, _), layers in zip(self.ups, self.dec_convs):
            ps += up.params()
            for conv, _ in layers:
                ps += conv.params()
        ps += self.head.params()
        return ps

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4:
            raise ValueError(f"UNet expects (N,C,H,W), got {x.shape}")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"UNet expects {self.spec.in_channels} channels, got {x.shape[1]}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ValueError(f"spatial dims must be divisible by 16, got {x.shape[2:]}")
        h = self.encoder.forward(x)
        self._splits = []
        for i, ((up, up_act), layers) in enumerate(zip(self.ups, self.dec_convs)):
            h = up_act(up(h))
            h, split = concat_channels(h, self.encoder.skips[3 - i])
            self._splits.append(split)
            for conv, act in layers:
                h = act(conv(h))
        out = self.head(h)
        if self.spec.residual:
            out = out + x[:, self.spec.in_channels // 2: self.spec.in_channels // 2 + 1]
        return out

    def backward(self, g):
        """Backpropagate ``dL/d(out)``; returns ``dL/d(input)``."""
        g_out = g
        g = self.head.backward(g)
        skip_grads = [None] * 4
        for i in range(3, -1, -1):
            (up, up_act), layers = self.ups[i], self.dec_convs[i]
            for conv, act in reversed(layers):
                g = conv.backward(act.backward(g))
            g, g_skip = concat_channels_backward(g, self._splits[i])
            skip_grads[3 - i] = g_skip
            g = up.backward(up_act.backward(g))
        gx = self.encoder.backward(g, skip_grads)
        if self.spec.residual:
            mid = self.spec.in_channels // 2
            gx = gx.copy()
            gx[:, mid:mid + 1] += g_out
        return gx


class Discriminator(Module):
    """Encoder half of the table, then global mean, a scalar affine and a sigmoid."""

    def __init__(self, in_channels=1, width=32, seed=0, dtype=np.float32, prefix="dis."):
        rng = np.random.default_rng(seed)
        self.spec = NetSpec(in_channels=in_channels, width=width, residual=False)
        self.encoder = Encoder(self.spec, rng, dtype, prefix)
        self.scale = Param(np.ones(1, dtype), f"{prefix}head.scale")
        self.bias = Param(np.zeros(1, dtype), f"{prefix}head.bias")
        self.dtype = dtype

    def params(self):
        return self.encoder.params() + [self.scale, self.bias]

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        feat = self.encoder.forward(x)
        m, self._mshape = global_mean(feat)
        self._m = m
        z = self.scale.value[0] * m + self.bias.value[0]
        y, self._y = sigmoid(z)
        return y

    def backward(self, g):
        gz = sigmoid_backward(np.asarray(g, dtype=self.dtype), self._y)
        self.scale.grad += np.sum(gz * self._m)
        self.bias.grad += np.sum(gz)
        gm = gz * self.scale.value[0]
        gfeat = global_mean_backward(gm, self._mshape)
        return self.encoder.backward(gfeat)
