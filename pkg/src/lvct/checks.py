"""Finite-difference gradient suite over every layer, every loss and the encoder.

Used by the ``gradcheck`` command and the test suite. Everything runs in
float64 with a random linear read-out ``L = sum(out * R)`` unless the
function under test is itself a scalar loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossWeights, loss_adv, loss_ae, loss_dis, loss_mse, loss_tv
from .nn import layers as L
from .nn.gradcheck import grad_check, grad_check_input, numeric_grad, relative_error
from .models.unet import Discriminator, Encoder, NetSpec, UNet

__all__ = ["CheckResult", "LAYER_TOL", "ENCODER_TOL", "gradient_suite"]

LAYER_TOL = 1e-4
ENCODER_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name} max_rel_err={self.error:.3e} tol={self.tol:.0e}"


def _readout(rng, shape):
    r = rng.standard_normal(shape)

    def loss(out):
        return float(np.sum(out * r)), r.copy()

    return loss


def _array_check(f, grad, x, rng, n=24, h=1e-5):
    """Compare ``grad`` (analytic dL/dx) with central differences of scalar ``f`` at sampled entries."""
    x = x.copy()
    scale = float(np.max(np.abs(grad))) or 1.0
    flat = rng.choice(x.size, min(n, x.size), replace=False)
    worst = 0.0
    for i in flat:
        idx = np.unravel_index(i, x.shape)
        num = numeric_grad(lambda: f(x), x, idx, h)
        worst = max(worst, float(relative_error(grad[idx], num, scale * 1e-6)))
    return worst


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-30) * margin * 2, x)


def _layer_checks(rng):
    out = []
    x = rng.standard_normal((2, 3, 8, 8))

    conv = L.Conv3x3(3, 4, rng, "conv", np.float64)
    conv.b.value[:] = rng.standard_normal(4)
    loss = _readout(rng, (2, 4, 8, 8))
    out.append(CheckResult("conv3x3.params", grad_check(conv, x, loss, samples_per_param=20), LAYER_TOL))
    out.append(CheckResult("conv3x3.input",
                           grad_check_input(conv.forward, conv.backward, x, loss, n_samples=30), LAYER_TOL))

    up = L.UpConv2(3, 2, rng, "up", np.float64)
    loss = _readout(rng, (2, 2, 16, 16))
    out.append(CheckResult("upconv2.params", grad_check(up, x, loss, samples_per_param=20), LAYER_TOL))
    out.append(CheckResult("upconv2.input",
                           grad_check_input(up.forward, up.backward, x, loss, n_samples=30), LAYER_TOL))

    pool = L.MaxPool2()
    loss = _readout(rng, (2, 3, 4, 4))
    out.append(CheckResult("maxpool2.input",
                           grad_check_input(pool.forward, pool.backward, x, loss, n_samples=30), LAYER_TOL))

    act = L.LeakyReLU()
    xa = _away_from_zero(rng, x.shape)
    loss = _readout(rng, x.shape)
    out.append(CheckResult("leaky_relu.input",
                           grad_check_input(act.forward, act.backward, xa, loss, n_samples=30), LAYER_TOL))

    # sigmoid on a global mean, the discriminator head
    def head_fwd(v):
        m, shape = L.global_mean(v)
        y, cache = L.sigmoid(3.0 * m)
        head_fwd.cache = (shape, cache)
        return y

    def head_bwd(g):
        shape, cache = head_fwd.cache
        return L.global_mean_backward(3.0 * L.sigmoid_backward(g, cache), shape)

    loss = _readout(rng, (2,))
    out.append(CheckResult("sigmoid.global_mean.input",
                           grad_check_input(head_fwd, head_bwd, x, loss, n_samples=30), LAYER_TOL))

    other = rng.standard_normal((2, 2, 8, 8))

    def cat_fwd(v):
        y, cat_fwd.split = L.concat_channels(v, other)
        return y

    def cat_bwd(g):
        return L.concat_channels_backward(g, cat_fwd.split)[0]

    loss = _readout(rng, (2, 5, 8, 8))
    out.append(CheckResult("concat.input", grad_check_input(cat_fwd, cat_bwd, x, loss, n_samples=30), LAYER_TOL))
    return out


def _loss_checks(rng):
    out = []
    pred = rng.random((2, 1, 8, 8))
    gt = rng.random((2, 1, 8, 8))
    d = rng.uniform(0.1, 0.9, 2)
    d2 = rng.uniform(0.1, 0.9, 2)

    _, g = loss_mse(pred, gt)
    out.append(CheckResult("loss.mse", _array_check(lambda v: loss_mse(v, gt)[0], g, pred, rng), LAYER_TOL))
    _, g = loss_adv(d)
    out.append(CheckResult("loss.adv", _array_check(lambda v: loss_adv(v)[0], g, d, rng), LAYER_TOL))
    _, g = loss_tv(pred)
    out.append(CheckResult("loss.tv", _array_check(lambda v: loss_tv(v)[0], g, pred, rng), LAYER_TOL))

    # unit weights so each term registers at full strength in the check
    w = LossWeights(1.0, 1.0, 1.0)
    _, gp, gd, _ = loss_ae(pred, gt, d, w)
    out.append(CheckResult("loss.ae.pred", _array_check(lambda v: loss_ae(v, gt, d, w)[0], gp, pred, rng), LAYER_TOL))
    out.append(CheckResult("loss.ae.d", _array_check(lambda v: loss_ae(pred, gt, v, w)[0], gd, d, rng), LAYER_TOL))
    _, g_real, g_fake = loss_dis(d, d2)
    out.append(CheckResult("loss.dis.real", _array_check(lambda v: loss_dis(v, d2)[0], g_real, d, rng), LAYER_TOL))
    out.append(CheckResult("loss.dis.fake", _array_check(lambda v: loss_dis(d, v)[0], g_fake, d2, rng), LAYER_TOL))
    return out


def gradient_suite(seed: int = 0, encoder_width: int = 32, encoder_size: int = 32, full: bool = True):
    """Run every check; returns a list of :class:`CheckResult`.

    ``full`` adds the layer-table encoder (width ``encoder_width``) at
    ``encoder_size`` square input and a reduced-width autoencoder and
    discriminator.
    """
    rng = np.random.default_rng(seed)
    results = _layer_checks(rng) + _loss_checks(rng)
    if full:
        enc = Encoder(NetSpec(1, encoder_width, residual=False), rng, np.float64, "enc.")
        x = rng.standard_normal((1, 1, encoder_size, encoder_size))
        loss = _readout(rng, (1, 16 * encoder_width, encoder_size // 16, encoder_size // 16))
        results.append(CheckResult(f"encoder.w{encoder_width}.{encoder_size}x{encoder_size}",
                                   grad_check(enc, x, loss, samples_per_param=4, seed=seed), ENCODER_TOL))

        ae = UNet(NetSpec(1, 2, residual=True), seed=seed, dtype=np.float64)
        ae.head.w.value[:] = rng.standard_normal(ae.head.w.value.shape) * 0.1
        x = rng.standard_normal((1, 1, 16, 16))
        loss = _readout(rng, (1, 1, 16, 16))
        results.append(CheckResult("unet.w2.params", grad_check(ae, x, loss, samples_per_param=4, seed=seed),
                                   ENCODER_TOL))
        results.append(CheckResult("unet.w2.input",
                                   grad_check_input(ae.forward, ae.backward, x, loss, n_samples=20), ENCODER_TOL))

        dis = Discriminator(1, 2, seed=seed, dtype=np.float64)
        loss = _readout(rng, (1,))
        results.append(CheckResult("discriminator.w2.params",
                                   grad_check(dis, x, loss, samples_per_param=4, seed=seed), ENCODER_TOL))
    return results
