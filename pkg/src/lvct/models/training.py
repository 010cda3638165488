"""Adversarial training loop shared by all three stages."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..losses import LossWeights, loss_ae, loss_dis
from ..nn.optim import Adam
from .stages import pad_reflect, pad_reflect_backward

__all__ = ["TrainConfig", "TrainLog", "ArrayDataset", "train_stage", "LOG_COLUMNS", "write_log", "PaddedCritic"]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_MSE", "l_adv", "l_reg", "l_AE", "l_DIS", "val_PSNR", "val_SSIM")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    alpha1: float = 1.0
    alpha2: float = 1e-3
    alpha3: float = 2e-8
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    d_steps_per_g: int = 1
    width: int = 32
    adversarial: bool = True
    max_iters: int | None = None  # when set, overrides ``epochs``

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.d_steps_per_g < 1 or self.width < 1:
            raise ValueError("epochs, batch_size, d_steps_per_g and width must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        LossWeights(self.alpha1, self.alpha2, self.alpha3)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2 if self.adversarial else 0.0, self.alpha3)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class ArrayDataset:
    """Aligned input/target arrays; ``transform`` may re-crop each batch (random patches)."""

    inputs: np.ndarray
    targets: np.ndarray
    transform: object = None

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    iter_mse: list = field(default_factory=list)

    def to_csv(self, path):
        write_log(path, self.rows)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[c]:.9g}" for c in LOG_COLUMNS[1:]])


def _check_finite(it, **terms):
    bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
    if bad:
        raise FloatingPointError(f"non-finite loss at iteration {it}: {bad}; all terms {terms}")


class PaddedCritic:
    """Discriminator applied to reflect-padded input so any image size is accepted."""

    def __init__(self, discriminator, multiple=16):
        self.d = discriminator
        self.multiple = multiple

    def params(self):
        return self.d.params()

    def zero_grad(self):
        self.d.zero_grad()

    def forward(self, x):
        xp, self._rec = pad_reflect(x, self.multiple)
        return self.d.forward(xp)

    def backward(self, g):
        return pad_reflect_backward(self.d.backward(g), self._rec)


def train_stage(model, dataset: ArrayDataset, cfg: TrainConfig, discriminator=None, validate=None) -> TrainLog:
    """Train ``model`` (a stage wrapper) in place.

    Per batch: ``d_steps_per_g`` discriminator updates minimising
    ``1 - D(real) + D(fake)``, then one generator update on
    ``a1*MSE + a2*(1 - D(fake)) + a3*TV``. Without a discriminator, or with
    ``cfg.adversarial`` off, only the MSE and TV terms are used.
    ``validate()`` returns ``(psnr, ssim)`` and is called after each epoch.
    """
    adversarial = cfg.adversarial and discriminator is not None
    if adversarial:
        discriminator = PaddedCritic(discriminator)
    weights = cfg.weights
    g_opt = Adam(model.params(), lr=cfg.lr)
    d_opt = Adam(discriminator.params(), lr=cfg.lr) if adversarial else None
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(dataset)
    out = TrainLog()
    it = 0
    epochs = itertools.count() if cfg.max_iters is not None else range(cfg.epochs)
    for epoch in epochs:
        order = rng.permutation(n)
        sums = dict.fromkeys(("mse", "adv", "reg", "ae", "dis"), 0.0)
        count = 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_iters is not None and it >= cfg.max_iters:
                break
            idx = np.sort(order[start:start + cfg.batch_size])
            x = dataset.inputs[idx]
            y = dataset.targets[idx]
            if dataset.transform is not None:
                x, y = dataset.transform(rng, x, y)
            fake = model.forward(x)

            l_dis = 0.0
            if adversarial:
                both = np.concatenate([y.astype(fake.dtype), fake])
                nb = len(y)
                for _ in range(cfg.d_steps_per_g):
                    d_out = discriminator.forward(both)
                    l_dis, g_real, g_fake = loss_dis(d_out[:nb], d_out[nb:])
                    discriminator.backward(np.concatenate([g_real, g_fake]))
                    d_opt.step()
                d_fake = discriminator.forward(fake)
            else:
                d_fake = None

            total, g_pred, g_d, parts = loss_ae(fake, y, d_fake, weights)
            _check_finite(it, l_MSE=parts["mse"], l_adv=parts["adv"], l_reg=parts["reg"], l_DIS=l_dis)
            if adversarial:
                g_pred = g_pred + discriminator.backward(g_d)
                discriminator.zero_grad()
            model.backward(g_pred.astype(fake.dtype, copy=False))
            g_opt.step()

            sums["mse"] += parts["mse"]
            sums["adv"] += parts["adv"]
            sums["reg"] += parts["reg"]
            sums["ae"] += total
            sums["dis"] += l_dis
            out.iter_mse.append(parts["mse"])
            count += 1
            it += 1
        val_psnr, val_ssim = validate() if validate is not None else (float("nan"), float("nan"))
        row = {
            "epoch": epoch,
            "l_MSE": sums["mse"] / max(count, 1),
            "l_adv": sums["adv"] / max(count, 1),
            "l_reg": sums["reg"] / max(count, 1),
            "l_AE": sums["ae"] / max(count, 1),
            "l_DIS": sums["dis"] / max(count, 1),
            "val_PSNR": val_psnr,
            "val_SSIM": val_ssim,
        }
        out.rows.append(row)
        log.info("epoch %d mse=%.3g dis=%.3g val_psnr=%.2f", epoch, row["l_MSE"], row["l_DIS"], val_psnr)
        if cfg.max_iters is not None and it >= cfg.max_iters:
            break
    return out
