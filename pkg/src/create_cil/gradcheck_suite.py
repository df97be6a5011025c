"""Finite-difference battery over every training loss.

Each case builds a small random extractor and auto-encoder bank and checks
the loss against central differences with respect to all parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossConfig, ce_loss, cr_loss, cst_loss, kd_loss, total_loss
from .model import AutoEncoderBank, FeatureExtractor, append_classes, extract, predict_proba
from .numerics import Tensor, check_gradients, no_grad, ops

TOLERANCE = 1e-4
STEP = 1e-5
LOSS_NAMES = ("L_CE", "L_KD", "L_CST", "L_CR", "L_total")


@dataclass
class BatteryResult:
    loss: str
    max_rel_error: float
    worst: str
    configs: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _model(rng: np.random.Generator, seed: int, input_dim=3, hidden=(4,), d=5, l=2, classes=3):
    ex = FeatureExtractor.create(input_dim, hidden, d, seed)
    # nonzero biases so every parameter is exercised
    for b in ex.biases:
        b.data = rng.uniform(-0.3, 0.3, size=b.shape)
    bank = AutoEncoderBank(d, l, "tanh" if seed % 3 else "linear", "l2" if seed % 2 else "sq_l2")
    append_classes(bank, classes, seed)
    for p in bank.parameters():
        p.data = p.data + rng.uniform(-0.2, 0.2, size=p.shape)
    return ex, bank


def _case(name: str, seed: int) -> tuple[Callable[[], Tensor], list[Tensor], list[str]]:
    rng = np.random.default_rng([seed, 0xC4EC])
    ex, bank = _model(rng, seed)
    n = 12 if name in ("L_CST", "L_CR", "L_total") else 8
    x = Tensor(rng.uniform(-2, 2, size=(n, ex.input_dim)))
    y = rng.integers(0, bank.num_classes, size=n)
    y[:4] = [0, 0, 1, 1]  # guarantee positives
    cfg = LossConfig(alpha=0.1 + 0.9 * rng.random(), beta=2.0, tau_r=0.1, normalize_latents=bool(seed % 2))
    named = {**ex.named_parameters(), **bank.named_parameters()}
    params, names = list(named.values()), list(named.keys())

    old_ex, old_bank = ex.clone(), bank.clone()
    for p in old_ex.parameters() + old_bank.parameters():
        p.data = p.data + rng.normal(0, 0.3, size=p.shape)
    n_old = bank.num_classes - 1
    with no_grad():
        eps_old = old_bank.forward(extract(old_ex, x))[0].data[:, :n_old]
        # confusion weights are constants within a step
        weights_eps = bank.forward(extract(ex, x))[0].data

    def forward():
        return bank.forward(extract(ex, x))

    def f_ce():
        eps, _ = forward()
        return ce_loss(predict_proba(eps, cfg.alpha), y)

    def f_kd():
        eps, _ = forward()
        return kd_loss(ops.index_select(eps, np.arange(n_old), axis=1), eps_old, cfg.alpha, cfg.tau_d)

    def f_cst():
        return cst_loss(forward()[1], y, cfg)

    def f_cr():
        return cr_loss(forward()[1], y, eps=weights_eps, config=cfg)

    def f_total():
        eps, lat = forward()
        ce = ce_loss(predict_proba(eps, cfg.alpha), y)
        kd = kd_loss(ops.index_select(eps, np.arange(n_old), axis=1), eps_old, cfg.alpha, cfg.tau_d)
        cr = cr_loss(lat, y, eps=weights_eps, config=cfg)
        return total_loss(ce, kd, cr, cfg.lam)

    fn = {"L_CE": f_ce, "L_KD": f_kd, "L_CST": f_cst, "L_CR": f_cr, "L_total": f_total}[name]
    return fn, params, names


def check_loss(name: str, configs: int = 20, seed: int = 0) -> BatteryResult:
    worst_err, worst_desc = 0.0, ""
    for i in range(configs):
        fn, params, names = _case(name, seed * 1000 + i)
        res = check_gradients(fn, params, STEP)
        if res.max_rel_error >= worst_err:
            worst_err, worst_desc = res.max_rel_error, f"config {i}: {res.describe(names)}"
    return BatteryResult(name, worst_err, worst_desc, configs)


def run_battery(seed: int = 0, configs: int = 20) -> list[BatteryResult]:
    return [check_loss(name, configs, seed) for name in LOSS_NAMES]
