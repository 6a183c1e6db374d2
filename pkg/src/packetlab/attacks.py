"""Gradient-direction adversarial perturbations and robustness metrics.

All attacks are untargeted: they take the loss gradient at the true label
and move inputs to increase it.  Outputs always stay inside the L-inf ball
of radius epsilon around the clean input, intersected with the data domain.

The unsigned FGSM variant normalizes the raw gradient by its L-inf norm so
signed and unsigned attacks share the same budget semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

__all__ = ["AttackConfig", "fgsm", "pgd", "attack", "robust_accuracy",
           "attack_success_rate"]


@dataclass
class AttackConfig:
    kind: str = "pgd"            # "fgsm" | "pgd"
    epsilon: float = 0.1         # L-inf budget
    alpha: float = 0.025         # per-step size (pgd)
    steps: int = 4               # iterations (pgd)
    signed: bool = True          # fgsm only

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "pgd":
            if self.alpha <= 0:
                raise ValueError("pgd needs alpha > 0")
            if self.steps < 1:
                raise ValueError("pgd needs steps >= 1")


def _domain_clip(x, lo, hi, shape):
    if np.isscalar(lo):
        return np.clip(x, lo, hi)
    return np.clip(x, np.reshape(lo, shape), np.reshape(hi, shape))


def fgsm(model, x0, y, cfg, lo=0.0, hi=1.0, clamp_c=nn.DEFAULT_CLAMP,
         return_flags=False):
    """Single gradient step of size epsilon, clipped to the domain.

    Unsigned mode scales the raw gradient by its per-sample L-inf norm; a
    sample with zero gradient is returned unperturbed (flagged when
    return_flags is set).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batched = x0.shape != model.input_shape
    xb = x0 if batched else x0[None]
    yb = np.asarray(y).reshape(-1) if batched else np.array([int(y)])
    g = nn.input_gradient(model, xb, yb, clamp_c).reshape(xb.shape)
    flat = g.reshape(len(xb), -1)
    if cfg.signed:
        step = np.sign(g)
        flags = np.zeros(len(xb), dtype=bool)
    else:
        norms = np.abs(flat).max(axis=1)
        flags = norms == 0.0
        safe = np.where(flags, 1.0, norms)
        step = g / safe.reshape((-1,) + (1,) * (g.ndim - 1))
        step[flags] = 0.0
    adv = xb + cfg.epsilon * step
    adv = _domain_clip(adv, lo, hi, (1,) + xb.shape[1:])
    if not batched:
        adv, flags = adv[0], flags[0]
    return (adv, flags) if return_flags else adv


def pgd(model, x0, y, cfg, lo=0.0, hi=1.0, clamp_c=nn.DEFAULT_CLAMP):
    """Iterated signed-gradient ascent with projection onto the eps ball."""
    x0 = np.asarray(x0, dtype=np.float64)
    batched = x0.shape != model.input_shape
    xb = x0 if batched else x0[None]
    yb = np.asarray(y).reshape(-1) if batched else np.array([int(y)])
    x = xb.copy()
    bshape = (1,) + xb.shape[1:]
    for _ in range(cfg.steps):
        g = nn.input_gradient(model, x, yb, clamp_c).reshape(x.shape)
        x = x + cfg.alpha * np.sign(g)
        x = np.clip(x, xb - cfg.epsilon, xb + cfg.epsilon)
        x = _domain_clip(x, lo, hi, bshape)
    return x if batched else x[0]


def attack(model, x0, y, cfg, lo=0.0, hi=1.0, clamp_c=nn.DEFAULT_CLAMP):
    if cfg.kind == "fgsm":
        return fgsm(model, x0, y, cfg, lo, hi, clamp_c)
    return pgd(model, x0, y, cfg, lo, hi, clamp_c)


def _adv_batches(model, dataset, cfg, clamp_c, batch_size=256):
    for s in range(0, len(dataset), batch_size):
        xb = dataset.images[s:s + batch_size]
        yb = dataset.labels[s:s + batch_size]
        adv = attack(model, xb, yb, cfg, dataset.lo, dataset.hi, clamp_c)
        yield xb, yb, adv


def robust_accuracy(model, dataset, cfg, clamp_c=nn.DEFAULT_CLAMP):
    """Accuracy on attacked versions of every sample."""
    if len(dataset) == 0:
        raise ValueError("robust accuracy of an empty dataset is undefined")
    correct = 0
    for _, yb, adv in _adv_batches(model, dataset, cfg, clamp_c):
        pred = model.forward(adv).argmax(axis=1)
        correct += int((pred == yb).sum())
    return correct / len(dataset)


def attack_success_rate(model, dataset, cfg, clamp_c=nn.DEFAULT_CLAMP):
    """Among initially correct samples, the fraction flipped by the attack."""
    if len(dataset) == 0:
        raise ValueError("attack success rate of an empty dataset is undefined")
    eligible = flipped = 0
    for xb, yb, adv in _adv_batches(model, dataset, cfg, clamp_c):
        clean_ok = model.forward(xb).argmax(axis=1) == yb
        adv_pred = model.forward(adv).argmax(axis=1)
        eligible += int(clean_ok.sum())
        flipped += int((clean_ok & (adv_pred != yb)).sum())
    if eligible == 0:
        raise ValueError("no correctly classified samples to attack")
    return flipped / eligible
