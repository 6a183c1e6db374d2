"""Neural packets: 1-D normalized loss slices treated as wavefunctions.

A packet fixes a frozen model, a label, and a baseline input, varies exactly
one flattened input dimension over [lo, hi], and normalizes the clamped loss
slice so its square integrates to one.  Analytic packets (Gaussian and
raised cosine) share the same evaluation interface and serve as closed-form
oracles for the quadrature pipeline.
"""

from __future__ import annotations

import numpy as np

from . import nn

__all__ = ["NeuralPacket", "AnalyticPacket", "DegeneratePacket",
           "normalize", "boundary_mass", "DEGENERACY_SCALE"]

DEGENERACY_SCALE = 1e-12
DEFAULT_TAPER = 0.05
_CHUNK = 4096


class DegeneratePacket(ValueError):
    """The loss slice is numerically flat; no normalizable packet exists."""


class NeuralPacket:
    """psi(t) = l(t) * taper(t) / sqrt(beta) over one input dimension.

    Immutable after `normalize` sets beta; evaluation is pure.
    """

    def __init__(self, model, label, x_base, dim, lo, hi,
                 clamp_c=nn.DEFAULT_CLAMP, taper_w=DEFAULT_TAPER):
        x_base = np.asarray(x_base, dtype=np.float64)
        if not (0 <= dim < x_base.size):
            raise IndexError(f"dimension {dim} out of range for {x_base.size}")
        if not hi > lo:
            raise ValueError("domain must satisfy hi > lo")
        if not 0 <= taper_w < 0.5:
            raise ValueError("taper width must be in [0, 0.5)")
        self.model = model
        self.label = int(label)
        self.x_base = x_base
        self.dim = int(dim)
        self.lo = float(lo)
        self.hi = float(hi)
        self.clamp_c = float(clamp_c)
        self.taper_w = float(taper_w)
        self.beta = None

    # -------------------------------------------------------- raw slice

    def _batch_at(self, t):
        xb = np.repeat(self.x_base[None], len(t), axis=0)
        xb.reshape(len(t), -1)[:, self.dim] = t
        return xb

    def slice_loss(self, t):
        """Clamped loss along the slice; scalar in, scalar out (or vector)."""
        scalar = np.isscalar(t) or np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.empty_like(ts)
        y = np.full(_CHUNK, self.label, dtype=np.int64)
        for s in range(0, len(ts), _CHUNK):
            chunk = ts[s:s + _CHUNK]
            out[s:s + _CHUNK] = nn.losses(
                self.model, self._batch_at(chunk), y[:len(chunk)], self.clamp_c)
        return float(out[0]) if scalar else out

    def slice_loss_and_grad(self, t):
        """(l(t), dl/dt) with the derivative from reverse-mode AD."""
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
        lv = np.empty_like(ts)
        gv = np.empty_like(ts)
        y = np.full(_CHUNK, self.label, dtype=np.int64)
        for s in range(0, len(ts), _CHUNK):
            chunk = ts[s:s + _CHUNK]
            vals, grads = nn.losses_and_input_grad(
                self.model, self._batch_at(chunk), y[:len(chunk)], self.clamp_c)
            lv[s:s + _CHUNK] = vals
            gv[s:s + _CHUNK] = grads.reshape(len(chunk), -1)[:, self.dim]
        return lv, gv

    # -------------------------------------------------------- taper window

    def taper(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.taper_w == 0.0:
            return np.ones_like(t)
        wl = self.taper_w * (self.hi - self.lo)
        out = np.ones_like(t)
        left = t < self.lo + wl
        right = t > self.hi - wl
        out = np.where(left, 0.5 * (1 - np.cos(np.pi * (t - self.lo) / wl)), out)
        out = np.where(right, 0.5 * (1 - np.cos(np.pi * (self.hi - t) / wl)), out)
        return np.where((t < self.lo) | (t > self.hi), 0.0, out)

    def taper_prime(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.taper_w == 0.0:
            return np.zeros_like(t)
        wl = self.taper_w * (self.hi - self.lo)
        out = np.zeros_like(t)
        left = t < self.lo + wl
        right = t > self.hi - wl
        out = np.where(left, 0.5 * np.pi / wl * np.sin(np.pi * (t - self.lo) / wl), out)
        out = np.where(right, -0.5 * np.pi / wl * np.sin(np.pi * (self.hi - t) / wl), out)
        return np.where((t < self.lo) | (t > self.hi), 0.0, out)

    # -------------------------------------------------------- wavefunction

    def _need_beta(self):
        if self.beta is None:
            raise RuntimeError("packet not normalized; call normalize() first")

    def psi(self, t):
        self._need_beta()
        scalar = np.isscalar(t) or np.ndim(t) == 0
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = self.slice_loss(ts) * self.taper(ts) / np.sqrt(self.beta)
        return float(out[0]) if scalar else out

    def psi_dpsi(self, t):
        """(psi, dpsi) in one AD pass (product rule with the taper)."""
        self._need_beta()
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
        lv, gv = self.slice_loss_and_grad(ts)
        root = np.sqrt(self.beta)
        tp = self.taper(ts)
        return lv * tp / root, (gv * tp + lv * self.taper_prime(ts)) / root

    def dpsi(self, t):
        scalar = np.isscalar(t) or np.ndim(t) == 0
        out = self.psi_dpsi(np.atleast_1d(t))[1]
        return float(out[0]) if scalar else out

    def dpsi_fd(self, t, h=None):
        """Central-difference derivative of psi; independent of the AD path."""
        self._need_beta()
        if h is None:
            h = 1e-4 * (self.hi - self.lo)
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return (self.psi(ts + h) - self.psi(ts - h)) / (2 * h)


class AnalyticPacket:
    """Closed-form packets for validating the quadrature pipeline."""

    def __init__(self, family, center, width, lo=None, hi=None):
        if family not in ("gaussian", "raised-cosine"):
            raise ValueError(f"unknown family {family!r}")
        self.family = family
        self.center = float(center)
        self.width = float(width)
        if family == "gaussian":
            self.lo = center - 8 * width if lo is None else float(lo)
            self.hi = center + 8 * width if hi is None else float(hi)
        else:
            self.lo = center - width if lo is None else float(lo)
            self.hi = center + width if hi is None else float(hi)
        self.beta = 1.0
        self.taper_w = 0.0

    def psi(self, t):
        t = np.asarray(t, dtype=np.float64)
        mu, s = self.center, self.width
        if self.family == "gaussian":
            return (np.pi * s * s) ** -0.25 * np.exp(-((t - mu) ** 2) / (2 * s * s))
        inside = np.abs(t - mu) <= s
        val = np.sqrt(1.0 / s) * np.cos(np.pi * (t - mu) / (2 * s))
        return np.where(inside, val, 0.0)

    def dpsi(self, t):
        t = np.asarray(t, dtype=np.float64)
        mu, s = self.center, self.width
        if self.family == "gaussian":
            return self.psi(t) * (-(t - mu) / (s * s))
        inside = np.abs(t - mu) <= s
        val = -np.sqrt(1.0 / s) * (np.pi / (2 * s)) * np.sin(np.pi * (t - mu) / (2 * s))
        return np.where(inside, val, 0.0)

    def psi_dpsi(self, t):
        return self.psi(t), self.dpsi(t)

    def sigma_exact(self):
        """(sigma_x, sigma_p) closed forms."""
        s = self.width
        if self.family == "gaussian":
            return s / np.sqrt(2), 1 / (s * np.sqrt(2))
        # raised cosine on half-width s: var_x = s^2(1/3 - 2/pi^2); E p^2 = (pi/(2s))^2
        return (s * np.sqrt(1 / 3 - 2 / np.pi ** 2), np.pi / (2 * s))


def normalize(packet, quad):
    """Set packet.beta from the squared, tapered loss slice.

    quad is a QuadratureConfig (see `uncertainty`) or any integrator callable
    f, lo, hi -> (estimate, standard_error).  Raises DegeneratePacket for a
    numerically flat slice.
    """
    from . import uncertainty

    def integrand(t):
        lv = packet.slice_loss(t)
        return (lv * packet.taper(t)) ** 2

    if callable(quad):
        beta, _ = quad(integrand, packet.lo, packet.hi)
    else:
        sub = uncertainty.subconfig(quad, "normalize", packet.label, packet.dim)
        beta, _ = uncertainty.integrate(integrand, packet.lo, packet.hi, sub)
    floor = DEGENERACY_SCALE * (packet.hi - packet.lo) * packet.clamp_c ** 2
    if beta < floor:
        raise DegeneratePacket(
            f"dimension {packet.dim}: beta={beta:.3e} below {floor:.3e}")
    packet.beta = float(beta)
    return packet


def boundary_mass(packet, grid=101):
    """Relative squared amplitude at the endpoints; gate for the bound."""
    ts = np.linspace(packet.lo, packet.hi, grid)
    vals = packet.psi(ts) ** 2
    peak = vals.max()
    if peak == 0.0:
        return 0.0
    return float(max(vals[0], vals[-1]) / peak)
