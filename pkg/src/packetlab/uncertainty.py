"""Monte-Carlo quadrature and the conjugate-pair observables.

For each packet dimension we estimate the mean input value <x>, the mean
derivative <p>, and the spreads sigma_x, sigma_p, each with a reported
standard error.  sigma_p uses the Hermitian quadratic form
integral(psi'^2) - <p>^2, which is nonnegative for real wavefunctions and
equals the usual quantum variance when the boundary terms vanish; that is
the reading under which the sigma_x * sigma_p >= 1/2 bound is a theorem.

Aggregation: dx[Y] = sqrt(sum_i sigma_x_i), dp[Y] = sqrt(sum_i sigma_p_i)
over the sampled dimensions of a class, optionally averaged over classes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .packet import NeuralPacket, DegeneratePacket, boundary_mass

__all__ = [
    "QuadratureConfig", "DimensionStats", "UncertaintyReport",
    "NumericalInconsistency", "QuadratureExhausted",
    "subconfig", "integrate", "expectation_x", "expectation_p",
    "sigma_x", "sigma_p", "commutator_check", "measure_packet",
    "measure_packet_fused", "measure_dimensions", "aggregate",
]

BOUNDARY_GATE = 1e-3


class NumericalInconsistency(RuntimeError):
    pass


class QuadratureExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureConfig:
    n: int = 20000
    seed: object = 0              # int, or a tuple for derived substreams
    estimator: str = "mc"         # "mc" | "trapezoid"
    grid: int = 4097              # trapezoid points (odd keeps Richardson exact)

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("sample count must be >= 100")
        if self.estimator not in ("mc", "trapezoid"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


def _tag_int(tag):
    return zlib.crc32(tag.encode())


def subconfig(cfg, tag, *extra):
    """Derived config whose RNG stream is unique to (seed, tag, extra)."""
    base = cfg.seed if isinstance(cfg.seed, tuple) else (cfg.seed,)
    return replace(cfg, seed=base + (_tag_int(tag),) + tuple(int(e) for e in extra))


def _rng(cfg):
    seed = cfg.seed if isinstance(cfg.seed, tuple) else (cfg.seed,)
    return np.random.default_rng(np.random.SeedSequence(seed))


def _mc_points(cfg, lo, hi):
    return lo + (hi - lo) * _rng(cfg).random(cfg.n)


def integrate(f, lo, hi, cfg):
    """Integral of f over [lo, hi] with a standard-error estimate.

    MC: volume * mean over uniform samples, SE from the sample deviation.
    Trapezoid: composite rule, SE as the Richardson delta against the
    half-resolution grid.
    """
    if cfg.estimator == "mc":
        t = _mc_points(cfg, lo, hi)
        v = np.asarray(f(t), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericalInconsistency("non-finite integrand sample")
        vol = hi - lo
        est = vol * v.mean()
        se = vol * v.std(ddof=1) / np.sqrt(cfg.n)
        return float(est), float(se)
    m = cfg.grid if cfg.grid % 2 == 1 else cfg.grid + 1
    t = np.linspace(lo, hi, m)
    v = np.asarray(f(t), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericalInconsistency("non-finite integrand sample")
    fine = np.trapezoid(v, t)
    coarse = np.trapezoid(v[::2], t[::2])
    return float(fine), float(abs(fine - coarse) / 3.0)


# -------------------------------------------------------------- observables

def _packet_samples(pkt, cfg, tag):
    """(t, psi, dpsi, weight-mean closure) for either estimator."""
    sub = subconfig(cfg, tag, getattr(pkt, "label", 0), getattr(pkt, "dim", 0))
    vol = pkt.hi - pkt.lo
    if cfg.estimator == "mc":
        t = _mc_points(sub, pkt.lo, pkt.hi)
        psi, dpsi = pkt.psi_dpsi(t)

        def mean_se(values):
            values = np.asarray(values, dtype=np.float64)
            est = vol * values.mean()
            se = vol * values.std(ddof=1) / np.sqrt(len(values))
            return float(est), float(se)

        return t, psi, dpsi, mean_se
    m = cfg.grid if cfg.grid % 2 == 1 else cfg.grid + 1
    t = np.linspace(pkt.lo, pkt.hi, m)
    psi, dpsi = pkt.psi_dpsi(t)

    def mean_se(values):
        fine = np.trapezoid(values, t)
        coarse = np.trapezoid(values[::2], t[::2])
        return float(fine), float(abs(fine - coarse) / 3.0)

    return t, psi, dpsi, mean_se


def expectation_x(pkt, cfg):
    """<x> = integral of t * psi(t)^2."""
    t, psi, _, mean_se = _packet_samples(pkt, cfg, "ex")
    return mean_se(t * psi * psi)


def expectation_p(pkt, cfg):
    """<p> = integral of psi * psi'; cross-checked against the boundary
    closed form (psi(hi)^2 - psi(lo)^2) / 2."""
    t, psi, dpsi, mean_se = _packet_samples(pkt, cfg, "ep")
    val, se = mean_se(psi * dpsi)
    closed = 0.5 * (float(np.asarray(pkt.psi(np.array([pkt.hi])))[0]) ** 2
                    - float(np.asarray(pkt.psi(np.array([pkt.lo])))[0]) ** 2)
    if abs(val - closed) > 6 * se + 1e-6:
        raise NumericalInconsistency(
            f"<p> quadrature {val:.6g} vs boundary form {closed:.6g} (se {se:.2g})")
    return val, se


def sigma_x(pkt, cfg):
    """Spread of the input coordinate under psi^2."""
    t, psi, _, mean_se = _packet_samples(pkt, cfg, "sx")
    ex, _ = mean_se(t * psi * psi)
    var, var_se = mean_se((t - ex) ** 2 * psi * psi)
    return _sqrt_stat(var, var_se, "sigma_x")


def sigma_p(pkt, cfg):
    """Spread of the derivative: sqrt(integral(psi'^2) - <p>^2)."""
    t, psi, dpsi, mean_se = _packet_samples(pkt, cfg, "sp")
    ep, ep_se = mean_se(psi * dpsi)
    p2, p2_se = mean_se(dpsi * dpsi)
    var = p2 - ep * ep
    var_se = np.hypot(p2_se, 2 * abs(ep) * ep_se)
    return _sqrt_stat(var, var_se, "sigma_p")


def _sqrt_stat(var, var_se, what):
    if var < -3 * var_se:
        raise NumericalInconsistency(f"{what}^2 = {var:.3e} < -3 SE ({var_se:.3e})")
    var = max(var, 0.0)
    sd = np.sqrt(var)
    se = var_se / (2 * sd) if sd > 0 else np.sqrt(var_se)
    return float(sd), float(se)


def commutator_check(pkt, grid_size=101, h=None):
    """Max residual of ([p, x] psi)(t) = psi(t) on a uniform grid.

    Both derivative terms use central differences with step h, so the
    residual measures finite-difference error only; it vanishes as O(h^2)
    for smooth psi.
    """
    if h is None:
        h = (pkt.hi - pkt.lo) / 1e5
    t = np.linspace(pkt.lo + h, pkt.hi - h, grid_size)
    pp = np.asarray(pkt.psi(t + h))
    pm = np.asarray(pkt.psi(t - h))
    p0 = np.asarray(pkt.psi(t))
    d_tpsi = ((t + h) * pp - (t - h) * pm) / (2 * h)
    dpsi_c = (pp - pm) / (2 * h)
    residual = d_tpsi - t * dpsi_c - p0
    return float(np.abs(residual).max())


# -------------------------------------------------------------- per-dim stats

@dataclass
class DimensionStats:
    dim: int
    label: int
    ex: float
    ep: float
    sx: float
    sp: float
    se_ex: float
    se_ep: float
    se_sx: float
    se_sp: float
    product: float
    boundary_mass: float

    @property
    def relative_se(self):
        """Combined relative standard error of the sigma product."""
        terms = 0.0
        if self.sx > 0:
            terms += (self.se_sx / self.sx) ** 2
        if self.sp > 0:
            terms += (self.se_sp / self.sp) ** 2
        return float(np.sqrt(terms))


def measure_packet(pkt, cfg):
    """All four observables of one normalized packet from one shared batch
    of quadrature samples (plus the <p> boundary cross-check)."""
    t, psi, dpsi, mean_se = _packet_samples(pkt, cfg, "measure")
    vol = pkt.hi - pkt.lo
    ex, se_ex = mean_se(t * psi * psi)
    ep, se_ep = mean_se(psi * dpsi)
    closed = 0.5 * (float(np.asarray(pkt.psi(np.array([pkt.hi])))[0]) ** 2
                    - float(np.asarray(pkt.psi(np.array([pkt.lo])))[0]) ** 2)
    if abs(ep - closed) > 6 * se_ep + 1e-6:
        raise NumericalInconsistency(
            f"<p> quadrature {ep:.6g} vs boundary form {closed:.6g}")
    var_x, se_vx = mean_se((t - ex) ** 2 * psi * psi)
    sx, se_sx = _sqrt_stat(var_x, se_vx, "sigma_x")
    p2, se_p2 = mean_se(dpsi * dpsi)
    sp, se_sp = _sqrt_stat(p2 - ep * ep, float(np.hypot(se_p2, 2 * abs(ep) * se_ep)),
                           "sigma_p")
    if sx > vol / 2 + 3 * se_sx + 1e-9:
        raise NumericalInconsistency(f"sigma_x {sx:.4g} exceeds half the domain")
    return DimensionStats(
        dim=getattr(pkt, "dim", 0), label=getattr(pkt, "label", 0),
        ex=ex, ep=ep, sx=sx, sp=sp,
        se_ex=se_ex, se_ep=se_ep, se_sx=se_sx, se_sp=se_sp,
        product=sx * sp, boundary_mass=boundary_mass(pkt))


def measure_packet_fused(pkt, cfg):
    """Normalize and measure one packet from a single quadrature batch.

    One forward+backward evaluation of the loss slice serves both the
    normalization constant and all four observables (self-normalized ratio
    estimators with matching standard errors).  Sets pkt.beta as a side
    effect; raises DegeneratePacket for flat slices.
    """
    from .packet import DEGENERACY_SCALE
    sub = subconfig(cfg, "measure", getattr(pkt, "label", 0),
                    getattr(pkt, "dim", 0))
    vol = pkt.hi - pkt.lo
    if cfg.estimator == "mc":
        t = _mc_points(sub, pkt.lo, pkt.hi)
    else:
        m = cfg.grid if cfg.grid % 2 == 1 else cfg.grid + 1
        t = np.linspace(pkt.lo, pkt.hi, m)
    lv, dl = pkt.slice_loss_and_grad(t)
    tp = pkt.taper(t)
    g = lv * tp
    gp = dl * tp + lv * pkt.taper_prime(t)

    if cfg.estimator == "mc":
        def mean_se(values, ratio_base=None):
            est = vol * values.mean()
            resid = values - est * ratio_base if ratio_base is not None else values
            return float(est), float(vol * resid.std(ddof=1) / np.sqrt(len(values)))
    else:
        def mean_se(values, ratio_base=None):
            fine = np.trapezoid(values, t)
            coarse = np.trapezoid(values[::2], t[::2])
            return float(fine), float(abs(fine - coarse) / 3.0)

    beta, _ = mean_se(g * g)
    floor = DEGENERACY_SCALE * vol * pkt.clamp_c ** 2
    if beta < floor:
        raise DegeneratePacket(
            f"dimension {pkt.dim}: beta={beta:.3e} below {floor:.3e}")
    pkt.beta = float(beta)
    psi2 = g * g / beta                    # integrates to 1 by construction
    psi = g / np.sqrt(beta)
    dpsi = gp / np.sqrt(beta)

    ex, se_ex = mean_se(t * psi2, psi2)
    ep, se_ep = mean_se(psi * dpsi, psi2)
    closed = 0.5 * (float(np.asarray(pkt.psi(np.array([pkt.hi])))[0]) ** 2
                    - float(np.asarray(pkt.psi(np.array([pkt.lo])))[0]) ** 2)
    if abs(ep - closed) > 6 * se_ep + 1e-6:
        raise NumericalInconsistency(
            f"<p> quadrature {ep:.6g} vs boundary form {closed:.6g}")
    var_x, se_vx = mean_se((t - ex) ** 2 * psi2, psi2)
    sx, se_sx = _sqrt_stat(var_x, se_vx, "sigma_x")
    p2, se_p2 = mean_se(dpsi * dpsi, psi2)
    sp, se_sp = _sqrt_stat(p2 - ep * ep, float(np.hypot(se_p2, 2 * abs(ep) * se_ep)),
                           "sigma_p")
    if sx > vol / 2 + 3 * se_sx + 1e-9:
        raise NumericalInconsistency(f"sigma_x {sx:.4g} exceeds half the domain")
    return DimensionStats(
        dim=getattr(pkt, "dim", 0), label=getattr(pkt, "label", 0),
        ex=ex, ep=ep, sx=sx, sp=sp,
        se_ex=se_ex, se_ep=se_ep, se_sx=se_sx, se_sp=se_sp,
        product=sx * sp, boundary_mass=boundary_mass(pkt))


def measure_dimensions(model, label, x_base, dims, cfg, domain=(0.0, 1.0),
                       clamp_c=None, taper_w=None, total_dims=None):
    """DimensionStats for the requested dimensions of one class.

    Degenerate (flat) dimensions are skipped and replaced by fresh random
    indices from a seeded stream until the requested count of valid
    dimensions is reached; raises QuadratureExhausted if the input space
    runs out first.  Returns (stats, skipped_dims).
    """
    from . import nn as _nn
    if len(dims) == 0:
        raise ValueError("dims must be nonempty")
    clamp_c = _nn.DEFAULT_CLAMP if clamp_c is None else clamp_c
    x_base = np.asarray(x_base, dtype=np.float64)
    size = x_base.size if total_dims is None else total_dims
    lo, hi = domain

    def bounds(i):
        l = lo if np.isscalar(lo) else float(np.reshape(lo, -1)[i])
        h = hi if np.isscalar(hi) else float(np.reshape(hi, -1)[i])
        return l, h

    base_seed = cfg.seed if isinstance(cfg.seed, tuple) else (cfg.seed,)
    rng = np.random.default_rng(
        np.random.SeedSequence(base_seed + (_tag_int("respawn"), int(label))))
    spare = iter(rng.permutation(size))
    tried = set()
    queue = list(dims)
    stats, skipped = [], []
    while queue:
        i = int(queue.pop(0))
        kwargs = {} if taper_w is None else {"taper_w": taper_w}
        l, h = bounds(i)
        pkt = NeuralPacket(model, label, x_base, i, l, h, clamp_c=clamp_c,
                           **kwargs)
        try:
            stats.append(measure_packet_fused(pkt, cfg))
            tried.add(i)
        except DegeneratePacket:
            skipped.append(i)
            tried.add(i)
            replacement = None
            for cand in spare:
                if int(cand) not in tried and int(cand) not in queue:
                    replacement = int(cand)
                    break
            if replacement is None:
                raise QuadratureExhausted(
                    f"only {len(stats)} valid dimensions before exhausting "
                    f"the input space (label {label})")
            queue.append(replacement)
    return stats, skipped


# -------------------------------------------------------------- aggregation

@dataclass
class UncertaintyReport:
    mode: str                                  # "single-class" | "class-mean"
    dx_by_class: dict
    dp_by_class: dict
    dx_se_by_class: dict
    dp_se_by_class: dict
    dims_by_class: dict
    skipped_by_class: dict
    dx: float = 0.0
    dp: float = 0.0
    dx_se: float = 0.0
    dp_se: float = 0.0
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)


def aggregate(stats, mode="single-class", skipped=None, quad=None):
    """Fold per-dimension spreads into dx = sqrt(sum sigma_x_i) per class."""
    if not stats:
        raise ValueError("no dimension statistics to aggregate")
    by_class = {}
    for st in stats:
        by_class.setdefault(st.label, []).append(st)
    dxc, dpc, dxs, dps, dims = {}, {}, {}, {}, {}
    for label, group in sorted(by_class.items()):
        sum_sx = sum(s.sx for s in group)
        sum_sp = sum(s.sp for s in group)
        dx = np.sqrt(sum_sx)
        dp = np.sqrt(sum_sp)
        se_sum_sx = np.sqrt(sum(s.se_sx ** 2 for s in group))
        se_sum_sp = np.sqrt(sum(s.se_sp ** 2 for s in group))
        dxc[label] = float(dx)
        dpc[label] = float(dp)
        dxs[label] = float(se_sum_sx / (2 * dx)) if dx > 0 else 0.0
        dps[label] = float(se_sum_sp / (2 * dp)) if dp > 0 else 0.0
        dims[label] = [s.dim for s in group]
    if mode == "single-class":
        if len(dxc) != 1:
            raise ValueError("single-class mode needs stats from exactly one class")
        (label,) = dxc
        agg = (dxc[label], dpc[label], dxs[label], dps[label])
    elif mode == "class-mean":
        k = len(dxc)
        agg = (sum(dxc.values()) / k, sum(dpc.values()) / k,
               np.sqrt(sum(v ** 2 for v in dxs.values())) / k,
               np.sqrt(sum(v ** 2 for v in dps.values())) / k)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return UncertaintyReport(
        mode=mode, dx_by_class=dxc, dp_by_class=dpc,
        dx_se_by_class=dxs, dp_se_by_class=dps, dims_by_class=dims,
        skipped_by_class=dict(skipped or {}),
        dx=float(agg[0]), dp=float(agg[1]), dx_se=float(agg[2]),
        dp_se=float(agg[3]), quad=quad or QuadratureConfig())
