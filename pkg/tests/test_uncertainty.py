"""Quadrature, observable, and aggregation tests against closed forms."""

import numpy as np
import pytest

from packetlab import data, nn, uncertainty
from packetlab.packet import AnalyticPacket, NeuralPacket, normalize


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(3)
    ds = data.Dataset(rng.random((128, 784)), rng.integers(0, 10, 128))
    m = nn.build_model("mlp2", seed=1)
    nn.train(m, ds, nn.TrainConfig(lr=0.05, epochs=2, seed=0))
    return m


def test_quadrature_config_validation():
    with pytest.raises(ValueError):
        uncertainty.QuadratureConfig(n=50)
    with pytest.raises(ValueError):
        uncertainty.QuadratureConfig(estimator="simpson")


def test_mc_integral_of_square():
    cfg = uncertainty.QuadratureConfig(n=100000, seed=0)
    val, se = uncertainty.integrate(lambda t: t * t, 0.0, 2.0, cfg)
    assert abs(val - 8 / 3) <= 3 * se


def test_trapezoid_integral_of_square():
    cfg = uncertainty.QuadratureConfig(estimator="trapezoid", grid=4097)
    val, se = uncertainty.integrate(lambda t: t * t, 0.0, 2.0, cfg)
    assert abs(val - 8 / 3) < 1e-6
    assert se < 1e-6


def test_non_finite_integrand_rejected():
    cfg = uncertainty.QuadratureConfig(n=500, seed=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(uncertainty.NumericalInconsistency):
            uncertainty.integrate(lambda t: 1.0 / (t - t), 0.0, 1.0, cfg)


def test_subconfig_streams_are_distinct_and_stable():
    cfg = uncertainty.QuadratureConfig(n=500, seed=4)
    a = uncertainty.subconfig(cfg, "measure", 8, 3)
    b = uncertainty.subconfig(cfg, "measure", 8, 4)
    c = uncertainty.subconfig(cfg, "measure", 8, 3)
    assert a.seed == c.seed
    assert a.seed != b.seed


def test_gaussian_observables_match_closed_forms():
    pkt = AnalyticPacket("gaussian", 0.3, 0.8)
    cfg = uncertainty.QuadratureConfig(n=100000, seed=0)
    ex, se_ex = uncertainty.expectation_x(pkt, cfg)
    assert abs(ex - 0.3) <= 4 * se_ex + 1e-4
    ep, se_ep = uncertainty.expectation_p(pkt, cfg)
    assert abs(ep) <= 4 * se_ep + 1e-4
    sx, se_sx = uncertainty.sigma_x(pkt, cfg)
    assert abs(sx - 0.8 / np.sqrt(2)) <= 4 * se_sx + 1e-4
    sp, se_sp = uncertainty.sigma_p(pkt, cfg)
    assert abs(sp - 1 / (0.8 * np.sqrt(2))) <= 4 * se_sp + 1e-4


def test_estimator_consistency():
    pkt = AnalyticPacket("gaussian", 0.0, 1.0)
    mc = uncertainty.QuadratureConfig(n=1000000, seed=0)
    tr = uncertainty.QuadratureConfig(estimator="trapezoid", grid=100001)
    for fn in (uncertainty.expectation_x, uncertainty.expectation_p,
               uncertainty.sigma_x, uncertainty.sigma_p):
        a, se_a = fn(pkt, mc)
        b, se_b = fn(pkt, tr)
        assert abs(a - b) <= 3 * max(se_a, se_b) + 1e-6


def test_uniform_sigma_x():
    class Uniform:
        lo, hi = 0.0, 1.0

        def psi(self, t):
            return np.ones_like(np.asarray(t, dtype=np.float64))

        def dpsi(self, t):
            return np.zeros_like(np.asarray(t, dtype=np.float64))

        def psi_dpsi(self, t):
            return self.psi(t), self.dpsi(t)

    cfg = uncertainty.QuadratureConfig(estimator="trapezoid", grid=4097)
    sx, _ = uncertainty.sigma_x(Uniform(), cfg)
    assert sx == pytest.approx(1 / np.sqrt(12), abs=1e-6)


def test_expectation_p_boundary_cross_check_fires():
    class Liar:
        """Claims psi' = 1 while psi is flat; the boundary form disagrees."""
        lo, hi = 0.0, 1.0

        def psi(self, t):
            return np.ones_like(np.asarray(t, dtype=np.float64))

        def dpsi(self, t):
            return np.ones_like(np.asarray(t, dtype=np.float64))

        def psi_dpsi(self, t):
            return self.psi(t), self.dpsi(t)

    cfg = uncertainty.QuadratureConfig(n=5000, seed=0)
    with pytest.raises(uncertainty.NumericalInconsistency):
        uncertainty.expectation_p(Liar(), cfg)


def test_commutator_residual_shrinks_quadratically():
    pkt = AnalyticPacket("gaussian", 0.0, 1.0)
    h = (pkt.hi - pkt.lo) / 1e3
    r = [uncertainty.commutator_check(pkt, h=h / k) for k in (1, 2, 4)]
    assert r[0] / r[1] == pytest.approx(4.0, rel=0.15)
    assert r[1] / r[2] == pytest.approx(4.0, rel=0.15)


def test_commutator_linear_psi_is_exact():
    class Linear:
        lo, hi = 0.0, 1.0

        def psi(self, t):
            return np.sqrt(3.0) * np.asarray(t, dtype=np.float64)

    assert uncertainty.commutator_check(Linear()) < 1e-9


def test_measure_packet_is_seed_deterministic(model):
    x_base = np.full(784, 0.5)
    cfg = uncertainty.QuadratureConfig(n=2000, seed=9)
    reports = []
    for _ in range(2):
        pkt = NeuralPacket(model, 8, x_base, 17, 0.0, 1.0)
        normalize(pkt, cfg)
        reports.append(uncertainty.measure_packet(pkt, cfg))
    assert reports[0] == reports[1]


def test_fused_measurement_agrees_with_two_pass(model):
    x_base = np.full(784, 0.5)
    cfg = uncertainty.QuadratureConfig(n=4000, seed=2)
    pkt = NeuralPacket(model, 8, x_base, 40, 0.0, 1.0)
    normalize(pkt, cfg)
    slow = uncertainty.measure_packet(pkt, cfg)
    pkt2 = NeuralPacket(model, 8, x_base, 40, 0.0, 1.0)
    fast = uncertainty.measure_packet_fused(pkt2, cfg)
    assert fast.sx == pytest.approx(slow.sx, abs=3 * (slow.se_sx + fast.se_sx))
    assert fast.sp == pytest.approx(slow.sp, abs=3 * (slow.se_sp + fast.se_sp))
    assert pkt2.beta == pytest.approx(pkt.beta, rel=0.1)


def test_measure_dimensions_repeated_dim_is_deterministic(model):
    x_base = np.full(784, 0.5)
    cfg = uncertainty.QuadratureConfig(n=1000, seed=0)
    stats, skipped = uncertainty.measure_dimensions(model, 8, x_base,
                                                    [11, 11], cfg)
    assert skipped == []
    assert stats[0] == stats[1]


def test_measure_dimensions_all_degenerate_errors():
    m = nn.build_model("mlp2", seed=0)
    for name in m.param_names:
        m.params[name] = np.zeros_like(m.params[name])
    # a huge fixed logit for the true class drives the loss to exactly zero
    # regardless of the input, so every slice is numerically flat
    m.params["fc2.b"] = np.array([1000.0] + [0.0] * 9)
    x_base = np.full(784, 0.5)
    cfg = uncertainty.QuadratureConfig(n=500, seed=0)
    with pytest.raises(uncertainty.QuadratureExhausted):
        uncertainty.measure_dimensions(m, 0, x_base, [0], cfg, total_dims=4)


def test_aggregate_single_dimension():
    st = uncertainty.DimensionStats(dim=0, label=8, ex=0, ep=0, sx=0.25,
                                    sp=1.0, se_ex=0, se_ep=0, se_sx=0.01,
                                    se_sp=0.02, product=0.25,
                                    boundary_mass=0.0)
    report = uncertainty.aggregate([st])
    assert report.dx == pytest.approx(0.5)
    assert report.dp == pytest.approx(1.0)


def test_aggregate_class_mean():
    def stat(label, sx):
        return uncertainty.DimensionStats(dim=0, label=label, ex=0, ep=0,
                                          sx=sx, sp=sx, se_ex=0, se_ep=0,
                                          se_sx=0, se_sp=0, product=sx * sx,
                                          boundary_mass=0.0)

    report = uncertainty.aggregate([stat(0, 0.16), stat(1, 0.36)],
                                   mode="class-mean")
    assert report.dx == pytest.approx((0.4 + 0.6) / 2)
    assert report.dx_by_class == {0: pytest.approx(0.4), 1: pytest.approx(0.6)}


def test_aggregate_errors():
    with pytest.raises(ValueError):
        uncertainty.aggregate([])
    st = uncertainty.DimensionStats(dim=0, label=0, ex=0, ep=0, sx=0.1,
                                    sp=0.1, se_ex=0, se_ep=0, se_sx=0,
                                    se_sp=0, product=0.01, boundary_mass=0.0)
    other = uncertainty.DimensionStats(dim=0, label=1, ex=0, ep=0, sx=0.1,
                                       sp=0.1, se_ex=0, se_ep=0, se_sx=0,
                                       se_sp=0, product=0.01,
                                       boundary_mass=0.0)
    with pytest.raises(ValueError):
        uncertainty.aggregate([st, other], mode="single-class")
    with pytest.raises(ValueError):
        uncertainty.aggregate([st], mode="median")
