import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gtadapt.core import BinaryChannelLaw, Channel, make_rng
from gtadapt.harness import brute_force_capacity, empirical_density_mean
from gtadapt.infotheory import (
    LN2, DensityContext, asymptotic_mi, binary_convolution, binary_entropy, binary_kl, channel_capacity,
    exact_conditional_mi, information_density, mutual_information,
)

mpmath.mp.dps = 40


def mp_entropy(r):
    r = mpmath.mpf(r)
    return float(-r * mpmath.log(r) - (1 - r) * mpmath.log(1 - r))


def mp_kl(a, b):
    a, b = mpmath.mpf(a), mpmath.mpf(b)
    return float(a * mpmath.log(a / b) + (1 - a) * mpmath.log((1 - a) / (1 - b)))


class TestBinaryMeasures:
    def test_entropy_values(self):
        assert binary_entropy(0.5) == pytest.approx(LN2, abs=1e-15)
        assert binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
        assert binary_entropy(0.11) == pytest.approx(mp_entropy("0.11"), abs=1e-12)

    def test_entropy_rejects(self):
        with pytest.raises(ValueError):
            binary_entropy(1.5)

    def test_kl_values(self):
        assert binary_kl(0.3, 0.3) == 0.0
        assert binary_kl(0.5, 0.2) == pytest.approx(0.5 * math.log(1 / (4 * 0.2 * 0.8)), abs=1e-12)
        assert binary_kl(0.9, 0.11) == pytest.approx(mp_kl("0.9", "0.11"), abs=1e-12)
        assert binary_kl(0.5, 0.0) == math.inf

    @given(st.floats(0, 1), st.floats(0.001, 0.999))
    def test_kl_nonnegative(self, a, b):
        assert binary_kl(a, b) >= -1e-15

    def test_convolution(self):
        assert binary_convolution(0.0, 0.37) == 0.37
        assert binary_convolution(0.5, 0.12) == 0.5
        assert binary_convolution(0.3, 0.2) == pytest.approx(0.38, abs=1e-15)


class TestCapacity:
    def test_symmetric(self):
        c, ps = channel_capacity(Channel.symmetric(0.11))
        assert c == pytest.approx(LN2 - binary_entropy(0.11), abs=1e-8)
        assert ps == pytest.approx(0.5, abs=1e-10)

    def test_noiseless(self):
        c, ps = channel_capacity(Channel.noiseless())
        assert c == pytest.approx(LN2, abs=1e-12) and ps == pytest.approx(0.5, abs=1e-10)

    def test_z_closed_form_and_brute_force(self):
        rho = 0.5
        closed = math.log(1 + (1 - rho) * rho ** (rho / (1 - rho)))
        brute = brute_force_capacity(Channel.z(rho))
        c, _ = channel_capacity(Channel.z(rho))
        assert brute == pytest.approx(closed, abs=1e-8)
        assert c == pytest.approx(closed, abs=1e-8)

    @pytest.mark.parametrize("rho", [0.05, 0.3, 0.8])
    def test_z_matches_reverse_z(self, rho):
        assert channel_capacity(Channel.z(rho))[0] == pytest.approx(channel_capacity(Channel.reverse_z(rho))[0],
                                                                    abs=1e-8)

    def test_argmax_is_stationary(self):
        law = Channel.z(0.3).law
        c, ps = channel_capacity(law)
        assert mutual_information(ps, law) == pytest.approx(c, abs=1e-15)
        assert mutual_information(ps + 1e-5, law) < c and mutual_information(ps - 1e-5, law) < c

    def test_degenerate(self):
        assert channel_capacity(BinaryChannelLaw(0.4, 0.4)) == (0.0, 0.5)


class TestConditionalMI:
    def test_identity_channel_uniform_input(self):
        ctx = DensityContext(1, 1, LN2, Channel.noiseless().law, 0.5)
        assert exact_conditional_mi(ctx) == pytest.approx(LN2, abs=1e-12)

    def test_vanishes_with_q(self):
        ctx = DensityContext(5, 2, 1e-12, Channel.symmetric(0.1).law, 1e-12)
        assert exact_conditional_mi(ctx) < 1e-9

    def test_constant_fraction_regime(self):
        ctx = DensityContext.build(500, 500, Channel.symmetric(0.11))
        assert exact_conditional_mi(ctx) == pytest.approx(asymptotic_mi(ctx, "constant", 1.0), rel=0.01)

    def test_alpha_one_identity(self):
        ctx = DensityContext.build(10, 10, Channel.symmetric(0.11))
        assert asymptotic_mi(ctx, "constant", 1.0) == pytest.approx(LN2 - binary_entropy(0.11), abs=1e-10)

    def test_small_fraction_direct(self):
        rho, k, ell = 0.11, 100_000, 100
        ctx = DensityContext.build(k, ell, Channel.symmetric(rho))
        direct = 0.5 * LN2 * 1e-3 * (1 - 2 * rho) * math.log((1 - rho) / rho)
        assert asymptotic_mi(ctx, "small") == pytest.approx(direct, rel=1e-12)
        assert exact_conditional_mi(ctx) == pytest.approx(direct, rel=0.02)

    def test_asymptotics_need_symmetric(self):
        with pytest.raises(NotImplementedError):
            asymptotic_mi(DensityContext.build(4, 2, Channel.z(0.3)), "small")

    def test_bad_context(self):
        with pytest.raises(ValueError):
            DensityContext.build(3, 4, Channel.symmetric(0.1))


class TestInformationDensity:
    law = Channel.symmetric(0.11).law

    def test_saturated_tests_contribute_nothing(self):
        ctx = DensityContext.build(3, 1, self.law)
        assert information_density([[1], [0]], [[1, 0], [0, 1]], [1, 0], ctx) == 0.0

    def test_empty(self):
        ctx = DensityContext.build(3, 1, self.law)
        assert information_density(np.zeros((0, 1)), np.zeros((0, 2)), [], ctx) == 0.0

    @pytest.mark.parametrize("ell", [1, 2, 3])
    def test_single_test_vs_exhaustive_marginal(self, ell):
        ctx = DensityContext.build(4, ell, self.law)
        q = ctx.q_one
        marginal = 0.0
        for bits in itertools.product((0, 1), repeat=ell):
            w = np.prod([q if b else 1 - q for b in bits])
            marginal += w * (1 - 0.11 if any(bits) else 0.11)
        x_dif = np.zeros((1, ell), dtype=bool)
        x_dif[0, 0] = True
        got = information_density(x_dif, np.zeros((1, 4 - ell)), [1], ctx)
        assert got == pytest.approx(math.log((1 - 0.11) / marginal), abs=1e-12)

    def test_impossible_outcome(self):
        ctx = DensityContext.build(2, 1, Channel.noiseless().law)
        assert information_density([[1]], [[0]], [0], ctx) == -math.inf

    def test_empirical_mean_matches_mi(self):
        ctx = DensityContext.build(6, 2, Channel.symmetric(0.11))
        mean, se = empirical_density_mean(ctx, 100_000, make_rng(3, 0, "density"))
        assert abs(mean - exact_conditional_mi(ctx)) <= 3 * se
