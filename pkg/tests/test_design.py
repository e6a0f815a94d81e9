import math

import numpy as np
import pytest

from gtadapt.core import make_rng
from gtadapt.design import DesignSpec, bernoulli_matrix, individual_plan


class TestBernoulliMatrix:
    def test_empty(self, rng):
        assert bernoulli_matrix(DesignSpec(0, tuple(range(5)), 0.3), 5, rng).shape == (0, 5)

    def test_near_full_inclusion(self, rng):
        pools = bernoulli_matrix(DesignSpec(20, tuple(range(50)), 0.9999), 50, rng)
        assert pools.sum(axis=1).mean() >= 49.5

    def test_mean_weight(self):
        q = math.log(2) / 10
        n = 10_000
        pools = bernoulli_matrix(DesignSpec(n, tuple(range(100)), q), 100, make_rng(0, 0, "w"))
        se = math.sqrt(100 * q * (1 - q) / n)
        assert abs(pools.sum(axis=1).mean() - 100 * q) <= 3 * se

    def test_outside_population_is_zero(self, rng):
        pools = bernoulli_matrix(DesignSpec(30, (1, 4, 7), 0.5), 10, rng)
        assert not pools[:, [0, 2, 3, 5, 6, 8, 9]].any()

    def test_row_prefix(self):
        spec_small = DesignSpec(10, tuple(range(8)), 0.3)
        spec_big = DesignSpec(25, tuple(range(8)), 0.3)
        a = bernoulli_matrix(spec_small, 8, make_rng(1, 0, "x"))
        b = bernoulli_matrix(spec_big, 8, make_rng(1, 0, "x"))
        assert np.array_equal(a, b[:10])

    def test_validation(self):
        with pytest.raises(ValueError):
            DesignSpec(-1, (0,), 0.5)
        with pytest.raises(ValueError):
            DesignSpec(3, (0,), 1.5)


class TestIndividualPlan:
    def test_single_item(self):
        pools, order = individual_plan([5], 3, 8)
        assert pools.shape == (3, 8) and pools[:, 5].all() and pools.sum() == 3
        assert order.tolist() == [5, 5, 5]

    def test_empty(self):
        pools, order = individual_plan([], 7, 4)
        assert pools.shape == (0, 4) and order.size == 0

    def test_counts(self):
        pools, order = individual_plan([9, 2], 2, 10)
        assert pools.shape[0] == 4 and order.tolist() == [2, 2, 9, 9]
        assert pools.sum(axis=0)[2] == 2 and pools.sum(axis=0)[9] == 2
        assert (pools.sum(axis=1) == 1).all()
