import math

import numpy as np
import pytest

from gtadapt.core import CardinalitySpec, Channel, Streams, distance, make_rng, run_tests, sample_defective_set
from gtadapt.decoders import (
    Ambiguous, ItemScoreBoard, NoValidSet, ThresholdTable, TooLarge, any_positive, default_thresholds,
    log_count_threshold, majority_vote, ncomp_decode, ncomp_decode_zchannel, ncomp_gap, separate_decode,
    separate_scores, threshold_decode, threshold_decode_unknown_k, top_m_by_positives, unknown_k_thresholds,
)
from gtadapt.design import DesignSpec, bernoulli_matrix
from gtadapt.harness import fixtures
from gtadapt.infotheory import LN2, binary_kl

SYM = Channel.symmetric(0.11)


def draw(seed, p, spec, channel, n, q):
    st = Streams(seed, 0)
    s = sample_defective_set(p, spec, st.get("defectives"))
    pools = bernoulli_matrix(DesignSpec(n, tuple(range(p)), q), p, st.get("design"))
    return s, pools, run_tests(pools, s, channel, st.get("noise"))


def exact_log_comb(n, r):
    return math.log(math.comb(n, r))


class TestThresholds:
    def test_full_split_boundary(self):
        p, k = 12, 6
        t = default_thresholds(p, k, 0, delta1=1.0)
        assert t[(k, k)] == pytest.approx(exact_log_comb(p - k, k) + math.log(k), abs=1e-12)

    def test_small_arithmetic(self):
        assert log_count_threshold(10, 2, 1, 0.5) == pytest.approx(math.log(64), abs=1e-12)

    def test_lgamma_vs_big_integers(self):
        p, k, ell, d = 1000, 10, 5, 0.05
        exact = exact_log_comb(p - k, ell) + math.log(k / d) + exact_log_comb(k, ell)
        assert log_count_threshold(p, k, ell, d) == pytest.approx(exact, rel=1e-9)

    def test_keys_respect_dmax(self):
        assert sorted(default_thresholds(20, 4, dmax=2).gamma) == [(4, 3), (4, 4)]
        with pytest.raises(ValueError):
            default_thresholds(20, 4, dmax=4)

    def test_table_validation(self):
        with pytest.raises(ValueError):
            ThresholdTable({(1, 1): math.inf}, 0.1)
        with pytest.raises(ValueError):
            ThresholdTable({}, 0.0)

    def test_unknown_k_without_scaling_matches_known(self):
        t = unknown_k_thresholds(16, [2], 0, 0.05)
        assert t.gamma == default_thresholds(16, 2, 0, 0.05).gamma


class TestThresholdDecode:
    def test_noiseless_recovery(self):
        p, k = 16, 2
        n = math.ceil(5 * k * math.log2(p))
        hits = 0
        for i in range(100):
            s, pools, y = draw(i, p, CardinalitySpec.exact(k), Channel.noiseless(), n, LN2 / k)
            try:
                hits += threshold_decode(pools, y, p, k, channel=Channel.noiseless()) == s
            except (NoValidSet, Ambiguous):
                pass
        assert hits >= 99

    def test_no_evidence(self):
        with pytest.raises(NoValidSet):
            threshold_decode(np.zeros((0, 8), dtype=bool), [], 8, 2, channel=SYM)

    def test_symmetric_p12(self):
        hits = 0
        for i in range(200):
            s, pools, y = draw(i, 12, CardinalitySpec.exact(2), SYM, 150, LN2 / 2)
            try:
                hits += threshold_decode(pools, y, 12, 2, channel=SYM) == s
            except (NoValidSet, Ambiguous):
                pass
        assert hits / 200 >= 0.9

    def test_too_large(self):
        with pytest.raises(TooLarge):
            threshold_decode(np.zeros((1, 200), dtype=bool), [0], 200, 6, channel=SYM)

    def test_requires_channel(self):
        with pytest.raises(ValueError):
            threshold_decode(np.zeros((1, 4), dtype=bool), [0], 4, 1)


def tie_instance():
    """Item 1 only ever appears next to defective item 0, so {0} and {0, 1} both explain y."""
    pools = np.array([[1, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=bool)
    y = np.array([True, False, True])
    permissive = ThresholdTable({(m, ell): -1e9 for m in (1, 2) for ell in range(1, m + 1)}, 0.05)
    return pools, y, permissive


class TestUnknownK:
    def test_reduces_to_known_k(self):
        for i in range(50):
            s, pools, y = draw(i, 12, CardinalitySpec.exact(2), SYM, 120, LN2 / 2)
            outs = []
            for fn in (lambda: threshold_decode(pools, y, 12, 2, channel=SYM),
                       lambda: threshold_decode_unknown_k(pools, y, 12, [2], channel=SYM)):
                try:
                    outs.append(fn())
                except NoValidSet:
                    outs.append("none")
                except Ambiguous as exc:
                    outs.append(("ambiguous", len(exc.info["candidates"])))
            assert outs[0] == outs[1]

    def test_smallest_cardinality_wins(self):
        pools, y, table = tie_instance()
        ch = Channel.noiseless()
        assert threshold_decode_unknown_k(pools, y, 3, [1, 2], table=table, channel=ch) == (0,)
        assert threshold_decode(pools, y, 3, 2, table=table, channel=ch) == (0, 1)

    def test_noiseless_smaller_set_not_superset(self):
        p, k = 12, 3
        for i in range(20):
            s, pools, y = draw(i, p, CardinalitySpec.exact(k - 1), Channel.noiseless(), 80, LN2 / k)
            est = threshold_decode_unknown_k(pools, y, p, [k - 1, k], channel=Channel.noiseless(),
                                             on_multiple="first")
            assert est == s

    def test_range_prior_p12(self):
        hits = 0
        ks = [1, 2]
        table = unknown_k_thresholds(12, ks, 0, 0.05, n=200, channel=SYM)
        for i in range(200):
            s, pools, y = draw(i, 12, CardinalitySpec.range(1, 2), SYM, 200, LN2 / 2)
            try:
                hits += threshold_decode_unknown_k(pools, y, 12, ks, table=table, channel=SYM) == s
            except (NoValidSet, Ambiguous):
                pass
        assert hits / 200 >= 0.85

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            threshold_decode_unknown_k(np.zeros((1, 4), dtype=bool), [0], 4, [0, 1], channel=SYM)


class TestNcomp:
    def test_always_positive_item(self):
        ch = Channel.symmetric(1e-12)
        pools = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 0]], dtype=bool)
        y = np.array([True, True, False])
        assert 0 in ncomp_decode(pools, y, range(3), 2, 0.5, ch)

    def test_empty_outcomes(self):
        assert ncomp_decode(np.zeros((0, 5), dtype=bool), [], range(5), 2, LN2, SYM) == ()

    def test_gap_formula(self):
        assert ncomp_gap(SYM, LN2, 20) == pytest.approx(0.78 * (1 - LN2 / 20) ** 20, abs=1e-15)

    def test_delta_must_be_feasible(self):
        pools = np.ones((2, 4), dtype=bool)
        gap = ncomp_gap(SYM, LN2, 2)
        with pytest.raises(ValueError):
            ncomp_decode(pools, [1, 1], range(4), 2, LN2, SYM, delta=gap / 2)
        with pytest.raises(ValueError):
            ncomp_decode(pools, [1, 1], range(4), 2, LN2, SYM, delta=0.0)

    def test_degenerate_z(self):
        with pytest.raises(ValueError):
            ncomp_decode_zchannel(np.ones((2, 4), dtype=bool), [1, 1], range(4), 2, LN2, 1 - 1e-12)

    def test_z_defective_positive_rate(self):
        rng = make_rng(0, 0, "z")
        pools = np.zeros((50_000, 2), dtype=bool)
        pools[:, 0] = True
        rate = run_tests(pools, (0,), Channel.z(0.3), rng).mean()
        assert abs(rate - 0.7) <= 3 * math.sqrt(0.21 / 50_000)

    def test_symmetric_recovery(self):
        c = fixtures()["ncomp"]["symmetric"]["c"]
        p, k, kmax = 1000, 10, 20
        n = math.ceil(c * k * math.log(p))
        hits = sum(ncomp_decode(pools, y, range(p), kmax, LN2, SYM) == s
                   for s, pools, y in (draw(i, p, CardinalitySpec.exact(k), SYM, n, LN2 / kmax) for i in range(100)))
        assert hits >= 90

    def test_z_recovery(self):
        fx = fixtures()["ncomp"]["z"]
        p, k, kmax, rho = 500, 8, 16, 0.3
        n = math.ceil(fx["c"] * k * math.log(p))
        delta = fx["delta_frac"] * ncomp_gap(Channel.z(rho), LN2, kmax)
        hits = sum(ncomp_decode_zchannel(pools, y, range(p), kmax, LN2, rho, delta) == s
                   for s, pools, y in (draw(i, p, CardinalitySpec.exact(k), Channel.z(rho), n, LN2 / kmax)
                                       for i in range(100)))
        assert hits >= 90


class TestSeparateDecode:
    def test_no_tests(self):
        assert separate_decode(np.zeros((0, 10), dtype=bool), [], 10, 2, LN2, SYM) == ()

    def test_noiseless_excluded_from_positives(self):
        pools = np.array([[1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=bool)
        y = np.array([True, False, True, False])
        scores = separate_scores(pools, y, 1, 0.5, Channel.noiseless())
        assert scores[1] == -math.inf
        assert 1 not in separate_decode(pools, y, 3, 1, 0.5, Channel.noiseless(), threshold_nats=-100.0)

    def test_scores_finite_when_no_impossible_evidence(self):
        pools = np.array([[1, 0], [0, 1]], dtype=bool)
        scores = separate_scores(pools, [True, False], 1, 0.5, Channel.noiseless())
        assert np.isfinite(scores[0])

    def test_partial_recovery(self):
        p, k = 500, 5
        n = math.ceil(3 * k * math.log(p / k) / LN2)
        good = 0
        for i in range(100):
            s, pools, y = draw(i, p, CardinalitySpec.exact(k), SYM, n, LN2 / k)
            est = separate_decode(pools, y, p, k, LN2, SYM, threshold_nats=math.log(p / k))
            good += len(set(s) ^ set(est)) <= math.ceil(k / 2)
        assert good / 100 >= 0.9


class TestStageDecoders:
    def test_majority_tie_included(self):
        assert majority_vote(ItemScoreBoard.from_counts({3: 1}, reps=2), 2) == (3,)
        assert majority_vote(ItemScoreBoard.from_counts({3: 0}, reps=2), 2) == ()

    def test_majority_needs_equal_reps(self):
        board = ItemScoreBoard(np.array([0, 1]), np.array([3, 2]), np.array([1, 1]))
        with pytest.raises(ValueError):
            majority_vote(board, 3)

    def test_majority_vs_chernoff(self):
        rng = make_rng(0, 0, "mv")
        items, reps, rho = 100_000, 15, 0.11
        pos = rng.binomial(reps, 1 - rho, size=items)
        board = ItemScoreBoard(np.arange(items), np.full(items, reps), pos)
        frac = len(majority_vote(board, reps)) / items
        assert frac >= 1 - math.exp(-reps * binary_kl(0.5, rho))

    def test_top_m(self):
        board = ItemScoreBoard.from_counts({0: 5, 1: 5, 2: 1}, reps=6)
        assert top_m_by_positives(board, 0) == ()
        assert top_m_by_positives(board, 3) == (0, 1, 2)
        assert top_m_by_positives(board, 1) == (0,)
        with pytest.raises(ValueError):
            top_m_by_positives(board, 4)

    def test_any_positive(self):
        assert any_positive(ItemScoreBoard.from_counts({0: 0, 1: 0}, reps=4)) == ()
        assert any_positive(ItemScoreBoard.from_counts({0: 1, 1: 0}, reps=10)) == (0,)

    def test_any_positive_z_never_admits_nondefective(self):
        rng = make_rng(0, 0, "z")
        p, reps = 50, 5
        pools = np.repeat(np.eye(p, dtype=bool), reps, axis=0)
        s = (3, 17, 40)
        y = run_tests(pools, s, Channel.z(0.4), rng)
        est = any_positive(ItemScoreBoard.from_tests(pools, y, range(p)))
        assert set(est) <= set(s)

    def test_board_invariant(self):
        with pytest.raises(ValueError):
            ItemScoreBoard(np.array([0]), np.array([1]), np.array([2]))

    def test_board_from_tests(self):
        pools = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
        b = ItemScoreBoard.from_tests(pools, [True, False], [0, 1, 2])
        assert b.tests_included.tolist() == [2, 1, 0] and b.positives.tolist() == [1, 1, 0]
        assert distance(any_positive(b), (0, 1)) == 0
