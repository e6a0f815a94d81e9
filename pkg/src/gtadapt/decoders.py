"""Decoding rules for pooled tests.

The threshold decoder enumerates candidate sets exhaustively and is meant
for small instances only.  NCOMP, separate decoding and the per-item stage
decoders are linear in the size of the test matrix.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import BinaryChannelLaw, CardinalitySpec, Channel
from .infotheory import DensityContext, LN2, exact_conditional_mi

ENUMERATION_LIMIT = 10**7
_CHUNK = 1 << 15


class DecodeFailed(Exception):
    """A decoder declared an error instead of returning an estimate."""

    reason = "decode_failed"

    def __init__(self, msg: str = "", info: dict | None = None):
        super().__init__(msg)
        self.info = info or {}


class NoValidSet(DecodeFailed):
    reason = "no_valid_set"


class Ambiguous(DecodeFailed):
    reason = "ambiguous"

    def __init__(self, msg: str, candidates: list | None = None):
        super().__init__(msg, {"candidates": candidates or []})
        self.candidates = candidates or []


class TooLarge(DecodeFailed):
    reason = "too_large"


def _log_comb(n: int, r: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


# -- threshold tables -------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdTable:
    """Thresholds keyed by (k', ell): hypothesised cardinality and |S_dif|."""

    gamma: dict
    delta1: float
    dmax: int = 0

    def __post_init__(self):
        if not 0.0 < self.delta1 <= 1.0:
            raise ValueError("delta1 must lie in (0, 1]")
        for key, g in self.gamma.items():
            if not math.isfinite(g):
                raise ValueError(f"threshold for {key} is not finite")

    def __getitem__(self, key) -> float:
        return self.gamma[key]

    def for_ell(self, k: int, ell: int) -> float:
        return self.gamma[(k, ell)]


def log_count_threshold(p: int, k: int, ell: int, delta1: float) -> float:
    """log C(p-k, ell) + log((k / delta1) C(k, ell)), via log-gamma."""
    return _log_comb(p - k, ell) + math.log(k / delta1) + _log_comb(k, ell)


def default_thresholds(p: int, k: int, dmax: int = 0, delta1: float = 0.05) -> ThresholdTable:
    if not 0 <= dmax < k <= p:
        raise ValueError(f"need 0 <= dmax < k <= p, got dmax={dmax}, k={k}, p={p}")
    gamma = {(k, ell): log_count_threshold(p, k, ell, delta1) for ell in range(dmax + 1, k + 1)}
    return ThresholdTable(gamma, delta1, dmax)


def unknown_k_thresholds(p: int, ks: Iterable[int], dmax: int = 0, delta1: float = 0.05,
                         n: int = 0, channel: Channel | None = None, nu: float = LN2,
                         delta2: float = 0.45) -> ThresholdTable:
    """Thresholds for every (k', ell) with k' in ``ks`` and 1 <= ell <= k'.

    Each entry is the log-count threshold for (k', ell).  When ``n`` and
    ``channel`` are given it is raised to (1 - delta2) * n * I_{k', ell}: a
    subset of the true set then carries visibly less information than a
    full-size hypothesis predicts, which keeps proper subsets from passing.
    """
    ks = sorted(set(ks))
    kmax = ks[-1]
    gamma = {}
    for kp in ks:
        for ell in range(1, kp + 1):
            g = log_count_threshold(p, kp, ell, delta1)
            if n > 0 and channel is not None:
                ctx = DensityContext(kp, ell, nu, channel.law, nu / kmax)
                g = max(g, (1.0 - delta2) * n * exact_conditional_mi(ctx))
            gamma[(kp, ell)] = g
    return ThresholdTable(gamma, delta1, dmax)


# -- information-density scoring ----------------------------------------------------


def _density_table(law: BinaryChannelLaw, q_dif: float) -> np.ndarray:
    """log P(y | u_dif) / P(y) as a [u_dif, y] table, -inf where P(y | u_dif) = 0."""
    py1 = law.p_y1(q_dif)
    out = np.empty((2, 2))
    for u in (0, 1):
        for y in (0, 1):
            num = float(law.prob(y, u))
            den = py1 if y else 1.0 - py1
            out[u, y] = -math.inf if num == 0.0 else math.log(num / den)
    return out


def _partition_scores(cols: np.ndarray, y: np.ndarray, dif_pos, eq_pos, table: np.ndarray) -> np.ndarray:
    """Density sums for a batch of candidates.

    ``cols`` is (n, M, m): the pool bits of each candidate's m items.
    """
    n = cols.shape[0]
    if n == 0:
        return np.zeros(cols.shape[1])
    u_dif = cols[:, :, list(dif_pos)].any(axis=2)
    if eq_pos:
        eq_empty = ~cols[:, :, list(eq_pos)].any(axis=2)
    else:
        eq_empty = np.ones_like(u_dif)
    terms = table[u_dif.astype(np.intp), y[:, None].astype(np.intp)]
    # masked tests contribute exactly 0 even when the table entry is -inf
    return np.where(eq_empty, terms, 0.0).sum(axis=0)


def _candidate_chunks(p: int, m: int):
    it = itertools.combinations(range(p), m)
    while True:
        block = list(itertools.islice(it, _CHUNK))
        if not block:
            return
        yield np.array(block, dtype=np.intp).reshape(len(block), m)


def _checks_known(k: int, dmax: int):
    for ell in range(dmax + 1, k + 1):
        for dif in itertools.combinations(range(k), ell):
            eq = tuple(i for i in range(k) if i not in dif)
            yield k, ell, dif, eq


def _checks_unknown(m: int, ks: Sequence[int], dmax: int, include_mismatched: bool):
    for kp in ks:
        if kp > m or (kp != m and not include_mismatched):
            continue
        for sub in itertools.combinations(range(m), kp):
            for ell in range(1, kp + 1):
                if ell + m - kp <= dmax:
                    continue
                for dif in itertools.combinations(sub, ell):
                    eq = tuple(i for i in sub if i not in dif)
                    yield kp, ell, dif, eq


def _passing(pools, y, m, checks, table: ThresholdTable, law, nu, kdesign):
    """All size-m candidates passing every check, in lexicographic order."""
    checks = list(checks)
    tables = {}
    for kp, ell, _, _ in checks:
        if (kp, ell) not in tables:
            ctx = DensityContext(kp, ell, nu, law, nu / kdesign)
            tables[(kp, ell)] = _density_table(law, ctx.q_dif)
    p = pools.shape[1]
    found = []
    for cands in _candidate_chunks(p, m):
        cols = pools[:, cands]
        ok = np.ones(cands.shape[0], dtype=bool)
        for kp, ell, dif, eq in checks:
            idx = np.flatnonzero(ok)
            if idx.size == 0:
                break
            scores = _partition_scores(cols[:, idx], y, dif, eq, tables[(kp, ell)])
            ok[idx] = scores >= table[(kp, ell)]
        found.extend(tuple(int(v) for v in row) for row in cands[ok])
    return found


def _prepare(pools, outcomes, p):
    pools = np.asarray(pools, dtype=bool).reshape(-1, p)
    y = np.asarray(outcomes, dtype=bool).reshape(-1)
    if pools.shape[0] != y.shape[0]:
        raise ValueError("pools and outcomes disagree in length")
    return pools, y


def _resolve(found, on_multiple: str):
    if len(found) == 1:
        return found[0]
    if on_multiple == "first":
        return found[0]
    raise Ambiguous(f"{len(found)} candidate sets pass every check", found)


def threshold_decode(pools, outcomes, p: int, k: int, dmax: int = 0,
                     table: ThresholdTable | None = None, nu: float = LN2,
                     channel: Channel | None = None, on_multiple: str = "error") -> tuple[int, ...]:
    """Exhaustive information-density threshold decoder with known k.

    A size-k candidate is accepted when every split into (S_dif, S_eq) with
    |S_dif| > dmax has density at least gamma.  ``on_multiple`` is "error"
    (raise Ambiguous) or "first" (lexicographically first survivor).
    """
    if channel is None:
        raise ValueError("a channel is required")
    if on_multiple not in ("error", "first"):
        raise ValueError(f"unknown on_multiple mode {on_multiple!r}")
    if math.comb(p, k) > ENUMERATION_LIMIT:
        raise TooLarge(f"C({p}, {k}) candidates exceed the enumeration limit")
    pools, y = _prepare(pools, outcomes, p)
    if k == 0:
        return ()
    if table is None:
        table = default_thresholds(p, k, dmax)
    found = _passing(pools, y, k, _checks_known(k, dmax), table, channel.law, nu, k)
    if not found:
        raise NoValidSet("no candidate set passes every check")
    return _resolve(found, on_multiple)


def threshold_decode_unknown_k(pools, outcomes, p: int, krange: CardinalitySpec | Sequence[int],
                               dmax: int = 0, table: ThresholdTable | None = None,
                               nu: float = LN2, channel: Channel | None = None,
                               on_multiple: str = "error",
                               include_mismatched: bool = False) -> tuple[int, ...]:
    """Threshold decoder searching over every cardinality in ``krange``.

    Densities for a hypothesised cardinality k' use the design intensity
    nu / max(krange).  The smallest cardinality with a surviving candidate
    wins.  By default only splits of the candidate itself are checked
    (k' = |s|); ``include_mismatched`` adds sub-hypotheses with k' < |s|,
    whose checks coincide with those of smaller candidates.
    """
    if channel is None:
        raise ValueError("a channel is required")
    if on_multiple not in ("error", "first"):
        raise ValueError(f"unknown on_multiple mode {on_multiple!r}")
    ks = sorted(krange.cardinalities() if isinstance(krange, CardinalitySpec) else set(krange))
    if not ks or ks[0] < 1:
        raise ValueError("cardinalities must be positive")
    if sum(math.comb(p, m) for m in ks) > ENUMERATION_LIMIT:
        raise TooLarge("candidate count exceeds the enumeration limit")
    pools, y = _prepare(pools, outcomes, p)
    if table is None:
        table = unknown_k_thresholds(p, ks, dmax)
    for m in ks:
        checks = _checks_unknown(m, ks, dmax, include_mismatched)
        found = _passing(pools, y, m, checks, table, channel.law, nu, ks[-1])
        if found:
            return _resolve(found, on_multiple)
    raise NoValidSet("no candidate set passes every check")


# -- NCOMP ---------------------------------------------------------------------


def ncomp_gap(channel: Channel, nu: float, kmax: int) -> float:
    """Worst-case gap between defective and non-defective positive rates.

    A defective item's tests are positive with rate P(Y=1 | U=1).  A
    non-defective one sees rate P(Y=1) with up to kmax defectives present,
    which is largest at kmax; the gap there is
    (P(Y=1|U=1) - P(Y=1|U=0)) (1 - nu/kmax)^kmax.
    """
    law = channel.law
    q = nu / kmax
    if not 0.0 < q < 1.0:
        raise ValueError(f"nu/kmax must lie in (0, 1), got {q}")
    return (law.p_y1_given_u1 - law.p_y1_given_u0) * (1.0 - q) ** kmax


def ncomp_decode(pools, outcomes, population: Sequence[int], kmax: int, nu: float,
                 channel: Channel, delta: float | None = None) -> tuple[int, ...]:
    """Declare j defective iff N'_{j,1} >= (P(Y=1|U=1) - delta) N'_j.

    ``delta`` defaults to a third of :func:`ncomp_gap`; it must lie in
    (0, gap/2).  Items that appear in no test are declared non-defective.
    """
    gap = ncomp_gap(channel, nu, kmax)
    if gap <= 1e-9:
        raise ValueError(f"channel leaves no usable gap (gap={gap:.3g})")
    if delta is None:
        delta = gap / 3.0
    if not 0.0 < delta < gap / 2.0:
        raise ValueError(f"delta={delta} outside the feasible interval (0, {gap / 2.0:.6g})")
    population = np.asarray(list(population), dtype=np.intp)
    if population.size == 0:
        return ()
    y = np.asarray(outcomes, dtype=bool).reshape(-1)
    if y.size == 0:
        return ()
    pools = np.atleast_2d(np.asarray(pools, dtype=bool))
    board = ItemScoreBoard.from_tests(pools, y, population)
    level = channel.law.p_y1_given_u1 - delta
    keep = (board.tests_included > 0) & (board.positives >= level * board.tests_included)
    return tuple(int(j) for j in board.items[keep])


def ncomp_decode_zchannel(pools, outcomes, population, kmax: int, nu: float, rho: float,
                          delta: float | None = None) -> tuple[int, ...]:
    return ncomp_decode(pools, outcomes, population, kmax, nu, Channel.z(rho), delta)


# -- separate decoding -------------------------------------------------------------


def separate_scores(pools, outcomes, k: int, nu: float, channel: Channel) -> np.ndarray:
    """Per-item sums of log P(y | x_j) / P(y) under single-item marginals.

    With k defectives each in a test independently with probability nu/k,
    P(U=1 | x_j=1) = 1, P(U=1 | x_j=0) = 1 - (1-q)^(k-1) and
    P(U=1) = 1 - (1-q)^k.
    """
    pools = np.asarray(pools, dtype=bool)
    y = np.asarray(outcomes, dtype=bool).reshape(-1)
    q = nu / k
    law = channel.law
    pu_given0 = 1.0 - (1.0 - q) ** (k - 1)
    pu = 1.0 - (1.0 - q) ** k
    py1 = law.p_y1(pu)
    py1_x1 = law.p_y1_given_u1
    py1_x0 = law.p_y1(pu_given0)

    def lr(a, b):
        return -math.inf if a == 0.0 else math.log(a / b)

    w11, w10 = lr(py1_x1, py1), lr(1.0 - py1_x1, 1.0 - py1)
    w01, w00 = lr(py1_x0, py1), lr(1.0 - py1_x0, 1.0 - py1)

    yf = y.astype(np.float64)
    x = pools.astype(np.float64)
    n11 = yf @ x
    n1 = x.sum(axis=0)
    n10 = n1 - n11
    npos = yf.sum()
    n01 = npos - n11
    n00 = y.size - npos - n10

    def term(count, w):
        # 0 * (-inf) must read as 0
        return np.where(count > 0, count * w, 0.0) if math.isinf(w) else count * w

    with np.errstate(invalid="ignore"):
        return term(n11, w11) + term(n10, w10) + term(n01, w01) + term(n00, w00)


def separate_decode(pools, outcomes, p: int, k: int, nu: float, channel: Channel,
                    threshold_nats: float | None = None) -> tuple[int, ...]:
    """Items whose separate log-likelihood score reaches the threshold (default ln(p/k))."""
    if threshold_nats is None:
        threshold_nats = math.log(p / k)
    if not math.isfinite(threshold_nats):
        raise ValueError("threshold must be finite")
    pools = np.asarray(pools, dtype=bool).reshape(-1, p)
    if pools.shape[0] == 0 or k == 0:
        return () if threshold_nats > 0 or k == 0 else tuple(range(p))
    scores = separate_scores(pools, outcomes, k, nu, channel)
    return tuple(int(j) for j in np.flatnonzero(scores >= threshold_nats))


# -- per-item stage decoders ----------------------------------------------------------


@dataclass(frozen=True)
class ItemScoreBoard:
    items: np.ndarray
    tests_included: np.ndarray
    positives: np.ndarray

    def __post_init__(self):
        if np.any(self.positives > self.tests_included):
            raise ValueError("positives cannot exceed tests_included")

    @classmethod
    def from_tests(cls, pools, outcomes, items: Sequence[int]) -> "ItemScoreBoard":
        items = np.asarray(list(items), dtype=np.intp)
        pools = np.asarray(pools, dtype=bool)
        y = np.asarray(outcomes, dtype=bool).reshape(-1)
        if pools.shape[0] == 0 or items.size == 0:
            zeros = np.zeros(items.size, dtype=np.int64)
            return cls(items, zeros, zeros.copy())
        sub = pools[:, items]
        return cls(items, sub.sum(axis=0).astype(np.int64), sub[y].sum(axis=0).astype(np.int64))

    @classmethod
    def from_counts(cls, counts: dict, reps: int | None = None) -> "ItemScoreBoard":
        items = np.array(sorted(counts), dtype=np.intp)
        pos = np.array([counts[i] for i in sorted(counts)], dtype=np.int64)
        inc = np.full(items.size, reps if reps is not None else 0, dtype=np.int64)
        if reps is None:
            inc = pos.copy()
        return cls(items, inc, pos)

    def __len__(self) -> int:
        return int(self.items.size)


def majority_vote(board: ItemScoreBoard, reps: int) -> tuple[int, ...]:
    """Items positive in at least half of their ``reps`` tests."""
    if np.any(board.tests_included != reps):
        raise ValueError("every scored item must have been tested exactly reps times")
    return tuple(int(j) for j in board.items[2 * board.positives >= reps])


def top_m_by_positives(board: ItemScoreBoard, m: int) -> tuple[int, ...]:
    """The m items with most positives; ties go to the smaller index."""
    if not 0 <= m <= len(board):
        raise ValueError(f"m={m} outside [0, {len(board)}]")
    order = np.lexsort((board.items, -board.positives))
    return tuple(sorted(int(j) for j in board.items[order[:m]]))


def any_positive(board: ItemScoreBoard) -> tuple[int, ...]:
    return tuple(int(j) for j in board.items[board.positives >= 1])
