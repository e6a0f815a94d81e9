"""Asymptotic rate formulas, rate curves and a change-of-measure checker.

Rates are multiples of k log2(p/k).  With k = p^theta and
t = theta / (1 - theta), k ln k = t * k ln(p/k) and k ln p = k ln(p/k) / (1 - theta).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .core import Channel
from .infotheory import LN2, binary_entropy, binary_kl, channel_capacity

SOURCES = (
    "converse_sym",
    "ach_simple",
    "ach_practical",
    "ach_refined",
    "capacity_converse",
    "z_ach",
    "reverse_z_converse",
    "noiseless",
)
CONVERSE_SOURCES = ("converse_sym", "capacity_converse", "reverse_z_converse", "noiseless")


@dataclass(frozen=True)
class RatePoint:
    theta: float
    rho: float
    source: str
    rate: float


def _check(theta: float, rho: float | None = None, symmetric: bool = True) -> float:
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if rho is not None:
        hi = 0.5 if symmetric else 1.0
        if not 0.0 < rho < hi:
            raise ValueError(f"rho must lie in (0, {hi}), got {rho}")
    return theta / (1.0 - theta)


def _mi_term(rho: float) -> float:
    return LN2 / (LN2 - binary_entropy(rho))


def converse_rate_symmetric(theta: float, rho: float) -> RatePoint:
    t = _check(theta, rho)
    rate = max(_mi_term(rho), t * LN2 / math.log((1 - rho) / rho))
    return RatePoint(theta, rho, "converse_sym", rate)


def ach_rate_simple(theta: float, rho: float) -> RatePoint:
    t = _check(theta, rho)
    rate = _mi_term(rho) + t * LN2 / binary_kl(0.5, rho)
    return RatePoint(theta, rho, "ach_simple", rate)


def ach_rate_practical(theta: float, rho: float) -> RatePoint:
    t = _check(theta, rho)
    rate = _mi_term(rho) / LN2 + t * LN2 / binary_kl(0.5, rho)
    return RatePoint(theta, rho, "ach_practical", rate)


# -- refined (three-stage) rate ------------------------------------------------------


@dataclass(frozen=True)
class RefinedTerms:
    """Normalised stage-one and individual-testing terms of the three-stage bound."""

    rho: float
    t: float

    @property
    def mi1(self) -> float:
        return _mi_term(self.rho)

    @property
    def _llr(self) -> float:
        return math.log((1 - self.rho) / self.rho)

    def mi2(self, gamma, delta2):
        e = 1 - 2 * self.rho
        return 2.0 / (e * self._llr * (1 - delta2)) * (1 + 2 * (1 - gamma) * self.t)

    def conc(self, gamma, delta2):
        e = 1 - 2 * self.rho
        return 4 * (1 + delta2 * e / 3) / (delta2**2 * e**2) * (1 - gamma) * self.t

    def indiv(self, gamma):
        return gamma * self.t * LN2 / binary_kl(self.rho, 1 - self.rho)

    def objective(self, gamma, delta2):
        return np.maximum(np.maximum(self.mi1, self.mi2(gamma, delta2)), self.conc(gamma, delta2)) + self.indiv(gamma)

    def best_delta2(self, gamma: float) -> float:
        """delta2 where the increasing MI2 term meets the decreasing Conc term.

        Setting A / (1 - d) = B (1 + c d) / d^2 gives the quadratic
        (A + B c) d^2 + B (1 - c) d - B = 0.
        """
        e = 1 - 2 * self.rho
        a = 2.0 * (1 + 2 * (1 - gamma) * self.t) / (e * self._llr)
        b = 4.0 * (1 - gamma) * self.t / e**2
        c = e / 3.0
        if b <= 0.0:
            return 0.0
        qa, qb, qc = a + b * c, b * (1 - c), -b
        return (-qb + math.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)

    def profile(self, gamma: float) -> float:
        """inf over delta2 of the objective at fixed gamma."""
        d = self.best_delta2(gamma)
        inner = self.mi2(gamma, d) if d > 0 else self.mi2(gamma, 0.0)
        return max(self.mi1, inner) + self.indiv(gamma)


def refined_search(theta: float, rho: float, grid: int = 400) -> tuple[float, float, float]:
    """(rate, gamma, delta2) minimising the three-stage bound.

    A grid over gamma in [0, 1] and delta2 in (0, 1) locates the basin; the
    exact inner minimum over delta2 is then refined along gamma.
    """
    t = _check(theta, rho)
    terms = RefinedTerms(rho, t)
    gammas = np.linspace(0.0, 1.0, grid)
    deltas = np.linspace(0.0, 1.0, grid + 2)[1:-1]
    with np.errstate(over="ignore"):
        vals = terms.objective(gammas[:, None], deltas[None, :])
    i, j = np.unravel_index(int(np.argmin(vals)), vals.shape)
    best = (float(vals[i, j]), float(gammas[i]), float(deltas[j]))
    lo = gammas[max(i - 1, 0)]
    hi = gammas[min(i + 1, grid - 1)]
    res = minimize_scalar(terms.profile, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    cands = [(terms.profile(g), g) for g in (float(res.x), lo, hi, float(gammas[i]))]
    r, g = min(cands)
    if r < best[0]:
        best = (r, g, terms.best_delta2(g))
    return best


def ach_rate_refined(theta: float, rho: float) -> RatePoint:
    rate, _, _ = refined_search(theta, rho)
    return RatePoint(theta, rho, "ach_refined", rate)


def nonadaptive_exact_rate(theta: float, rho: float) -> float:
    """The gamma -> 0 end of the three-stage bound (exact recovery in one stage)."""
    t = _check(theta, rho)
    return RefinedTerms(rho, t).profile(0.0)


# -- other channels -------------------------------------------------------------------


def capacity_converse_rate(theta: float, channel: Channel) -> RatePoint:
    _check(theta)
    cap, _ = channel_capacity(channel)
    return RatePoint(theta, channel.rho, "capacity_converse", LN2 / cap)


def z_achievability_rate(theta: float, rho: float) -> RatePoint:
    _check(theta, rho, symmetric=False)
    cap, _ = channel_capacity(Channel.z(rho))
    return RatePoint(theta, rho, "z_ach", LN2 / cap)


def reverse_z_converse_rate(theta: float, rho: float) -> RatePoint:
    t = _check(theta, rho, symmetric=False)
    cap, _ = channel_capacity(Channel.reverse_z(rho))
    return RatePoint(theta, rho, "reverse_z_converse", max(LN2 / cap, t * LN2 / math.log(1 / rho)))


def noiseless_rate(theta: float) -> RatePoint:
    _check(theta)
    return RatePoint(theta, 0.0, "noiseless", 1.0)


def rate_for(source: str, theta: float, rho: float) -> RatePoint:
    if source == "converse_sym":
        return converse_rate_symmetric(theta, rho)
    if source == "ach_simple":
        return ach_rate_simple(theta, rho)
    if source == "ach_practical":
        return ach_rate_practical(theta, rho)
    if source == "ach_refined":
        return ach_rate_refined(theta, rho)
    if source == "capacity_converse":
        return capacity_converse_rate(theta, Channel.symmetric(rho))
    if source == "z_ach":
        return z_achievability_rate(theta, rho)
    if source == "reverse_z_converse":
        return reverse_z_converse_rate(theta, rho)
    if source == "noiseless":
        p = noiseless_rate(theta)
        return RatePoint(theta, rho, p.source, p.rate)
    raise ValueError(f"unknown source {source!r}")


def parse_sources(spec: str | Sequence[str]) -> list[str]:
    items = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    items = [s for s in items if s]
    if items == ["all"]:
        return list(SOURCES)
    for s in items:
        if s not in SOURCES:
            raise ValueError(f"unknown source {s!r}; choose from {', '.join(SOURCES)} or 'all'")
    return items


def emit_curves(rho: float, theta_grid: Iterable[float], sources: Sequence[str]) -> list[RatePoint]:
    """One row per (theta, source), theta-major in grid order."""
    grid = list(theta_grid)
    for th in grid:
        _check(th)
    return [rate_for(s, th, rho) for th in grid for s in sources]


def theta_grid(points: int) -> list[float]:
    """Uniform interior grid i / (points + 1), i = 1..points."""
    return [i / (points + 1) for i in range(1, points + 1)]


def curves_csv(rows: Sequence[RatePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theta", "rho", "source", "rate"])
    for r in rows:
        w.writerow([f"{r.theta:.12g}", f"{r.rho:.12g}", r.source, f"{r.rate:.12g}"])
    return buf.getvalue()


def write_curves_csv(rows: Sequence[RatePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(curves_csv(rows))


# -- change-of-measure verification --------------------------------------------------


Strategy = Callable[[Sequence[tuple[np.ndarray, bool]]], np.ndarray]


@dataclass
class ChangeOfMeasureReport:
    sequences: int
    checks: int
    violations: int
    worst_margin: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _law_for(kind: str, rho: float):
    if kind == "symmetric":
        return Channel.symmetric(rho).law, rho / (1 - rho)
    if kind == "reverse_z":
        return Channel.reverse_z(rho).law, rho
    raise ValueError(f"unsupported channel kind {kind!r}")


def verify_change_of_measure(p: int, k: int, rho: float, strategy: Strategy, epsilon: float,
                             n: int, channel: str = "symmetric", inject_fault: bool = False,
                             tol: float = 1e-9) -> ChangeOfMeasureReport:
    """Check P_{S\\j}[y] >= P_S[y] r^{(1+2 eps) n / k} by enumerating every outcome sequence.

    ``strategy(history)`` returns the next pool from the (pool, outcome)
    pairs seen so far and must be deterministic.  n_j(y) counts the tests
    containing j and no other member of S; only pairs with
    n_j(y) <= (1 + 2 eps) n / k are checked.  ``r`` is rho/(1-rho) for the
    symmetric channel and rho for the reverse Z-channel.  ``inject_fault``
    negates the inequality, as a self-test of the checker.
    """
    if n > 20:
        raise ValueError("enumeration is limited to n <= 20")
    if not 0 < k <= p:
        raise ValueError("need 0 < k <= p")
    law, ratio = _law_for(channel, rho)
    sets = list(itertools.combinations(range(p), k))
    subs = sorted({tuple(x for x in s if x != j) for s in sets for j in s})
    sub_index = {s: i for i, s in enumerate(subs)}
    all_sets = sets + subs
    masks = np.zeros((len(all_sets), p), dtype=bool)
    for i, s in enumerate(all_sets):
        masks[i, list(s)] = True
    nk = len(sets)
    bound = (1 + 2 * epsilon) * n / k
    log_factor = bound * math.log(ratio)
    logp_y = {
        (u, y): (math.log(float(law.prob(y, u))) if float(law.prob(y, u)) > 0 else -math.inf)
        for u in (False, True) for y in (False, True)
    }

    report = ChangeOfMeasureReport(0, 0, 0, math.inf)
    if n == 0:
        report.sequences = 1
        return report

    pair_sub = np.array([[nk + sub_index[tuple(x for x in st if x != j)] for j in st] for st in sets],
                        dtype=np.intp).reshape(nk, k)

    def leaf(logp: np.ndarray, nj: np.ndarray) -> None:
        report.sequences += 1
        active = nj <= bound + 1e-12
        lhs = logp[pair_sub]
        rhs = (logp[:nk] + log_factor)[:, None] + np.zeros((1, k))
        with np.errstate(invalid="ignore"):
            margin = np.where(rhs == -math.inf, math.inf, lhs - rhs)
        ok = margin >= -tol
        if inject_fault:
            ok = ~ok
        report.checks += int(active.sum())
        report.violations += int((active & ~ok).sum())
        if active.any():
            report.worst_margin = min(report.worst_margin, float(margin[active].min()))

    set_cols = np.array([list(s) for s in sets], dtype=np.intp).reshape(nk, k)

    def walk(history: list, logp: np.ndarray, nj: np.ndarray) -> None:
        if len(history) == n:
            leaf(logp, nj)
            return
        pool = _checked_pool(strategy, history, p)
        u = (masks & pool).any(axis=1)
        inset = pool[set_cols]
        solo = inset & (inset.sum(axis=1, keepdims=True) == 1)
        nj2 = nj + solo
        for y in (False, True):
            step = np.where(u, logp_y[(True, y)], logp_y[(False, y)])
            walk(history + [(pool, y)], logp + step, nj2)

    walk([], np.zeros(len(all_sets)), np.zeros((nk, k), dtype=np.int64))
    return report


def _checked_pool(strategy: Strategy, history: list, p: int) -> np.ndarray:
    a = np.asarray(strategy(list(history)), dtype=bool)
    b = np.asarray(strategy(list(history)), dtype=bool)
    if a.shape != (p,):
        raise ValueError(f"strategy returned a pool of shape {a.shape}, expected ({p},)")
    if not np.array_equal(a, b):
        raise ValueError("strategy is not deterministic given the history")
    return a


# -- strategy corpus ----------------------------------------------------------------


def individual_strategy(p: int) -> Strategy:
    """Cycle through the items one at a time, ignoring outcomes."""
    def strat(history):
        pool = np.zeros(p, dtype=bool)
        pool[len(history) % p] = True
        return pool
    return strat


def halving_strategy(p: int) -> Strategy:
    """Test the lower half of the items still consistent with a positive test.

    After a negative outcome the tested half is dropped; after a positive
    one the search narrows to it.  Restarts on the full set when a single
    item remains.
    """
    def strat(history):
        live = list(range(p))
        for pool, y in history:
            tested = [i for i in live if pool[i]]
            if len(live) <= 1:
                live = list(range(p))
                continue
            live = tested if y else [i for i in live if not pool[i]]
            if not live:
                live = list(range(p))
        if len(live) <= 1:
            live = list(range(p))
        pool = np.zeros(p, dtype=bool)
        pool[live[: max(1, len(live) // 2)]] = True
        return pool
    return strat


def retest_positive_strategy(p: int) -> Strategy:
    """Test items singly; repeat an item while it keeps testing positive (at most three times)."""
    def strat(history):
        item, streak = 0, 0
        for pool, y in history:
            cur = int(np.flatnonzero(pool)[0])
            if y and streak < 2:
                item, streak = cur, streak + 1
            else:
                item, streak = (cur + 1) % p, 0
        pool = np.zeros(p, dtype=bool)
        pool[item] = True
        return pool
    return strat


def pairs_strategy(p: int) -> Strategy:
    """Test pairs {i, i+1}; after a positive pair split it into singletons."""
    def strat(history):
        queue: list = []
        nxt = 0
        for pool, y in history:
            members = [int(i) for i in np.flatnonzero(pool)]
            if queue:
                queue.pop(0)
            if y and len(members) == 2:
                queue = [[members[0]], [members[1]]]
            if not queue:
                nxt = (members[-1] + 1) % p
        pool = np.zeros(p, dtype=bool)
        if queue:
            pool[queue[0]] = True
        else:
            pool[[nxt, (nxt + 1) % p]] = True
        return pool
    return strat


STRATEGIES = {
    "individual": individual_strategy,
    "halving": halving_strategy,
    "retest": retest_positive_strategy,
    "pairs": pairs_strategy,
}
