"""Multi-stage adaptive pipelines and their test budgets.

Every pipeline is a fixed sequence of rounds.  The pools of a round are
planned from the transcript of earlier rounds plus design streams keyed by
stage label, so re-planning from a truncated transcript reproduces them
exactly (see :meth:`Pipeline.replay_matches`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import Channel, ChannelKind, ProblemInstance, Streams, Transcript
from .decoders import (
    DecodeFailed, ItemScoreBoard, any_positive, default_thresholds, majority_vote,
    ncomp_decode, ncomp_gap, separate_decode, threshold_decode, top_m_by_positives,
)
from .design import DesignSpec, bernoulli_matrix, individual_plan
from .infotheory import LN2, binary_entropy, binary_kl, channel_capacity

STAGE1_DECODERS = ("threshold", "separate")


@dataclass(frozen=True)
class StageBudgets:
    n1: int
    n2a: int = 0
    ncheck: int = 0
    ntil: int = 1
    alpha1: float = 0.5
    alpha2: float = 0.5
    gamma: float = 0.5
    zeta: float = 0.9
    eta: float = 0.5
    delta3: float = 0.01
    nu: float = LN2
    sep_threshold: float | None = None
    ncomp_frac: float = 1.0 / 3.0

    def __post_init__(self):
        for name in ("n1", "n2a", "ncheck", "ntil"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("alpha1", "alpha2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0.0 < self.ncomp_frac < 0.5:
            raise ValueError("ncomp_frac must lie in (0, 1/2)")

    def with_(self, **kw) -> "StageBudgets":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def _individual_reps(k: int, rho: float, eta: float) -> int:
    # max(ln k, 1) keeps k = 1 (and 0) meaningful
    return math.ceil(max(math.log(k) if k > 0 else 0.0, 1.0) / binary_kl(0.5, rho) * (1 + eta))


def _check_rho(rho):
    if not 0.0 < rho < 0.5:
        raise ValueError(f"rho must lie in (0, 1/2), got {rho}")


def _check_positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


def cleanup_tests(p: int, kclean: float, c2a: float) -> int:
    """ceil(c2a * kclean * ln(p / kclean)); zero when nothing needs cleaning."""
    if kclean <= 0:
        return 0
    return math.ceil(c2a * kclean * math.log(max(p / kclean, math.e)))


def budgets_alg1(p: int, k: int, rho: float, eta: float = 0.5, c1: float = 1.5,
                 c2a: float = 8.0, alpha1: float = 0.5, **extra) -> StageBudgets:
    _check_rho(rho)
    _check_positive(eta=eta, c1=c1, c2a=c2a)
    if not 1 <= k < p:
        raise ValueError(f"need 1 <= k < p, got k={k}, p={p}")
    n1 = math.ceil(c1 * k * math.log(p / k) / (LN2 - binary_entropy(rho)))
    return StageBudgets(n1=n1, n2a=cleanup_tests(p, alpha1 * k, c2a), ntil=_individual_reps(k, rho, eta),
                        alpha1=alpha1, eta=eta, **extra)


@dataclass(frozen=True)
class Alg2Terms:
    mi1: float
    mi2: float
    conc: float
    indiv: float

    @property
    def stage1(self) -> float:
        return max(self.mi1, self.mi2, self.conc)


def alg2_terms(p: int, k: int, rho: float, gamma: float, delta2: float) -> Alg2Terms:
    """Stage-one test counts for the three-stage algorithm, in tests.

    At finite size (1 - theta) k ln p is taken to be k ln(p/k).
    """
    _check_rho(rho)
    klpk = k * math.log(p / k)
    klk = k * math.log(k)
    llr = math.log((1 - rho) / rho)
    mi1 = klpk / (LN2 - binary_entropy(rho))
    mi2 = 2.0 / (LN2 * (1 - 2 * rho) * llr) / (1 - delta2) * (klpk + 2 * (1 - gamma) * klk)
    conc = 4 * (1 + delta2 * (1 - 2 * rho) / 3) / (LN2 * delta2**2 * (1 - 2 * rho) ** 2) * (1 - gamma) * klk
    indiv = gamma * klk / binary_kl(rho, 1 - rho)
    return Alg2Terms(mi1, mi2, conc, indiv)


def default_zeta(rho: float) -> float:
    return rho + 0.9 * (1 - 2 * rho)


def budgets_alg2(p: int, k: int, rho: float, gamma: float = 0.5, delta2: float = 0.5,
                 alpha2: float = 0.3, zeta: float | None = None, eta: float = 0.5,
                 c1: float = 1.0, c2a: float = 8.0, cj: float = 1.0, delta3: float = 0.01,
                 **extra) -> StageBudgets:
    """Budgets for the three-stage algorithm.

    ``c1`` scales the stage-one count max(MI1, MI2, Conc), ``c2a`` the
    cleanup, and ``cj`` the per-item check count.
    """
    _check_rho(rho)
    if zeta is None:
        zeta = default_zeta(rho)
    for name, v in (("gamma", gamma), ("delta2", delta2), ("alpha2", alpha2), ("delta3", delta3)):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    if not rho < zeta < 1 - rho:
        raise ValueError(f"zeta={zeta} must lie strictly between rho and 1 - rho")
    if not 2 <= k < p:
        raise ValueError(f"need 2 <= k < p, got k={k}, p={p}")
    if not k**gamma < alpha2 * k:
        raise ValueError(f"k^gamma = {k**gamma:.3g} must be below alpha2 k = {alpha2 * k:.3g}")
    _check_positive(c1=c1, c2a=c2a, cj=cj, eta=eta)
    terms = alg2_terms(p, k, rho, gamma, delta2)
    ncheck = math.ceil(cj * math.log(k**gamma / delta3) / binary_kl(zeta, rho))
    return StageBudgets(n1=math.ceil(c1 * terms.stage1), n2a=cleanup_tests(p, k**gamma, c2a),
                        ncheck=max(ncheck, 1), ntil=_individual_reps(k, rho, eta),
                        alpha2=alpha2, gamma=gamma, zeta=zeta, eta=eta, delta3=delta3, **extra)


def budgets_noiseless(p: int, k: int, c1: float = 1.2, c2a: float = 4.0, alpha1: float = 0.05,
                      **extra) -> StageBudgets:
    """n1 = ceil(c1 k log2(p/k)); each stage-one survivor is tested once."""
    _check_positive(c1=c1, c2a=c2a)
    if not 0 <= k < p:
        raise ValueError(f"need 0 <= k < p, got k={k}, p={p}")
    n1 = math.ceil(c1 * k * math.log2(p / k)) if k else 0
    return StageBudgets(n1=n1, n2a=cleanup_tests(p, alpha1 * k, c2a), ntil=1, alpha1=alpha1, **extra)


def zchannel_nu(k: int, rho: float) -> float:
    """Design intensity making P(U=1) the capacity-achieving input probability.

    Solves 1 - (1 - nu/k)^k = p*, exactly at finite k.
    """
    _, p_star = channel_capacity(Channel.z(rho))
    return k * -math.expm1(math.log1p(-p_star) / k)


def budgets_zchannel(p: int, k: int, rho: float, c1: float = 1.5, c2a: float = 8.0,
                     c3: float = 2.0, alpha1: float = 0.2, **extra) -> StageBudgets:
    """Budgets for the Z-channel pipeline: ncheck = ceil(ln ln k), ntil = ceil(c3 ln k)."""
    _check_positive(c1=c1, c2a=c2a, c3=c3)
    if not 2 <= k < p:
        raise ValueError(f"need 2 <= k < p, got k={k}, p={p}")
    cap, _ = channel_capacity(Channel.z(rho))
    lnk = math.log(k)
    ncheck = max(1, math.ceil(math.log(lnk))) if lnk > 1 else 1
    extra.setdefault("nu", zchannel_nu(k, rho))
    return StageBudgets(n1=math.ceil(c1 * k * math.log(p / k) / cap), n2a=cleanup_tests(p, alpha1 * k, c2a),
                        ncheck=ncheck, ntil=max(1, math.ceil(c3 * lnk)), alpha1=alpha1, **extra)


# -- pipeline machinery ---------------------------------------------------------------


class PipelineFailed(DecodeFailed):
    """A stage decoder declared an error; carries the transcript so far."""

    def __init__(self, cause: DecodeFailed, transcript: Transcript):
        super().__init__(str(cause), info=cause.info)
        self.cause = cause
        self.reason = getattr(cause, "reason", "decode_failed")
        self.transcript = transcript


@dataclass
class RunResult:
    estimate: tuple
    transcript: Transcript
    info: dict = field(default_factory=dict)


class Pipeline:
    """A fixed list of rounds with a final decoding step.

    Subclasses implement ``plan(r, transcript)`` returning the pools of
    round ``r`` and ``finish(transcript)`` returning ``(estimate, info)``.
    Both may only look at the transcript and the design streams.
    """

    rounds: tuple = ()

    def __init__(self, p: int, k: int, channel: Channel, budgets: StageBudgets, streams: Streams):
        self.p, self.k, self.channel, self.budgets, self.streams = p, k, channel, budgets, streams
        self._cache: dict = {}

    def design_rng(self, label: str) -> np.random.Generator:
        return self.streams.get(f"{label}/design")

    def plan(self, r: int, transcript: Transcript) -> np.ndarray:
        raise NotImplementedError

    def finish(self, transcript: Transcript) -> tuple[tuple, dict]:
        raise NotImplementedError

    def run(self, instance: ProblemInstance) -> RunResult:
        t = Transcript(self.p)
        for r, name in enumerate(self.rounds):
            try:
                pools = self.plan(r, t)
            except DecodeFailed as exc:
                raise PipelineFailed(exc, t) from exc
            t.add_stage(name, pools, instance.execute(pools, f"{name}/noise"))
        try:
            est, info = self.finish(t)
        except DecodeFailed as exc:
            raise PipelineFailed(exc, t) from exc
        return RunResult(tuple(sorted(est)), t, info)

    def replay_matches(self, transcript: Transcript) -> bool:
        """Re-plan every round from its prefix with a fresh cache and compare."""
        fresh = type(self).__new__(type(self))
        fresh.__dict__.update(self.__dict__)
        fresh._cache = {}
        for r, name in enumerate(self.rounds):
            prefix = transcript.truncated(r)
            if not np.array_equal(fresh.plan(r, prefix), transcript.stage(name)[0]):
                return False
        return True

    # shared steps

    def _stage1_pools(self, q_one: float) -> np.ndarray:
        spec = DesignSpec(self.budgets.n1, tuple(range(self.p)), q_one)
        return bernoulli_matrix(spec, self.p, self.design_rng("stage1"))

    def _cleanup_q(self, kc: int) -> float:
        q = self.budgets.nu / kc
        return q if q < 1.0 else 0.5

    def _cleanup_pools(self, s1, kclean: float) -> tuple[np.ndarray, tuple]:
        population = tuple(sorted(set(range(self.p)) - set(s1)))
        kc = math.ceil(kclean)
        if self.budgets.n2a == 0 or kc == 0 or not population:
            return np.zeros((0, self.p), dtype=bool), population
        q = self._cleanup_q(kc)
        spec = DesignSpec(self.budgets.n2a, population, q)
        return bernoulli_matrix(spec, self.p, self.design_rng("stage2a")), population

    def _cleanup_decode(self, pools, y, population, kclean: float) -> tuple:
        kc = math.ceil(kclean)
        if pools.shape[0] == 0 or kc == 0:
            return ()
        q = self._cleanup_q(kc)
        delta = self.budgets.ncomp_frac * ncomp_gap(self.channel, q * kc, kc)
        return ncomp_decode(pools, y, population, kc, q * kc, self.channel, delta)


def _cached(fn):
    def wrapper(self, transcript):
        key = (fn.__name__, transcript.n)
        if key not in self._cache:
            self._cache[key] = fn(self, transcript)
        return self._cache[key]
    return wrapper


class _StageOneMixin:
    stage1: str = "threshold"
    dmax1: int = 0

    @_cached
    def stage1_estimate(self, transcript: Transcript) -> tuple:
        pools, y = transcript.stage("stage1")
        b = self.budgets
        q = b.nu / self.k
        if self.stage1 == "separate":
            return separate_decode(pools, y, self.p, self.k, b.nu, self.channel, b.sep_threshold)
        table = default_thresholds(self.p, self.k, self.dmax1)
        return threshold_decode(pools, y, self.p, self.k, self.dmax1, table, nu=q * self.k,
                                channel=self.channel)


class TwoStagePipeline(_StageOneMixin, Pipeline):
    """Stage one plus a single round holding the cleanup and the individual retests."""

    rounds = ("stage1", "stage2")

    def __init__(self, p, k, channel, budgets, streams, stage1="threshold", kclean=None, dmax1=None):
        super().__init__(p, k, channel, budgets, streams)
        if stage1 not in STAGE1_DECODERS:
            raise ValueError(f"stage1 must be one of {STAGE1_DECODERS}")
        self.stage1 = stage1
        self.kclean = budgets.alpha1 * k if kclean is None else kclean
        self.dmax1 = min(int(math.floor(budgets.alpha1 * k)), max(k - 1, 0)) if dmax1 is None else dmax1

    def _plan2(self, transcript):
        s1 = self.stage1_estimate(transcript)
        p2a, population = self._cleanup_pools(s1, self.kclean)
        p2b, order = individual_plan(s1, self.budgets.ntil, self.p) if s1 else (np.zeros((0, self.p), bool), ())
        return s1, p2a, population, p2b

    def plan(self, r, transcript):
        if r == 0:
            return self._stage1_pools(self.budgets.nu / max(self.k, 1))
        _, p2a, _, p2b = self._plan2(transcript)
        return np.vstack([p2a, p2b])

    def _retest_decision(self, board: ItemScoreBoard) -> tuple:
        return majority_vote(board, self.budgets.ntil)

    def finish(self, transcript):
        s1, p2a, population, p2b = self._plan2(transcript.truncated(1))
        pools, y = transcript.stage("stage2")
        n2a = p2a.shape[0]
        s2a = self._cleanup_decode(pools[:n2a], y[:n2a], population, self.kclean)
        board = ItemScoreBoard.from_tests(pools[n2a:], y[n2a:], s1)
        s2b = self._retest_decision(board) if len(s1) else ()
        return set(s2a) | set(s2b), {"s1": s1, "s2a": s2a, "s2b": s2b, "n2a": n2a}


class NoiselessTwoStage(TwoStagePipeline):
    def __init__(self, p, k, channel, budgets, streams, stage1="separate", **kw):
        if channel.kind is not ChannelKind.NOISELESS:
            raise ValueError("the noiseless pipeline needs a noiseless channel")
        if budgets.ntil != 1:
            budgets = budgets.with_(ntil=1)
        super().__init__(p, k, channel, budgets, streams, stage1, **kw)

    def stage1_estimate(self, transcript):
        if self.k == 0:
            return ()
        return super().stage1_estimate(transcript)

    def _retest_decision(self, board):
        return any_positive(board)


class ThreeStagePipeline(_StageOneMixin, Pipeline):
    """Stage one; cleanup and checks in round two; final retests in round three."""

    rounds = ("stage1", "stage2", "stage3")

    def __init__(self, p, k, channel, budgets, streams, stage1="threshold", kclean=None, dmax1=None):
        super().__init__(p, k, channel, budgets, streams)
        if stage1 not in STAGE1_DECODERS:
            raise ValueError(f"stage1 must be one of {STAGE1_DECODERS}")
        self.stage1 = stage1
        self.kclean = kclean
        self.dmax1 = dmax1

    def _plan2(self, transcript):
        s1 = self.stage1_estimate(transcript)
        p2a, population = self._cleanup_pools(s1, self.kclean)
        p2b = individual_plan(s1, self.budgets.ncheck, self.p)[0] if s1 else np.zeros((0, self.p), bool)
        return s1, p2a, population, p2b

    def _check_decision(self, board: ItemScoreBoard) -> tuple:
        raise NotImplementedError

    def _final_decision(self, board: ItemScoreBoard) -> tuple:
        raise NotImplementedError

    def _round2_results(self, transcript):
        s1, p2a, population, _ = self._plan2(transcript.truncated(1))
        pools, y = transcript.stage("stage2")
        n2a = p2a.shape[0]
        s2a = self._cleanup_decode(pools[:n2a], y[:n2a], population, self.kclean)
        board = ItemScoreBoard.from_tests(pools[n2a:], y[n2a:], s1)
        s2b = self._check_decision(board) if len(s1) else ()
        rest = tuple(sorted(set(s1) - set(s2b)))
        return s1, s2a, s2b, rest, n2a

    def plan(self, r, transcript):
        if r == 0:
            return self._stage1_pools(self.budgets.nu / self.k)
        if r == 1:
            _, p2a, _, p2b = self._plan2(transcript)
            return np.vstack([p2a, p2b])
        rest = self._round2_results(transcript)[3]
        if not rest:
            return np.zeros((0, self.p), dtype=bool)
        return individual_plan(rest, self.budgets.ntil, self.p)[0]

    def finish(self, transcript):
        s1, s2a, s2b, rest, n2a = self._round2_results(transcript.truncated(2))
        pools, y = transcript.stage("stage3")
        s3 = self._final_decision(ItemScoreBoard.from_tests(pools, y, rest)) if rest else ()
        return set(s2a) | set(s2b) | set(s3), {"s1": s1, "s2a": s2a, "s2b": s2b, "s3": s3, "n2a": n2a}


class Alg2Pipeline(ThreeStagePipeline):
    def __init__(self, p, k, channel, budgets, streams, stage1="threshold"):
        kg = k ** budgets.gamma
        super().__init__(p, k, channel, budgets, streams, stage1, kclean=kg,
                         dmax1=min(int(math.floor(kg)), k - 1))

    def _check_decision(self, board):
        m = max(len(board) - math.ceil(self.budgets.alpha2 * self.k), 0)
        return top_m_by_positives(board, m)

    def _final_decision(self, board):
        return majority_vote(board, self.budgets.ntil)


class ZChannelPipeline(ThreeStagePipeline):
    def __init__(self, p, k, channel, budgets, streams, stage1="threshold"):
        if channel.kind is not ChannelKind.Z:
            raise ValueError("the Z-channel pipeline needs a Z channel")
        super().__init__(p, k, channel, budgets, streams, stage1, kclean=budgets.alpha1 * k,
                         dmax1=min(int(math.floor(budgets.alpha1 * k)), k - 1))

    def finish(self, transcript):
        est, info = super().finish(transcript)
        limit = math.ceil(self.budgets.alpha1 * self.k)
        if len(info["s3"]) > limit:
            # more defectives slipped past the checks than the cleanup budget assumes
            raise DecodeFailed(f"{len(info['s3'])} defectives confirmed only in stage 3, more than {limit}",
                               info=info)
        return est, info

    def _check_decision(self, board):
        return any_positive(board)

    def _final_decision(self, board):
        return any_positive(board)


# -- entry points -------------------------------------------------------------------


def _instance_k(instance: ProblemInstance) -> int:
    if not instance.spec.is_exact:
        raise ValueError("adaptive pipelines need an exact defective count")
    return instance.spec.kmax


def run_alg1(instance: ProblemInstance, budgets: StageBudgets, stage1: str = "threshold") -> RunResult:
    """Two-stage algorithm: partial recovery, then NCOMP cleanup plus majority-vote retests."""
    if instance.channel.kind is not ChannelKind.SYMMETRIC:
        raise ValueError("the two-stage noisy algorithm targets the symmetric channel")
    pipe = TwoStagePipeline(instance.p, _instance_k(instance), instance.channel, budgets,
                            instance.streams, stage1)
    return pipe.run(instance)


def run_alg2(instance: ProblemInstance, budgets: StageBudgets, stage1: str = "threshold") -> RunResult:
    """Three-stage algorithm with top-m checks and majority-vote final retests."""
    if instance.channel.kind is not ChannelKind.SYMMETRIC:
        raise ValueError("the three-stage noisy algorithm targets the symmetric channel")
    pipe = Alg2Pipeline(instance.p, _instance_k(instance), instance.channel, budgets,
                        instance.streams, stage1)
    return pipe.run(instance)


def run_noiseless_two_stage(instance: ProblemInstance, budgets: StageBudgets,
                            stage1: str = "separate") -> RunResult:
    pipe = NoiselessTwoStage(instance.p, _instance_k(instance), instance.channel, budgets,
                             instance.streams, stage1)
    return pipe.run(instance)


def run_zchannel_three_stage(instance: ProblemInstance, budgets: StageBudgets,
                             stage1: str = "threshold") -> RunResult:
    pipe = ZChannelPipeline(instance.p, _instance_k(instance), instance.channel, budgets,
                            instance.streams, stage1)
    return pipe.run(instance)


PIPELINES: dict[str, Callable] = {
    "alg1": TwoStagePipeline,
    "alg2": Alg2Pipeline,
    "noiseless": NoiselessTwoStage,
    "zchannel": ZChannelPipeline,
}
