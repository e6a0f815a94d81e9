"""Monte Carlo experiment runner, budget sweeps and verification batteries.

Per-trial CSV columns: trial_index, tests_used, distance, error, failure.
``distance`` is empty when the pipeline declared a failure.  Summary CSV
columns (sweeps): value, pe_hat, ci_low, ci_high, mean_tests, trials.
"""

from __future__ import annotations

import csv
import inspect
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from . import adaptive, bounds, decoders, design
from .core import CardinalitySpec, Channel, ProblemInstance, Streams, distance, make_rng
from .infotheory import (
    LN2, DensityContext, asymptotic_mi, binary_entropy, binary_kl, channel_capacity,
    density_terms, exact_conditional_mi,
)

PIPELINE_NAMES = ("alg1", "alg2", "noiseless", "zchannel", "individual", "threshold")
COUNT_FIELDS = ("n1", "n2a", "ncheck", "ntil")


# -- configuration --------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    p: int
    kmin: int
    kmax: int
    channel: Channel
    pipeline: str
    budget: dict = field(default_factory=dict)
    stage1: str = "separate"
    trials: int = 100
    master_seed: int = 0
    dmax: int = 0
    threads: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.dmax < 0:
            raise ValueError("dmax must be non-negative")
        if self.pipeline not in PIPELINE_NAMES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; choose from {', '.join(PIPELINE_NAMES)}")
        if self.stage1 not in adaptive.STAGE1_DECODERS:
            raise ValueError(f"stage1 must be one of {adaptive.STAGE1_DECODERS}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        self.spec.validate(self.p)

    @property
    def spec(self) -> CardinalitySpec:
        if self.kmin == self.kmax:
            return CardinalitySpec.exact(self.kmax)
        return CardinalitySpec.range(self.kmin, self.kmax)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "k" in d:
            k = d.pop("k")
            d.setdefault("kmin", k)
            d.setdefault("kmax", k)
        ch = d.pop("channel", {"kind": "noiseless"})
        d["channel"] = ch if isinstance(ch, Channel) else Channel.from_dict(ch)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel"] = self.channel.to_dict()
        return d

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def fixtures() -> dict:
    """Version-controlled budget multipliers found by one-off sweeps."""
    text = resources.files("gtadapt").joinpath("data/fixtures.json").read_text()
    return json.loads(text)


def fixture_config(name: str, **overrides) -> ExperimentConfig:
    d = dict(fixtures()[name])
    d.pop("note", None)
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


# -- budgets and single trials -----------------------------------------------------------


def build_budgets(cfg: ExperimentConfig) -> adaptive.StageBudgets | None:
    params = dict(cfg.budget)
    counts = {f: int(params.pop(f)) for f in COUNT_FIELDS if f in params}
    if cfg.pipeline not in _BUILDERS:
        return None
    if cfg.pipeline == "noiseless":
        b = adaptive.budgets_noiseless(cfg.p, cfg.kmax, **params)
    else:
        b = _BUILDERS[cfg.pipeline](cfg.p, cfg.kmax, cfg.channel.rho, **params)
    return b.with_(**counts) if counts else b


_BUILDERS = {
    "alg1": adaptive.budgets_alg1,
    "alg2": adaptive.budgets_alg2,
    "noiseless": adaptive.budgets_noiseless,
    "zchannel": adaptive.budgets_zchannel,
}
_DIRECT_KNOBS = {"individual": ("reps",), "threshold": ("n", "delta1", "delta2", "nu")}


def budget_knobs(pipeline: str) -> tuple[str, ...]:
    """Names accepted in ``ExperimentConfig.budget`` for a pipeline."""
    if pipeline in _DIRECT_KNOBS:
        return _DIRECT_KNOBS[pipeline]
    params = [n for n in inspect.signature(_BUILDERS[pipeline]).parameters if n not in ("p", "k", "rho", "extra")]
    fields = [f for f in adaptive.StageBudgets.__dataclass_fields__ if f not in params]
    return tuple(params + fields)


@dataclass
class TrialResult:
    trial_index: int
    tests_used: int
    distance: int | None
    elapsed: float
    failure: str = ""
    error: bool = False
    info: dict = field(default_factory=dict, repr=False)
    defectives: tuple = field(default=(), repr=False)
    estimate: tuple | None = field(default=None, repr=False)


def _run_direct(cfg: ExperimentConfig, inst: ProblemInstance):
    """The two non-adaptive pipelines: individual testing and a lone threshold decoder."""
    params = dict(cfg.budget)
    if cfg.pipeline == "individual":
        pools, _ = design.individual_plan(range(cfg.p), int(params.get("reps", 1)), cfg.p)
        y = inst.execute(pools, "individual/noise")
        board = decoders.ItemScoreBoard.from_tests(pools, y, range(cfg.p))
        reps = int(params.get("reps", 1))
        est = decoders.majority_vote(board, reps) if reps > 1 else decoders.any_positive(board)
        return est, pools.shape[0], {}
    nu = float(params.get("nu", LN2))
    n = int(params["n"])
    pools = design.bernoulli_matrix(design.DesignSpec(n, tuple(range(cfg.p)), nu / cfg.kmax), cfg.p,
                                    inst.streams.get("stage1/design"))
    y = inst.execute(pools, "stage1/noise")
    delta1 = float(params.get("delta1", 0.05))
    if cfg.spec.is_exact:
        table = decoders.default_thresholds(cfg.p, cfg.kmax, cfg.dmax, delta1)
        est = decoders.threshold_decode(pools, y, cfg.p, cfg.kmax, cfg.dmax, table, nu=nu, channel=cfg.channel)
    else:
        ks = list(cfg.spec.cardinalities())
        table = decoders.unknown_k_thresholds(cfg.p, ks, cfg.dmax, delta1, n=n, channel=cfg.channel,
                                              nu=nu, delta2=float(params.get("delta2", 0.45)))
        est = decoders.threshold_decode_unknown_k(pools, y, cfg.p, ks, cfg.dmax, table, nu=nu,
                                                  channel=cfg.channel)
    return est, n, {}


def run_trial(cfg: ExperimentConfig, trial_index: int, budgets=None) -> TrialResult:
    start = time.perf_counter()
    streams = Streams(cfg.master_seed, trial_index)
    inst = ProblemInstance.sample(cfg.p, cfg.spec, cfg.channel, streams)
    est, used, info, failure = None, 0, {}, ""
    try:
        if isinstance(budgets, Exception):
            raise budgets
        if cfg.pipeline in ("individual", "threshold"):
            est, used, info = _run_direct(cfg, inst)
        else:
            b = budgets if budgets is not None else build_budgets(cfg)
            cls = adaptive.PIPELINES[cfg.pipeline]
            pipe = cls(cfg.p, cfg.kmax, cfg.channel, b, streams, stage1=cfg.stage1)
            res = pipe.run(inst)
            est, used, info = res.estimate, res.transcript.n, res.info
    except decoders.DecodeFailed as exc:
        failure = exc.reason
        info = dict(getattr(exc, "info", {}) or {})
        t = getattr(exc, "transcript", None)
        used = t.n if t is not None else used
    except (ValueError, TypeError, KeyError, NotImplementedError) as exc:
        # misconfiguration is reported on the trial rather than aborting the batch
        failure = f"misconfigured: {exc}"
    dist = distance(inst.defectives, est) if est is not None else None
    err = dist is None or dist > cfg.dmax
    return TrialResult(trial_index, int(used), dist, time.perf_counter() - start, failure, err, info,
                       inst.defectives, tuple(est) if est is not None else None)


# -- experiments ---------------------------------------------------------------------


def wilson_interval(errors: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(errors, trials).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class ExperimentSummary:
    pe_hat: float
    wilson_95: tuple[float, float]
    mean_tests: float
    trials: list
    elapsed: float = 0.0

    @property
    def errors(self) -> int:
        return sum(t.error for t in self.trials)

    def pe_at(self, dmax: int) -> float:
        """Error rate of the same trials under another partial-recovery radius."""
        bad = sum(t.distance is None or t.distance > dmax for t in self.trials)
        return bad / len(self.trials)

    def to_json(self) -> dict:
        return {
            "pe_hat": self.pe_hat,
            "wilson_95": list(self.wilson_95),
            "mean_tests": self.mean_tests,
            "trials": len(self.trials),
            "errors": self.errors,
            "elapsed_seconds": self.elapsed,
        }


def run_experiment(cfg: ExperimentConfig) -> ExperimentSummary:
    """Run ``cfg.trials`` independent trials; results do not depend on ``cfg.threads``."""
    start = time.perf_counter()
    try:
        budgets = build_budgets(cfg)
    except (ValueError, TypeError) as exc:
        budgets = exc
    idx = range(cfg.trials)
    if cfg.threads == 1:
        results = [run_trial(cfg, i, budgets) for i in idx]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda i: run_trial(cfg, i, budgets), idx))
    results.sort(key=lambda r: r.trial_index)
    errors = sum(r.error for r in results)
    summary = ExperimentSummary(
        pe_hat=errors / cfg.trials,
        wilson_95=wilson_interval(errors, cfg.trials),
        mean_tests=float(np.mean([r.tests_used for r in results])),
        trials=results,
        elapsed=time.perf_counter() - start,
    )
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            fh.write(trials_csv(results))
    return summary


def trials_csv(results: Sequence[TrialResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial_index", "tests_used", "distance", "error", "failure"])
    for r in results:
        w.writerow([r.trial_index, r.tests_used, "" if r.distance is None else r.distance, int(r.error), r.failure])
    return buf.getvalue()


@dataclass
class SweepRow:
    value: float
    pe_hat: float
    ci_low: float
    ci_high: float
    mean_tests: float
    trials: int
    summary: ExperimentSummary = field(repr=False, default=None)


def sweep(cfg: ExperimentConfig, knob: str, values: Sequence[float]) -> list[SweepRow]:
    """One experiment per knob value, in ascending order.

    Every value reuses the master seed, so trial i sees the same defective
    set and the same random streams at each budget (common random numbers).
    """
    if knob not in budget_knobs(cfg.pipeline):
        raise ValueError(f"{knob!r} is not a budget field of pipeline {cfg.pipeline!r}")
    rows = []
    for v in sorted(values):
        budget = dict(cfg.budget)
        budget[knob] = v
        s = run_experiment(cfg.with_(budget=budget, out=None))
        rows.append(SweepRow(float(v), s.pe_hat, s.wilson_95[0], s.wilson_95[1], s.mean_tests,
                             len(s.trials), s))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "pe_hat", "ci_low", "ci_high", "mean_tests", "trials"])
    for r in rows:
        w.writerow([f"{r.value:.12g}", f"{r.pe_hat:.12g}", f"{r.ci_low:.12g}", f"{r.ci_high:.12g}",
                    f"{r.mean_tests:.12g}", r.trials])
    return buf.getvalue()


@dataclass
class SignTest:
    improved: int
    worsened: int
    p_worse: float
    p_better: float

    def no_worse(self, level: float = 0.05) -> bool:
        """No significant evidence that the larger budget does worse."""
        return self.p_worse >= level

    def better(self, level: float = 0.05) -> bool:
        return self.p_better < level


def paired_sign_test(before: Sequence[float], after: Sequence[float]) -> SignTest:
    """One-sided sign tests on paired per-trial scores (lower is better)."""
    b = np.asarray(before, dtype=float)
    a = np.asarray(after, dtype=float)
    improved = int((a < b).sum())
    worsened = int((a > b).sum())
    m = improved + worsened
    if m == 0:
        return SignTest(0, 0, 1.0, 1.0)
    return SignTest(improved, worsened,
                    float(binomtest(worsened, m, 0.5, alternative="greater").pvalue),
                    float(binomtest(improved, m, 0.5, alternative="greater").pvalue))


def trial_scores(summary: ExperimentSummary, key: str = "error") -> np.ndarray:
    """Per-trial error indicators, or distances with failures scored as +inf."""
    if key == "error":
        return np.array([float(t.error) for t in summary.trials])
    return np.array([math.inf if t.distance is None else float(t.distance) for t in summary.trials])


def sweep_sign_test(rows: Sequence[SweepRow], key: str = "error") -> SignTest:
    """Pool paired comparisons between consecutive sweep values."""
    before, after = [], []
    for lo, hi in zip(rows, rows[1:]):
        b, a = trial_scores(lo.summary, key), trial_scores(hi.summary, key)
        # inf - inf comparisons are ties, which the sign test drops
        before.extend(b)
        after.extend(a)
    return paired_sign_test(before, after)


# -- Chernoff check ---------------------------------------------------------------------


@dataclass
class ChernoffReport:
    N: int
    q: float
    qprime: float
    samples: int
    empirical: float
    bound: float
    sigma: float

    @property
    def passed(self) -> bool:
        return self.empirical <= self.bound + 3 * self.sigma


def empirical_chernoff_check(N: int, q: float, qprime: float, samples: int,
                             rng: np.random.Generator | None = None) -> ChernoffReport:
    """Compare P[Bin(N, q) <= N q'] with exp(-N D(q' || q)) by simulation."""
    if not qprime < q:
        raise ValueError(f"need q' < q, got q'={qprime}, q={q}")
    if rng is None:
        rng = make_rng(0, 0, "chernoff")
    z = rng.binomial(N, q, size=samples)
    emp = float(np.mean(z <= N * qprime))
    bound = math.exp(-N * binary_kl(qprime, q))
    sigma = math.sqrt(max(emp * (1 - emp), bound * (1 - bound)) / samples)
    return ChernoffReport(N, q, qprime, samples, emp, bound, sigma)


# -- verification batteries ----------------------------------------------------------------


@dataclass
class Check:
    battery: str
    name: str
    passed: bool
    detail: str


def _flip(ok: bool, inject_fault: bool) -> bool:
    return (not ok) if inject_fault else bool(ok)


def battery_change_of_measure(inject_fault: bool = False, n: int = 12) -> list[Check]:
    out = []
    for sname, make in bounds.STRATEGIES.items():
        for kind, rho in (("symmetric", 0.1), ("symmetric", 0.3), ("reverse_z", 0.3)):
            rep = bounds.verify_change_of_measure(6, 2, rho, make(6), 0.25, n, kind, inject_fault=inject_fault)
            out.append(Check("change-of-measure", f"{sname}/{kind}/rho={rho}", rep.passed,
                             f"{rep.violations} violations in {rep.checks} checks"))
    return out


CHERNOFF_CASES = ((100, 0.3, 0.2), (50, 0.89, 0.5), (200, 0.11, 0.05))


def battery_chernoff(inject_fault: bool = False, samples: int = 100_000) -> list[Check]:
    out = []
    for i, (N, q, qp) in enumerate(CHERNOFF_CASES):
        rep = empirical_chernoff_check(N, q, qp, samples, make_rng(0, i, "chernoff"))
        ok = _flip(rep.passed, inject_fault)
        out.append(Check("chernoff", f"N={N},q={q},q'={qp}", ok,
                         f"empirical {rep.empirical:.3e} vs bound {rep.bound:.3e} (+3 sigma {3 * rep.sigma:.1e})"))
    return out


def empirical_density_mean(ctx: DensityContext, samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of the per-test density under the model."""
    x_dif = rng.random((samples, ctx.ell)) < ctx.q_one
    x_eq = rng.random((samples, ctx.k - ctx.ell)) < ctx.q_one
    u = x_dif.any(axis=1) | x_eq.any(axis=1)
    y = rng.random(samples) < ctx.law.prob(True, u)
    terms = density_terms(x_dif.any(axis=1), ~x_eq.any(axis=1), y, ctx.law, ctx.q_dif)
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(samples))


def battery_mutual_information(inject_fault: bool = False) -> list[Check]:
    sym = Channel.symmetric(0.11)
    out = []
    ctx = DensityContext.build(100_000, 100, sym)
    ex, asy = exact_conditional_mi(ctx), asymptotic_mi(ctx, "small")
    out.append(Check("mi", "small-fraction k=1e5 ell=100", _flip(abs(ex / asy - 1) <= 0.02, inject_fault),
                     f"exact {ex:.6e} asymptotic {asy:.6e}"))
    ctx = DensityContext.build(500, 500, sym)
    ex, asy = exact_conditional_mi(ctx), asymptotic_mi(ctx, "constant", 1.0)
    out.append(Check("mi", "constant-fraction ell=k=500", _flip(abs(ex / asy - 1) <= 0.01, inject_fault),
                     f"exact {ex:.6e} asymptotic {asy:.6e}"))
    ident = asymptotic_mi(DensityContext.build(10, 10, sym), "constant", 1.0)
    target = LN2 - binary_entropy(0.11)
    out.append(Check("mi", "alpha=1 identity", _flip(abs(ident - target) <= 1e-10, inject_fault),
                     f"difference {abs(ident - target):.2e}"))
    ctx = DensityContext.build(6, 2, sym)
    mean, se = empirical_density_mean(ctx, 100_000, make_rng(0, 0, "density"))
    ex = exact_conditional_mi(ctx)
    out.append(Check("mi", "empirical density mean k=6 ell=2", _flip(abs(mean - ex) <= 3 * se, inject_fault),
                     f"empirical {mean:.5f} +- {se:.5f} vs exact {ex:.5f}"))
    return out


def brute_force_capacity(channel: Channel, points: int = 100_001, rounds: int = 3) -> float:
    """Maximise I(U; Y) over P(U=1) by repeatedly zooming a uniform grid."""
    law = channel.law
    a, b = law.p_y1_given_u0, law.p_y1_given_u1

    def h(x):
        x = np.clip(x, 1e-300, 1 - 1e-16)
        return -(x * np.log(x) + (1 - x) * np.log1p(-x))

    def mi(t):
        return h(a + t * (b - a)) - ((1 - t) * float(h(np.array(a))) + t * float(h(np.array(b))))

    lo, hi = 0.0, 1.0
    for _ in range(rounds):
        t = np.linspace(lo, hi, points)
        i = int(np.argmax(mi(t)))
        step = (hi - lo) / (points - 1)
        lo, hi = max(0.0, t[i] - 2 * step), min(1.0, t[i] + 2 * step)
    return float(mi(np.linspace(lo, hi, points)).max())


def battery_capacity(inject_fault: bool = False) -> list[Check]:
    out = []
    worst = max(abs(channel_capacity(Channel.symmetric(r))[0] - (LN2 - binary_entropy(r)))
                for r in np.linspace(0.01, 0.49, 49))
    out.append(Check("capacity", "symmetric closed form", _flip(worst <= 1e-8, inject_fault), f"max error {worst:.2e}"))
    cz, _ = channel_capacity(Channel.z(0.3))
    brute = brute_force_capacity(Channel.z(0.3))
    out.append(Check("capacity", "Z optimum vs grid search", _flip(abs(cz - brute) <= 1e-8, inject_fault),
                     f"{cz:.12f} vs {brute:.12f}"))
    crz, _ = channel_capacity(Channel.reverse_z(0.3))
    out.append(Check("capacity", "Z equals reverse Z", _flip(abs(cz - crz) <= 1e-8, inject_fault),
                     f"{cz:.12f} vs {crz:.12f}"))
    return out


BATTERIES = {
    "change-of-measure": battery_change_of_measure,
    "chernoff": battery_chernoff,
    "mi": battery_mutual_information,
    "capacity": battery_capacity,
}


def run_batteries(only: Sequence[str] | None = None, inject_fault: bool = False) -> list[Check]:
    names = list(BATTERIES) if not only else list(only)
    for n in names:
        if n not in BATTERIES:
            raise ValueError(f"unknown battery {n!r}; choose from {', '.join(BATTERIES)}")
    checks: list[Check] = []
    for n in names:
        checks.extend(BATTERIES[n](inject_fault=inject_fault))
    return checks
