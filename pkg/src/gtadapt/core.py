"""Ground truth, noisy test execution and recovery criteria.

Items are indexed ``0 .. p-1``. A test pool is a boolean mask of length ``p``
and a batch of pools is an ``(n, p)`` boolean matrix.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class ChannelKind(str, enum.Enum):
    NOISELESS = "noiseless"
    SYMMETRIC = "symmetric"
    Z = "z"
    REVERSE_Z = "reverse_z"


@dataclass(frozen=True)
class BinaryChannelLaw:
    """Transition law P(Y=1 | U=u) of a binary-input binary-output channel."""

    p_y1_given_u0: float
    p_y1_given_u1: float

    def __post_init__(self):
        for v in (self.p_y1_given_u0, self.p_y1_given_u1):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"transition probability {v} outside [0, 1]")

    def p_y1(self, p_u1):
        """P(Y=1) when P(U=1) = p_u1 (broadcasts over arrays)."""
        return self.p_y1_given_u0 + (self.p_y1_given_u1 - self.p_y1_given_u0) * p_u1

    def prob(self, y, u):
        """P(Y=y | U=u), vectorised over 0/1 arrays."""
        p1 = np.where(np.asarray(u, dtype=bool), self.p_y1_given_u1, self.p_y1_given_u0)
        return np.where(np.asarray(y, dtype=bool), p1, 1.0 - p1)


@dataclass(frozen=True)
class Channel:
    kind: ChannelKind
    rho: float = 0.0

    def __post_init__(self):
        kind = ChannelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ChannelKind.NOISELESS:
            return
        if kind is ChannelKind.SYMMETRIC and not 0.0 < self.rho < 0.5:
            raise ValueError(f"symmetric channel needs 0 < rho < 1/2, got {self.rho}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"{kind.value} channel needs 0 < rho < 1, got {self.rho}")

    @classmethod
    def noiseless(cls) -> "Channel":
        return cls(ChannelKind.NOISELESS, 0.0)

    @classmethod
    def symmetric(cls, rho: float) -> "Channel":
        return cls(ChannelKind.SYMMETRIC, rho)

    @classmethod
    def z(cls, rho: float) -> "Channel":
        return cls(ChannelKind.Z, rho)

    @classmethod
    def reverse_z(cls, rho: float) -> "Channel":
        return cls(ChannelKind.REVERSE_Z, rho)

    @property
    def law(self) -> BinaryChannelLaw:
        rho = self.rho
        if self.kind is ChannelKind.NOISELESS:
            return BinaryChannelLaw(0.0, 1.0)
        if self.kind is ChannelKind.SYMMETRIC:
            return BinaryChannelLaw(rho, 1.0 - rho)
        if self.kind is ChannelKind.Z:
            return BinaryChannelLaw(0.0, 1.0 - rho)
        return BinaryChannelLaw(rho, 1.0)

    def transmit(self, u, rng: np.random.Generator) -> np.ndarray:
        """Pass noiseless outcomes ``u`` through the channel.

        One uniform draw is consumed per entry whatever the channel, so that
        streams stay aligned when the channel or the outcome changes.
        """
        u = np.asarray(u, dtype=bool)
        draws = rng.random(u.shape)
        return draws < self.law.prob(True, u)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> "Channel":
        kind = ChannelKind(d["kind"])
        return cls(kind, float(d.get("rho", 0.0)))


# -- cardinality priors --------------------------------------------------------


@dataclass(frozen=True)
class CardinalitySpec:
    """Either an exact defective count or an inclusive range ``[kmin, kmax]``."""

    kmin: int
    kmax: int

    @classmethod
    def exact(cls, k: int) -> "CardinalitySpec":
        return cls(k, k)

    @classmethod
    def range(cls, kmin: int, kmax: int) -> "CardinalitySpec":
        if kmin < 1:
            raise ValueError("a cardinality range needs kmin >= 1")
        if kmax < kmin:
            raise ValueError(f"empty cardinality range [{kmin}, {kmax}]")
        return cls(kmin, kmax)

    @property
    def is_exact(self) -> bool:
        return self.kmin == self.kmax

    @property
    def width(self) -> int:
        """kmax - kmin."""
        return self.kmax - self.kmin

    def cardinalities(self) -> range:
        return range(self.kmin, self.kmax + 1)

    def validate(self, p: int) -> None:
        if not 0 <= self.kmin <= self.kmax <= p:
            raise ValueError(f"cardinality spec [{self.kmin}, {self.kmax}] invalid for p={p}")


# -- seeded streams -------------------------------------------------------------


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def make_rng(master_seed: int, trial_index: int, label: str) -> np.random.Generator:
    """Counter-based generator keyed by ``(master_seed, trial_index, label)``.

    Philox is counter-based, so streams are independent of evaluation order
    and of how many other streams exist.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(trial_index), _label_key(label)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Streams:
    """Factory of labelled random streams for one trial."""

    master_seed: int = 0
    trial_index: int = 0

    def get(self, label: str) -> np.random.Generator:
        return make_rng(self.master_seed, self.trial_index, label)


# -- defective sets and tests -----------------------------------------------------


def sample_defective_set(p: int, spec: CardinalitySpec, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over every admissible set.

    For a range prior each cardinality is weighted by its number of sets, so
    the result is uniform over the union rather than over cardinalities.
    """
    spec.validate(p)
    ks = list(spec.cardinalities())
    if len(ks) == 1:
        k = ks[0]
    else:
        counts = np.array([math.comb(p, k) for k in ks], dtype=float)
        k = int(rng.choice(ks, p=counts / counts.sum()))
    items = rng.choice(p, size=k, replace=False)
    return tuple(sorted(int(i) for i in items))


def as_mask(items: Sequence[int], p: int) -> np.ndarray:
    mask = np.zeros(p, dtype=bool)
    mask[list(items)] = True
    return mask


def noiseless_outcomes(pools: np.ndarray, defectives: Sequence[int]) -> np.ndarray:
    """OR of each pool restricted to the defective set."""
    pools = np.atleast_2d(np.asarray(pools, dtype=bool))
    if len(defectives) == 0:
        return np.zeros(pools.shape[0], dtype=bool)
    return pools[:, list(defectives)].any(axis=1)


def run_tests(pools: np.ndarray, defectives: Sequence[int], channel: Channel,
              rng: np.random.Generator, p: int | None = None) -> np.ndarray:
    pools = np.asarray(pools, dtype=bool)
    if pools.ndim != 2:
        raise ValueError("pools must be an (n, p) matrix")
    if p is not None and pools.shape[1] != p:
        raise ValueError(f"pool length {pools.shape[1]} does not match p={p}")
    u = noiseless_outcomes(pools, defectives)
    return channel.transmit(u, rng)


def run_test(pool: np.ndarray, defectives: Sequence[int], channel: Channel,
             rng: np.random.Generator, p: int | None = None) -> bool:
    pool = np.asarray(pool, dtype=bool)
    if pool.ndim != 1:
        raise ValueError("a single pool must be a 1-d mask")
    return bool(run_tests(pool[None, :], defectives, channel, rng, p)[0])


def distance(s: Sequence[int], shat: Sequence[int]) -> int:
    """max(|S \\ Shat|, |Shat \\ S|)."""
    a, b = set(s), set(shat)
    return max(len(a - b), len(b - a))


# -- problem instances and transcripts -------------------------------------------


@dataclass(frozen=True)
class ProblemInstance:
    """A sampled ground truth together with the channel used to test it."""

    p: int
    spec: CardinalitySpec
    channel: Channel
    defectives: tuple[int, ...]
    streams: Streams = field(default_factory=Streams)

    @classmethod
    def sample(cls, p: int, spec: CardinalitySpec, channel: Channel,
               streams: Streams) -> "ProblemInstance":
        # S is drawn first, from its own stream, independent of all test randomness.
        s = sample_defective_set(p, spec, streams.get("defectives"))
        return cls(p, spec, channel, s, streams)

    @property
    def k(self) -> int:
        """Declared defective count (the upper end for range priors)."""
        return self.spec.kmax

    def execute(self, pools: np.ndarray, label: str) -> np.ndarray:
        return run_tests(pools, self.defectives, self.channel, self.streams.get(label), self.p)


@dataclass
class Transcript:
    """Every pool and outcome of an adaptive run, split into rounds."""

    p: int
    pools: np.ndarray = None
    outcomes: np.ndarray = None
    stage_marks: list = field(default_factory=list)

    def __post_init__(self):
        if self.pools is None:
            self.pools = np.zeros((0, self.p), dtype=bool)
        if self.outcomes is None:
            self.outcomes = np.zeros(0, dtype=bool)

    def add_stage(self, name: str, pools: np.ndarray, outcomes: np.ndarray) -> None:
        pools = np.asarray(pools, dtype=bool).reshape(-1, self.p)
        outcomes = np.asarray(outcomes, dtype=bool).reshape(-1)
        if pools.shape[0] != outcomes.shape[0]:
            raise ValueError("pools and outcomes disagree in length")
        self.stage_marks.append((name, self.n))
        self.pools = np.vstack([self.pools, pools])
        self.outcomes = np.concatenate([self.outcomes, outcomes])

    @property
    def n(self) -> int:
        return int(self.outcomes.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def entries(self) -> Iterator[tuple[np.ndarray, bool]]:
        for row, y in zip(self.pools, self.outcomes):
            yield row, bool(y)

    def stage_slice(self, name: str) -> slice:
        for i, (nm, start) in enumerate(self.stage_marks):
            if nm == name:
                end = self.stage_marks[i + 1][1] if i + 1 < len(self.stage_marks) else self.n
                return slice(start, end)
        raise KeyError(name)

    def stage(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        sl = self.stage_slice(name)
        return self.pools[sl], self.outcomes[sl]

    def stage_sizes(self) -> dict:
        return {name: self.stage_slice(name).stop - self.stage_slice(name).start
                for name, _ in self.stage_marks}

    def truncated(self, n_stages: int) -> "Transcript":
        """Copy holding only the first ``n_stages`` rounds."""
        t = Transcript(self.p)
        for name, _ in self.stage_marks[:n_stages]:
            pools, outcomes = self.stage(name)
            t.add_stage(name, pools, outcomes)
        return t
