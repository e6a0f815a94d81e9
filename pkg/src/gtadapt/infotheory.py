"""Binary information measures, channel capacity and information densities.

All quantities are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .core import BinaryChannelLaw, Channel

LN2 = math.log(2.0)


def _check_prob(x: float, name: str = "probability") -> None:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} {x} outside [0, 1]")


def _xlogy_over(x: float, a: float, b: float) -> float:
    # x * log(a / b) with the 0 * log(.) = 0 convention
    if x == 0.0:
        return 0.0
    if b == 0.0:
        return math.inf
    return x * math.log(a / b)


def binary_entropy(rho: float) -> float:
    _check_prob(rho)
    if rho == 0.0 or rho == 1.0:
        return 0.0
    return -rho * math.log(rho) - (1.0 - rho) * math.log1p(-rho)


def binary_kl(qp: float, q: float) -> float:
    """D(Bern(qp) || Bern(q)); ``math.inf`` when qp puts mass where q has none."""
    _check_prob(qp)
    _check_prob(q)
    return _xlogy_over(qp, qp, q) + _xlogy_over(1.0 - qp, 1.0 - qp, 1.0 - q)


def binary_convolution(a: float, b: float) -> float:
    """Probability that the XOR of independent Bern(a) and Bern(b) is one."""
    _check_prob(a)
    _check_prob(b)
    return a * (1.0 - b) + (1.0 - a) * b


def mutual_information(p_u1: float, law: BinaryChannelLaw) -> float:
    """I(U; Y) for U ~ Bern(p_u1)."""
    _check_prob(p_u1)
    py1 = law.p_y1(p_u1)
    return binary_entropy(py1) - (
        (1.0 - p_u1) * binary_entropy(law.p_y1_given_u0) + p_u1 * binary_entropy(law.p_y1_given_u1)
    )


def _entropy_slope(x: float) -> float:
    # d/dx of the binary entropy
    if x <= 0.0:
        return math.inf
    if x >= 1.0:
        return -math.inf
    return math.log1p(-x) - math.log(x)


def channel_capacity(law: BinaryChannelLaw | Channel, tol: float = 1e-12) -> tuple[float, float]:
    """Capacity and capacity-achieving P(U=1).

    I(U; Y) is concave in P(U=1); the maximiser is located as the root of
    its derivative, which is far better conditioned than searching on the
    (flat) objective itself.  Degenerate laws return (0, 1/2).
    """
    if isinstance(law, Channel):
        law = law.law
    a, b = law.p_y1_given_u0, law.p_y1_given_u1
    if a == b:
        return 0.0, 0.5
    h_gap = binary_entropy(b) - binary_entropy(a)

    def slope(t: float) -> float:
        return (b - a) * _entropy_slope(law.p_y1(t)) - h_gap

    lo, hi = 0.0, 1.0
    if slope(lo) <= 0.0:
        p_star = lo
    elif slope(hi) >= 0.0:
        p_star = hi
    else:
        p_star = brentq(slope, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)
    return mutual_information(p_star, law), float(p_star)


# -- conditional mutual information under i.i.d. Bernoulli designs ------------------


@dataclass(frozen=True)
class DensityContext:
    """Parameters of a (S_dif, S_eq) split under an i.i.d. Bernoulli design.

    ``k`` is the size of the hypothesised defective set, ``ell`` the size of
    S_dif, and ``q_one`` the probability that an item enters a test.
    """

    k: int
    ell: int
    nu: float
    law: BinaryChannelLaw
    q_one: float

    def __post_init__(self):
        if not 1 <= self.ell <= self.k:
            raise ValueError(f"need 1 <= ell <= k, got ell={self.ell}, k={self.k}")
        if not 0.0 < self.q_one < 1.0:
            raise ValueError(f"q_one must lie in (0, 1), got {self.q_one}")

    @classmethod
    def build(cls, k: int, ell: int, channel: Channel | BinaryChannelLaw,
              nu: float = LN2, kdesign: int | None = None) -> "DensityContext":
        law = channel.law if isinstance(channel, Channel) else channel
        return cls(k, ell, nu, law, nu / (kdesign if kdesign is not None else k))

    @property
    def q_dif(self) -> float:
        """P(some item of S_dif is in the test)."""
        return -math.expm1(self.ell * math.log1p(-self.q_one))

    @property
    def p_eq_empty(self) -> float:
        """P(no item of S_eq is in the test)."""
        return math.exp((self.k - self.ell) * math.log1p(-self.q_one))


def exact_conditional_mi(ctx: DensityContext) -> float:
    """I(X_dif; Y | X_eq) for the i.i.d. design.

    If any S_eq item is tested the outcome no longer depends on X_dif, and
    otherwise Y depends on X_dif only through its OR.
    """
    return ctx.p_eq_empty * mutual_information(ctx.q_dif, ctx.law)


def _symmetric_rho(law: BinaryChannelLaw) -> float:
    rho = law.p_y1_given_u0
    if not math.isclose(law.p_y1_given_u1, 1.0 - rho, rel_tol=0, abs_tol=1e-15) or not 0 < rho < 0.5:
        raise NotImplementedError("asymptotic expressions are only available for the symmetric channel")
    return rho


def asymptotic_mi(ctx: DensityContext, regime: str = "constant", alpha: float | None = None) -> float:
    """Leading-order I_ell as k grows.

    ``regime="small"``: ell/k -> 0.  ``regime="constant"``: ell/k -> alpha,
    with alpha defaulting to ell/k.
    """
    rho = _symmetric_rho(ctx.law)
    nu = ctx.nu
    if regime == "small":
        frac = ctx.ell / ctx.k
        return math.exp(-nu) * nu * frac * (1 - 2 * rho) * math.log((1 - rho) / rho)
    if regime == "constant":
        a = ctx.ell / ctx.k if alpha is None else alpha
        if not 0.0 < a <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {a}")
        mixed = binary_convolution(math.exp(-a * nu), rho)
        return math.exp(-(1 - a) * nu) * (binary_entropy(mixed) - binary_entropy(rho))
    raise ValueError(f"unknown regime {regime!r}")


# -- information density --------------------------------------------------------


def _safe_log_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(num) - np.log(den)
    # 0/0 only arises for outcomes that are impossible under both laws
    return np.where((num == 0) & (den == 0), 0.0, out)


def density_terms(u_dif: np.ndarray, eq_empty: np.ndarray, y: np.ndarray,
                  law: BinaryChannelLaw, q_dif: float) -> np.ndarray:
    """Per-test densities given OR(x_dif), [OR(x_eq) == 0] and the outcomes."""
    u_dif = np.asarray(u_dif, dtype=bool)
    y = np.asarray(y, dtype=bool)
    num = law.prob(y, u_dif)
    py1 = law.p_y1(q_dif)
    den = np.where(y, py1, 1.0 - py1)
    return np.where(eq_empty, _safe_log_ratio(num, den), 0.0)


def information_density(x_dif, x_eq, y, ctx: DensityContext) -> float:
    """Sum over tests of log P(y | x_dif, x_eq) / P(y | x_eq).

    ``x_dif`` and ``x_eq`` are (n, ell) and (n, k - ell) 0/1 matrices.  The
    result can be -inf (or +inf) when an outcome is impossible under one law.
    """
    y = np.asarray(y, dtype=bool).reshape(-1)
    n = y.shape[0]
    if n == 0:
        return 0.0
    x_dif = np.asarray(x_dif, dtype=bool).reshape(n, -1)
    x_eq = np.asarray(x_eq, dtype=bool).reshape(n, -1)
    if x_dif.shape[1] != ctx.ell or x_eq.shape[1] != ctx.k - ctx.ell:
        raise ValueError("column counts do not match the context")
    terms = density_terms(x_dif.any(axis=1), ~x_eq.any(axis=1), y, ctx.law, ctx.q_dif)
    return float(terms.sum())
