"""Toxicity surface model for two-drug combinations, plus truth generators.

The joint DLT probability at combination (i, j) links the two single-agent
toxicity probabilities a_i and b_j through a Clayton-structured formula

    pi_ij = 1 - {(1 - a_i^alpha)^(-gamma) + (1 - b_j^beta)^(-gamma) - 1}^(-1/gamma)

with positive parameters (alpha, beta, gamma).  Setting one drug's
probability to zero collapses the formula to the single-agent power model
pi = b^beta, and pi hits 1 as soon as either single-agent probability does.

Everything in this module is a pure function of its arguments; the MCMC
machinery lives in `posterior`.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DoseGrid",
    "ToxicityParams",
    "ToxicityCounts",
    "GammaPrior",
    "LogisticCoeffs",
    "combo_toxicity",
    "toxicity_surface",
    "log_likelihood",
    "log_posterior",
    "logistic_truth",
]


@dataclass(frozen=True)
class DoseGrid:
    """Prespecified single-agent toxicity probabilities for drugs A and B.

    `a` has length I (doses of drug A), `b` has length J (doses of drug B);
    both must be strictly increasing within (0, 1).
    """

    a: tuple[float, ...]
    b: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        for name, vec in (("a", self.a), ("b", self.b)):
            if len(vec) < 1:
                raise ValueError(f"grid.{name} must have at least one dose")
            prev = 0.0
            for k, v in enumerate(vec):
                if not math.isfinite(v) or not 0.0 < v < 1.0:
                    raise ValueError(f"grid.{name}[{k}] must lie in (0, 1), got {v}")
                if v <= prev and k > 0:
                    raise ValueError(f"grid.{name} must be strictly increasing")
                prev = v

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.a), len(self.b)


@dataclass(frozen=True)
class ToxicityParams:
    """Parameters (alpha, beta, gamma) of the combination toxicity model."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be a positive finite real, got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return self.alpha, self.beta, self.gamma


@dataclass(frozen=True)
class GammaPrior:
    """Gamma prior in shape/rate form (mean = shape/rate)."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (math.isfinite(self.shape) and self.shape > 0.0):
            raise ValueError(f"prior shape must be positive, got {self.shape}")
        if not (math.isfinite(self.rate) and self.rate > 0.0):
            raise ValueError(f"prior rate must be positive, got {self.rate}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    def log_density(self, x: float) -> float:
        """Normalized log density; -inf outside the support."""
        if not math.isfinite(x) or x <= 0.0:
            return -math.inf
        return (
            self.shape * math.log(self.rate)
            - math.lgamma(self.shape)
            + (self.shape - 1.0) * math.log(x)
            - self.rate * x
        )


class ToxicityCounts:
    """Per-combination patient and DLT tallies, shaped like the dose grid."""

    def __init__(self, n, x):
        self.n = np.asarray(n, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.int64)
        if self.n.shape != self.x.shape or self.n.ndim != 2:
            raise ValueError("counts n and x must be matrices of identical shape")
        if (self.n < 0).any() or (self.x < 0).any() or (self.x > self.n).any():
            raise ValueError("counts must satisfy 0 <= x_ij <= n_ij")

    @classmethod
    def empty(cls, grid: DoseGrid) -> "ToxicityCounts":
        shape = grid.shape
        return cls(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.n.shape

    def total(self) -> int:
        return int(self.n.sum())


@dataclass(frozen=True)
class LogisticCoeffs:
    """Coefficients of the logistic truth generator over standardized doses."""

    b0: float
    b1: float
    b2: float
    b3: float
    z_a: tuple[float, ...]
    z_b: tuple[float, ...]

    def __post_init__(self):
        for name, v in (("b0", self.b0), ("b1", self.b1), ("b2", self.b2), ("b3", self.b3)):
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        for name, vec in (("z_a", self.z_a), ("z_b", self.z_b)):
            if len(vec) < 1 or not all(math.isfinite(v) for v in vec):
                raise ValueError(f"{name} must be a non-empty vector of finite reals")


def combo_toxicity(params: ToxicityParams, a: float, b: float) -> float:
    """Joint toxicity probability at single-agent probabilities (a, b).

    Evaluated through expm1/log1p so that extreme parameter values (gamma
    near 0 or very large) degrade gracefully instead of overflowing.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"dose probabilities must be finite, got a={a}, b={b}")
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValueError(f"dose probabilities must lie in [0, 1], got a={a}, b={b}")
    alpha, beta, gamma = params.as_tuple()
    pa = a**alpha
    pb = b**beta
    if pa >= 1.0 or pb >= 1.0:
        return 1.0
    # ua, ub >= 0; S = e^ua + e^ub - 1 >= 1
    ua = -gamma * math.log1p(-pa)
    ub = -gamma * math.log1p(-pb)
    m = max(ua, ub)
    if m < 40.0:
        log_s = math.log1p(math.expm1(ua) + math.expm1(ub))
    else:
        log_s = m + math.log(math.exp(ua - m) + math.exp(ub - m) - math.exp(-m))
    pi = -math.expm1(-log_s / gamma)
    return min(1.0, max(0.0, pi))


def toxicity_surface(params: ToxicityParams, grid: DoseGrid) -> np.ndarray:
    """I x J matrix of joint toxicity probabilities over the grid."""
    out = np.empty(grid.shape)
    for i, a in enumerate(grid.a):
        for j, b in enumerate(grid.b):
            out[i, j] = combo_toxicity(params, a, b)
    return out


def log_likelihood(params: ToxicityParams, grid: DoseGrid, counts: ToxicityCounts) -> float:
    """Binomial log likelihood of the DLT tallies under the surface model.

    Uses the convention 0 * log 0 = 0, so impossible observations (a DLT
    where pi = 0, or a non-DLT where pi = 1) give -inf.
    """
    if counts.shape != grid.shape:
        raise ValueError(
            f"counts shape {counts.shape} does not match grid shape {grid.shape}"
        )
    ll = 0.0
    for i, a in enumerate(grid.a):
        for j, b in enumerate(grid.b):
            n = int(counts.n[i, j])
            if n == 0:
                continue
            x = int(counts.x[i, j])
            pi = combo_toxicity(params, a, b)
            if x > 0:
                ll += x * (math.log(pi) if pi > 0.0 else -math.inf)
            if n - x > 0:
                ll += (n - x) * (math.log1p(-pi) if pi < 1.0 else -math.inf)
            if ll == -math.inf:
                return -math.inf
    return ll


def log_posterior(
    params: ToxicityParams,
    grid: DoseGrid,
    counts: ToxicityCounts,
    priors: tuple[GammaPrior, GammaPrior, GammaPrior],
) -> float:
    """Log posterior density of (alpha, beta, gamma), normalized priors included.

    The likelihood term is unnormalized (binomial coefficients dropped), a
    constant offset in the parameters.
    """
    lp = 0.0
    for prior, value in zip(priors, params.as_tuple()):
        lp += prior.log_density(value)
    if lp == -math.inf:
        return -math.inf
    return lp + log_likelihood(params, grid, counts)


def logistic_truth(coeffs: LogisticCoeffs) -> np.ndarray:
    """True probability matrix expit(b0 + b1 zA + b2 zB + b3 zA zB)."""
    za = np.asarray(coeffs.z_a)[:, None]
    zb = np.asarray(coeffs.z_b)[None, :]
    eta = coeffs.b0 + coeffs.b1 * za + coeffs.b2 * zb + coeffs.b3 * za * zb
    # expit via tanh identity, stable for large |eta|
    return 0.5 * (1.0 + np.tanh(0.5 * eta))
