"""Adaptive randomization probability rules.

Two schemes over the posterior response-rate draws:

* moving reference: arms are compared against the posterior mean rate of
  the arms still awaiting a probability; the weakest arm is assigned its
  share of the remaining mass and removed, and the comparison repeats on
  the shrinking set.  No arm plays a privileged role, and clearly inferior
  arms can receive probability arbitrarily close to zero.
* fixed reference: every arm is compared against one designated arm whose
  comparison score is pinned at 1/2, then scores are normalized.

Tail probabilities are empirical fractions of posterior draws, so the
spending arithmetic is carried out in exact rationals and only converted
to floats at the end; the assigned-plus-remaining mass is exactly one at
every step of the loop.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .efficacy import EffPosteriorChain

__all__ = ["RandProbs", "mar_probabilities", "far_probabilities", "draw_assignment"]


@dataclass(frozen=True)
class RandProbs:
    """Randomization probabilities over all arms (zeros for inactive arms).

    `order` records the sequence in which arms received their probability.
    """

    probs: tuple[float, ...]
    order: tuple[int, ...]

    def __post_init__(self):
        if any(p < 0.0 for p in self.probs):
            raise ValueError("randomization probabilities must be non-negative")
        if abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities must sum to 1, got {sum(self.probs)!r}")


def _tail_counts(p: np.ndarray, active: list[int]) -> dict[int, int]:
    """Per-arm comparison scores against the active-set mean rate.

    Scores are twice the count of draws strictly above the reference plus
    the count of exact ties (midrank convention): the posterior is
    continuous, so ties only arise when draws underflow to a common boundary
    value, and half-weighting them recovers the continuum behavior there.
    """
    sub = p[:, active]
    ref = sub.mean(axis=1)
    return {
        k: 2 * int((p[:, k] > ref).sum()) + int((p[:, k] == ref).sum())
        for k in active
    }


def mar_probabilities(chain: EffPosteriorChain, active) -> RandProbs:
    """Moving-reference probabilities over the active arms.

    Ties in the weakest comparison score break toward the lowest arm index,
    and a zero score sum distributes the remaining mass uniformly (all
    remaining arms sit indistinguishably below the reference).
    """
    active = sorted(active)
    if not active:
        raise ValueError("active arm set must be non-empty")
    if max(active) >= chain.n_arms:
        raise ValueError("active set references arms beyond the chain")
    p = chain.p
    n_draws = chain.n_draws
    probs = [Fraction(0)] * chain.n_arms
    order: list[int] = []
    remaining = Fraction(1)
    pool = list(active)
    while pool:
        counts = _tail_counts(p, pool)
        total = sum(counts.values())
        if total == 0:
            share = remaining / len(pool)
            for k in pool:
                probs[k] = share
                order.append(k)
            remaining = Fraction(0)
            break
        weakest = min(pool, key=lambda k: (counts[k], k))
        assigned = Fraction(counts[weakest], total) * remaining
        probs[weakest] = assigned
        remaining -= assigned
        order.append(weakest)
        pool.remove(weakest)
        assert sum(probs) + remaining == 1
    return RandProbs(probs=tuple(float(q) for q in probs), order=tuple(order))


def far_probabilities(chain: EffPosteriorChain, active, reference_arm: int) -> RandProbs:
    """Fixed-reference probabilities: scores pr(p_k > p_ref) with the
    reference pinned at 1/2, normalized over the active arms."""
    active = sorted(active)
    if not active:
        raise ValueError("active arm set must be non-empty")
    if reference_arm not in active:
        raise ValueError(f"reference arm {reference_arm} is not active")
    if max(active) >= chain.n_arms:
        raise ValueError("active set references arms beyond the chain")
    p = chain.p
    n_draws = chain.n_draws
    scores: dict[int, Fraction] = {}
    ref_col = p[:, reference_arm]
    for k in active:
        if k == reference_arm:
            scores[k] = Fraction(1, 2)
        else:
            wins = 2 * int((p[:, k] > ref_col).sum()) + int((p[:, k] == ref_col).sum())
            scores[k] = Fraction(wins, 2 * n_draws)
    total = sum(scores.values())
    probs = [Fraction(0)] * chain.n_arms
    for k in active:
        probs[k] = scores[k] / total
    return RandProbs(probs=tuple(float(q) for q in probs), order=tuple(active))


def draw_assignment(probs: RandProbs, rng: np.random.Generator) -> int:
    """Categorical draw of an arm index under `probs`."""
    u = rng.random()
    acc = 0.0
    last = 0
    for k, pk in enumerate(probs.probs):
        if pk <= 0.0:
            continue
        acc += pk
        last = k
        if u < acc:
            return k
    return last
