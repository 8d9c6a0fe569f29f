"""Compiled inner loops: PRNG, MCMC samplers, and batch surface evaluation.

The samplers carry their own splitmix64-based random stream so that a chain
is a pure function of (data, config, seed), bitwise reproducible and
independent of global RNG state.  Shapes passed to the gamma sampler may be
arbitrarily small (vague hyperpriors put most mass near zero), so beta
variates are formed from log-gamma draws rather than gamma draws.
"""

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0**-53

# log-parameter magnitude beyond which proposals are rejected outright;
# keeps exp() inside the double range while truncating negligible prior mass
_LOG_BOUND = 690.0


@njit(cache=True, inline="always")
def _next_u64(state):
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _unit(state):
    # uniform on (0, 1]; never 0 so log() is safe
    return (float(_next_u64(state) >> _S11) + 1.0) * _INV_2_53


@njit(cache=True, inline="always")
def _normal(state):
    u1 = _unit(state)
    u2 = _unit(state)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


@njit(cache=True)
def _log_gamma_core(state, a):
    # Marsaglia-Tsang squeeze for shape a >= 1, unit rate; returns log of draw
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = _normal(state)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = _unit(state)
        if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
            return math.log(d) + math.log(v)


@njit(cache=True)
def _log_gamma_draw(state, shape):
    if shape >= 1.0:
        return _log_gamma_core(state, shape)
    # boost: Ga(shape) = Ga(shape + 1) * U^(1/shape), exact in log space
    lg = _log_gamma_core(state, shape + 1.0)
    return lg + math.log(_unit(state)) / shape


@njit(cache=True)
def _beta_draw_full(state, a, b):
    """Beta(a, b) draw as (p, log p, log(1-p)), stable for microscopic shapes.

    The draw is formed from two log-gamma variates, so both log tails stay
    meaningful even when p itself underflows to 0 or rounds to 1; the log
    tails are floored at the double-precision limit.
    """
    la = _log_gamma_draw(state, a)
    lb = _log_gamma_draw(state, b)
    if la == -math.inf and lb == -math.inf:
        # both shapes microscopic: the draw degenerates to Bernoulli(a/(a+b))
        if _unit(state) < a / (a + b):
            return 1.0, 0.0, -745.0
        return 0.0, -745.0, 0.0
    d = la - lb
    if d >= 0.0:
        log1mp = -d - math.log1p(math.exp(-d))
        logp = log1mp + d
        p = 1.0 / (1.0 + math.exp(-d))
    else:
        logp = d - math.log1p(math.exp(d))
        log1mp = logp - d
        p = math.exp(d) / (1.0 + math.exp(d))
    if logp < -745.0:
        logp = -745.0
    if log1mp < -745.0:
        log1mp = -745.0
    return p, logp, log1mp


@njit(cache=True)
def _beta_draw(state, a, b):
    p, _, _ = _beta_draw_full(state, a, b)
    return p


@njit(cache=True, inline="always")
def _combo_tox(alpha, beta, gamma, a, b):
    # joint toxicity probability; mirrors dose_models.combo_toxicity
    pa = a**alpha
    pb = b**beta
    if pa >= 1.0 or pb >= 1.0:
        return 1.0
    ua = -gamma * math.log1p(-pa)
    ub = -gamma * math.log1p(-pb)
    if ua == math.inf or ub == math.inf:
        return 1.0
    m = ua if ua > ub else ub
    if m < 40.0:
        log_s = math.log1p(math.expm1(ua) + math.expm1(ub))
    else:
        log_s = m + math.log(math.exp(ua - m) + math.exp(ub - m) - math.exp(-m))
    pi = -math.expm1(-log_s / gamma)
    if pi < 0.0:
        return 0.0
    if pi > 1.0:
        return 1.0
    return pi


@njit(cache=True)
def _tox_log_post(lth, av, bv, nv, xv, pr_shape, pr_rate):
    # log posterior in log-parameter space (gamma priors + Jacobian), with
    # the surface clamped to [1e-12, 1 - 1e-12] inside the likelihood
    lp = 0.0
    for c in range(3):
        if abs(lth[c]) > _LOG_BOUND:
            return -math.inf
        lp += pr_shape[c] * lth[c] - pr_rate[c] * math.exp(lth[c])
    alpha = math.exp(lth[0])
    beta = math.exp(lth[1])
    gamma = math.exp(lth[2])
    for c in range(av.size):
        pi = _combo_tox(alpha, beta, gamma, av[c], bv[c])
        if pi < 1e-12:
            pi = 1e-12
        elif pi > 1.0 - 1e-12:
            pi = 1.0 - 1e-12
        if xv[c] > 0:
            lp += xv[c] * math.log(pi)
        if nv[c] - xv[c] > 0:
            lp += (nv[c] - xv[c]) * math.log1p(-pi)
    return lp


@njit(cache=True)
def tox_chain(av, bv, nv, xv, pr_shape, pr_rate, n_keep, n_burn, adapt, step0, seed):
    """Component-wise random-walk Metropolis on (log alpha, log beta, log gamma).

    Step sizes follow a Robbins-Monro recursion toward 0.44 acceptance during
    burn-in and are frozen afterwards.  Returns (draws, acceptance, steps)
    where acceptance is measured on the retained portion of the chain only.
    """
    state = np.empty(1, dtype=np.uint64)
    state[0] = seed
    lth = np.empty(3)
    for c in range(3):
        lth[c] = math.log(pr_shape[c] / pr_rate[c])
    steps = step0.copy()
    lp = _tox_log_post(lth, av, bv, nv, xv, pr_shape, pr_rate)
    draws = np.empty((n_keep, 3))
    acc = np.zeros(3)
    total = n_burn + n_keep
    for t in range(total):
        for c in range(3):
            old = lth[c]
            lth[c] = old + steps[c] * _normal(state)
            lp_new = _tox_log_post(lth, av, bv, nv, xv, pr_shape, pr_rate)
            delta = lp_new - lp
            ap = 1.0 if delta >= 0.0 else math.exp(delta)
            if _unit(state) <= ap:
                lp = lp_new
                if t >= n_burn:
                    acc[c] += 1.0
            else:
                lth[c] = old
            if adapt and t < n_burn:
                steps[c] *= math.exp((ap - 0.44) / math.sqrt(t + 1.0))
        if t >= n_burn:
            k = t - n_burn
            draws[k, 0] = math.exp(lth[0])
            draws[k, 1] = math.exp(lth[1])
            draws[k, 2] = math.exp(lth[2])
    return draws, acc / n_keep, steps


@njit(cache=True)
def surface_batch(draws, a_vec, b_vec):
    """Per-draw toxicity surfaces: (n_draws, I, J)."""
    nd = draws.shape[0]
    ni = a_vec.size
    nj = b_vec.size
    out = np.empty((nd, ni, nj))
    for d in range(nd):
        alpha = draws[d, 0]
        beta = draws[d, 1]
        gamma = draws[d, 2]
        for i in range(ni):
            for j in range(nj):
                out[d, i, j] = _combo_tox(alpha, beta, gamma, a_vec[i], b_vec[j])
    return out


@njit(cache=True)
def _hyper_log_cond(lz, lx, s1, s2, k_arms, pr_shape, pr_rate):
    # conditional log density of (log zeta, log xi) given the sampled arm
    # rates: product of Beta densities, gamma priors, and the Jacobian
    if abs(lz) > _LOG_BOUND or abs(lx) > _LOG_BOUND:
        return -math.inf
    zeta = math.exp(lz)
    xi = math.exp(lx)
    lp = k_arms * (math.lgamma(zeta + xi) - math.lgamma(zeta) - math.lgamma(xi))
    lp += (zeta - 1.0) * s1 + (xi - 1.0) * s2
    lp += pr_shape[0] * lz - pr_rate[0] * zeta
    lp += pr_shape[1] * lx - pr_rate[1] * xi
    return lp


@njit(cache=True)
def eff_chain(y, n, pr_shape, pr_rate, n_keep, n_burn, adapt, step0, seed, init_lz, init_lx):
    """Metropolis-within-Gibbs for the hierarchical response model.

    Each sweep draws p_k exactly from Beta(zeta + y_k, xi + n_k - y_k), then
    moves (log zeta, log xi) with a joint random-walk Metropolis step against
    the product of Beta densities and the gamma hyperpriors.  The step size
    follows a Robbins-Monro recursion toward 0.3 acceptance during burn-in
    and is frozen afterwards.  The Beta log tails entering the
    hyperparameter target are taken from the draw's log-gamma representation
    (floored only at the double-precision limit), so they stay informative
    even when a sampled rate underflows to the boundary.
    """
    k_arms = y.size
    state = np.empty(1, dtype=np.uint64)
    state[0] = seed
    lz = init_lz
    lx = init_lx
    step = step0
    p = np.empty(k_arms)
    draws = np.empty((n_keep, k_arms + 2))
    acc = 0.0
    total = n_burn + n_keep
    for t in range(total):
        zeta = math.exp(lz)
        xi = math.exp(lx)
        s1 = 0.0
        s2 = 0.0
        for k in range(k_arms):
            pk, logp, log1mp = _beta_draw_full(state, zeta + y[k], xi + (n[k] - y[k]))
            p[k] = pk
            s1 += logp
            s2 += log1mp
        lp = _hyper_log_cond(lz, lx, s1, s2, k_arms, pr_shape, pr_rate)
        pz = lz + step * _normal(state)
        px = lx + step * _normal(state)
        lp_new = _hyper_log_cond(pz, px, s1, s2, k_arms, pr_shape, pr_rate)
        delta = lp_new - lp
        ap = 1.0 if delta >= 0.0 else math.exp(delta)
        if _unit(state) <= ap:
            lz = pz
            lx = px
            if t >= n_burn:
                acc += 1.0
        if adapt and t < n_burn:
            step *= math.exp((ap - 0.3) / math.sqrt(t + 1.0))
            if step > 50.0:
                step = 50.0
            elif step < 1e-3:
                step = 1e-3
        if t >= n_burn:
            idx = t - n_burn
            for k in range(k_arms):
                draws[idx, k] = p[k]
            draws[idx, k_arms] = math.exp(lz)
            draws[idx, k_arms + 1] = math.exp(lx)
    return draws, acc / n_keep, step
