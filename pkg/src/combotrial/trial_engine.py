"""Two-phase dose-combination trial state machine.

Phase 1 walks the dose grid one cohort at a time, escalating while the
current combination is confidently safe and de-escalating when it is not;
at the phase 1 sample size every combination judged admissible is carried
into phase 2 as a parallel arm.  Phase 2 randomizes patients one at a time
under moving-reference probabilities, closing arms for excess toxicity or
futility, refreshing the probabilities after every `group_size` completed
response assessments (accrual waits for the open group when responses are
slow), and finally picks the open arm with the highest posterior mean
response rate.

All state changes flow through `apply_event`, so a trial is exactly the
fold of its event list; the simulator and the conduct service both drive
the same transitions and an event log replays to the identical state.
"""

import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dose_models import DoseGrid, GammaPrior, ToxicityCounts
from .efficacy import (
    DEFAULT_HYPER_PRIORS,
    ArmData,
    posterior_mean,
    prob_exceeds,
    sample_efficacy_posterior,
)
from .posterior import McmcConfig, ToxPosteriorChain, sample_toxicity_posterior
from .randomization import RandProbs, draw_assignment, mar_probabilities
from .seeds import mix64

__all__ = [
    "DesignConfig",
    "Scenario",
    "TrialState",
    "TrialResult",
    "PatientRecord",
    "candidate_escalation_set",
    "candidate_deescalation_set",
    "phase1_decision",
    "select_admissible",
    "phase2_update",
    "final_selection",
    "sample_outcome_times",
    "run_trial",
    "new_state",
    "apply_event",
]

HAZARD_PATTERNS = ("increasing", "constant", "decreasing", "hump")

# share of responders whose (untruncated) response time falls inside the
# assessment window; fixes the time-scale of each hazard pattern
RESPONSE_MASS_IN_WINDOW = 0.8


@dataclass(frozen=True)
class DesignConfig:
    """Design constants for one trial: cutoffs, sample sizes, priors, chains."""

    phi_t: float = 0.33
    phi_e: float = 0.20
    n1: int = 20
    n2: int = 60
    cohort_size: int = 1
    c_e: float = 0.80
    c_d: float = 0.45
    c_a: float = 0.45
    c_f: float = 0.10
    group_size: int = 1
    assess_window: float = 3.0
    accrual_rate: float = 2.0
    # skeleton-anchored mean-one priors for the surface exponents; the
    # association parameter keeps a heavy-tailed mean-one prior
    tox_priors: tuple[GammaPrior, GammaPrior, GammaPrior] = (
        GammaPrior(4.0, 4.0),
        GammaPrior(4.0, 4.0),
        GammaPrior(0.1, 0.1),
    )
    # tempering weight for the monitoring posterior's likelihood: dose moves,
    # admissibility, and closures respond to tallies at this strength
    tox_data_weight: float = 1.0
    hyper_priors: tuple[GammaPrior, GammaPrior] = DEFAULT_HYPER_PRIORS
    tox_mcmc: McmcConfig = field(default_factory=McmcConfig)
    # response-model chains skip step adaptation: the vague hyperpriors make
    # the 100-iteration burn-in a deliberate part of the update protocol
    eff_mcmc: McmcConfig = field(
        default_factory=lambda: McmcConfig(adapt=False, initial_step=1.0)
    )

    def __post_init__(self):
        for name in ("phi_t", "phi_e", "c_e", "c_d", "c_a", "c_f"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.c_d >= self.c_e:
            raise ValueError(
                f"c_d must be below c_e (got c_d={self.c_d}, c_e={self.c_e})"
            )
        for name in ("n1", "n2", "cohort_size", "group_size"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if self.group_size > self.n2:
            raise ValueError(
                f"group_size must not exceed n2 (got {self.group_size} > {self.n2})"
            )
        if not (self.assess_window > 0.0 and math.isfinite(self.assess_window)):
            raise ValueError(f"assess_window must be positive, got {self.assess_window}")
        if not (self.accrual_rate > 0.0 and math.isfinite(self.accrual_rate)):
            raise ValueError(f"accrual_rate must be positive, got {self.accrual_rate}")
        if not (0.0 < self.tox_data_weight <= 1.0):
            raise ValueError(
                f"tox_data_weight must lie in (0, 1], got {self.tox_data_weight}"
            )
        for cfg_name in ("tox_mcmc", "eff_mcmc"):
            if getattr(self, cfg_name).n_keep < 100:
                raise ValueError(f"{cfg_name}.n_keep must be >= 100 for trial decisions")


@dataclass(frozen=True)
class Scenario:
    """Ground truth for simulation: toxicity/efficacy matrices and timing."""

    grid: DoseGrid
    tox: np.ndarray  # (I, J) true DLT probabilities
    eff: np.ndarray  # (I, J) true response probabilities
    hazard: str = "constant"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tox", np.asarray(self.tox, dtype=float))
        object.__setattr__(self, "eff", np.asarray(self.eff, dtype=float))
        shape = self.grid.shape
        for label, m in (("tox", self.tox), ("eff", self.eff)):
            if m.shape != shape:
                raise ValueError(
                    f"{label} matrix shape {m.shape} does not match grid {shape}"
                )
            if not ((m >= 0.0) & (m <= 1.0)).all():
                raise ValueError(f"{label} matrix entries must lie in [0, 1]")
        if self.hazard not in HAZARD_PATTERNS:
            raise ValueError(
                f"hazard must be one of {HAZARD_PATTERNS}, got {self.hazard!r}"
            )


@dataclass
class PatientRecord:
    pid: int
    phase: int
    i: int
    j: int
    t_enroll: float
    arm: int | None = None
    tox: bool | None = None
    eff: bool | None = None
    eff_due: float | None = None  # simulation only: adjudication time


@dataclass
class TrialResult:
    selected: tuple[int, int] | None
    reason: str
    patients: np.ndarray  # (I, J) enrollment counts
    admissible: list[tuple[int, int]] | None
    n_enrolled: int
    duration: float
    seed: int


@dataclass
class TrialState:
    config: DesignConfig
    grid: DoseGrid
    seed: int
    phase: int = 1  # 1, 2, or 3 once finished
    current: tuple[int, int] = (0, 0)
    patients: list[PatientRecord] = field(default_factory=list)
    counts_n: np.ndarray | None = None  # recorded toxicity outcomes
    counts_x: np.ndarray | None = None
    enrolled_grid: np.ndarray | None = None
    arms: list[tuple[int, int]] | None = None
    closures: dict[int, str] = field(default_factory=dict)
    probs: RandProbs | None = None
    probs_history: list[tuple[float, tuple[float, ...]]] = field(default_factory=list)
    group_enrolled: int = 0
    cohort_enrolled: int = 0
    cohort_pending: list[int] = field(default_factory=list)
    n_updates: int = 0
    clock: float = 0.0
    selected: tuple[int, int] | None = None
    stop_reason: str | None = None
    n_events: int = 0

    @property
    def finished(self) -> bool:
        return self.phase == 3

    @property
    def enrolled(self) -> int:
        return len(self.patients)

    @property
    def enrolled_phase1(self) -> int:
        return sum(1 for p in self.patients if p.phase == 1)

    @property
    def enrolled_phase2(self) -> int:
        return sum(1 for p in self.patients if p.phase == 2)

    @property
    def open_arms(self) -> list[int]:
        if self.arms is None:
            return []
        return [k for k in range(len(self.arms)) if k not in self.closures]

    def toxicity_counts(self) -> ToxicityCounts:
        return ToxicityCounts(self.counts_n.copy(), self.counts_x.copy())

    def arm_data(self) -> ArmData:
        """Adjudicated response tallies per arm, phase 1 contributions included."""
        combo_to_arm = {c: k for k, c in enumerate(self.arms)}
        n = [0] * len(self.arms)
        y = [0] * len(self.arms)
        for p in self.patients:
            k = combo_to_arm.get((p.i, p.j))
            if k is None or p.eff is None:
                continue
            n[k] += 1
            y[k] += int(p.eff)
        return ArmData(tuple(n), tuple(y), combos=tuple(self.arms))


def new_state(config: DesignConfig, grid: DoseGrid, seed: int) -> TrialState:
    shape = grid.shape
    return TrialState(
        config=config,
        grid=grid,
        seed=seed,
        counts_n=np.zeros(shape, dtype=np.int64),
        counts_x=np.zeros(shape, dtype=np.int64),
        enrolled_grid=np.zeros(shape, dtype=np.int64),
    )


def apply_event(state: TrialState, evt: dict) -> TrialState:
    """Fold one event into the state; the only mutation path for trials."""
    kind = evt["event"]
    state.n_events += 1
    if kind == "enrolled":
        pid = evt["pid"]
        if pid != len(state.patients) + 1:
            raise ValueError(f"enrollment out of order: expected pid {len(state.patients) + 1}")
        if state.enrolled >= state.config.n1 + state.config.n2:
            raise ValueError("enrollment beyond total sample size")
        rec = PatientRecord(
            pid=pid,
            phase=evt["phase"],
            i=evt["i"],
            j=evt["j"],
            t_enroll=evt["t"],
            arm=evt.get("arm"),
            eff_due=evt.get("eff_due"),
        )
        state.patients.append(rec)
        state.enrolled_grid[rec.i, rec.j] += 1
        if rec.phase == 2:
            state.group_enrolled += 1
        else:
            state.cohort_enrolled += 1
            state.cohort_pending.append(pid)
        state.clock = max(state.clock, evt["t"])
    elif kind == "toxicity":
        rec = state.patients[evt["pid"] - 1]
        if rec.tox is not None:
            raise ValueError(f"duplicate toxicity outcome for patient {rec.pid}")
        rec.tox = bool(evt["dlt"])
        state.counts_n[rec.i, rec.j] += 1
        if rec.tox:
            state.counts_x[rec.i, rec.j] += 1
        if rec.phase == 1 and rec.pid in state.cohort_pending:
            state.cohort_pending.remove(rec.pid)
    elif kind == "efficacy":
        rec = state.patients[evt["pid"] - 1]
        if rec.eff is not None:
            raise ValueError(f"duplicate efficacy outcome for patient {rec.pid}")
        rec.eff = bool(evt["response"])
        state.clock = max(state.clock, evt.get("t", state.clock))
    elif kind == "decision":
        if evt["kind"] in ("escalate", "deescalate", "stay"):
            state.current = (evt["i"], evt["j"])
        state.cohort_enrolled = 0
    elif kind == "phase2_started":
        state.phase = 2
        state.cohort_enrolled = 0
        state.arms = [tuple(c) for c in evt["arms"]]
    elif kind == "arm_closed":
        k = evt["arm"]
        if k in state.closures:
            raise ValueError(f"arm {k} closed twice")
        state.closures[k] = evt["reason"]
    elif kind == "probs":
        state.probs = RandProbs(probs=tuple(evt["probs"]), order=tuple(evt["order"]))
        state.probs_history.append((evt.get("t", state.clock), tuple(evt["probs"])))
        state.group_enrolled = 0
        state.n_updates += 1
    elif kind == "finalized":
        state.phase = 3
        state.selected = tuple(evt["selected"]) if evt["selected"] is not None else None
        state.stop_reason = evt["reason"]
        state.clock = max(state.clock, evt.get("t", state.clock))
    elif kind == "created":
        raise ValueError("created event applies only to a fresh state")
    else:
        raise ValueError(f"unknown event type {kind!r}")
    return state


def candidate_escalation_set(i: int, j: int, ni: int, nj: int) -> set[tuple[int, int]]:
    """Admissible escalation moves from (i, j), intersected with the grid."""
    raw = [(i + 1, j), (i + 1, j - 1), (i - 1, j + 1), (i, j + 1)]
    return {(a, b) for a, b in raw if 0 <= a < ni and 0 <= b < nj}


def candidate_deescalation_set(i: int, j: int, ni: int, nj: int) -> set[tuple[int, int]]:
    """Admissible de-escalation moves from (i, j), intersected with the grid."""
    raw = [(i - 1, j), (i - 1, j + 1), (i + 1, j - 1), (i, j - 1)]
    return {(a, b) for a, b in raw if 0 <= a < ni and 0 <= b < nj}


def phase1_decision(
    state: TrialState, chain: ToxPosteriorChain
) -> tuple[str, tuple[int, int]]:
    """Escalation rule at the current combination.

    Returns (kind, target) with kind one of escalate/deescalate/stay/terminate.
    Escalation targets the candidate whose posterior mean toxicity exceeds
    the current one and lies closest to the target phi_t (staying put when no
    candidate qualifies); de-escalation mirrors this among lower-toxicity
    candidates but, being a safety action, falls back to the lowest-mean
    candidate when none is lower.
    """
    cfg = state.config
    i, j = state.current
    ni, nj = state.grid.shape
    mean = chain.mean_surface
    below = chain.prob_below(i, j, cfg.phi_t)
    if below > cfg.c_e:
        cands = candidate_escalation_set(i, j, ni, nj)
        higher = [c for c in cands if mean[c] > mean[i, j]]
        if not higher:
            return "stay", (i, j)
        target = min(higher, key=lambda c: (abs(mean[c] - cfg.phi_t), c))
        return "escalate", target
    if below < cfg.c_d:
        cands = candidate_deescalation_set(i, j, ni, nj)
        if not cands:
            return "terminate", (i, j)
        lower = [c for c in cands if mean[c] < mean[i, j]]
        if lower:
            target = min(lower, key=lambda c: (abs(mean[c] - cfg.phi_t), c))
        else:
            target = min(cands, key=lambda c: (mean[c], c))
        return "deescalate", target
    return "stay", (i, j)


def select_admissible(state: TrialState, chain: ToxPosteriorChain) -> list[tuple[int, int]]:
    """Combinations safe enough to carry into phase 2, in row-major order."""
    cfg = state.config
    below = chain.prob_below_surface(cfg.phi_t)
    ni, nj = state.grid.shape
    return [(i, j) for i in range(ni) for j in range(nj) if below[i, j] > cfg.c_a]


def phase2_update(state: TrialState, tox_chain, eff_chain):
    """Closure checks plus fresh randomization probabilities.

    Returns (closures, probs) where closures is a list of (arm, reason) for
    arms to close now and probs is the RandProbs over the survivors, or None
    if no arm survives.
    """
    cfg = state.config
    closures = []
    still_open = []
    for k in state.open_arms:
        i, j = state.arms[k]
        if tox_chain.prob_below(i, j, cfg.phi_t) < cfg.c_a:
            closures.append((k, "toxicity"))
        elif prob_exceeds(eff_chain, k, cfg.phi_e) < cfg.c_f:
            closures.append((k, "futility"))
        else:
            still_open.append(k)
    if not still_open:
        return closures, None
    return closures, mar_probabilities(eff_chain, still_open)


def final_selection(state: TrialState, eff_chain) -> tuple[int, int] | None:
    """Open arm with the highest posterior mean response rate, if any."""
    open_arms = state.open_arms
    if not open_arms:
        return None
    best = max(open_arms, key=lambda k: (posterior_mean(eff_chain, k), -k))
    return state.arms[best]


def _hazard_params(pattern: str, window: float) -> tuple[str, float, float]:
    """(family, shape, scale) with the scale set so RESPONSE_MASS_IN_WINDOW
    of the untruncated distribution falls inside the window."""
    mass = RESPONSE_MASS_IN_WINDOW
    if pattern == "increasing":
        shape = 2.0
    elif pattern == "constant":
        shape = 1.0
    elif pattern == "decreasing":
        shape = 0.5
    elif pattern == "hump":
        shape = 2.0
        scale = window / (mass / (1.0 - mass)) ** (1.0 / shape)
        return "loglogistic", shape, scale
    else:
        raise ValueError(f"unknown hazard pattern {pattern!r}")
    scale = window / (-math.log(1.0 - mass)) ** (1.0 / shape)
    return "weibull", shape, scale


def sample_outcome_times(
    responder: bool, pattern: str, assess_window: float, rng: np.random.Generator
) -> float:
    """Months from enrollment until the response outcome is adjudicated.

    Non-responders are adjudicated exactly at the end of the assessment
    window; responders draw from the pattern's distribution conditioned on
    responding inside the window.
    """
    if not responder:
        return assess_window
    family, shape, scale = _hazard_params(pattern, assess_window)
    u = rng.random() * RESPONSE_MASS_IN_WINDOW
    if family == "weibull":
        return scale * (-math.log1p(-u)) ** (1.0 / shape)
    return scale * (u / (1.0 - u)) ** (1.0 / shape)


class _EventLog:
    """Collects events, optionally forwarding each to a sink callable."""

    def __init__(self, sink=None):
        self.events: list[dict] = []
        self.sink = sink

    def emit(self, state: TrialState, evt: dict) -> None:
        self.events.append(evt)
        apply_event(state, evt)
        if self.sink is not None:
            self.sink(evt)


def _decision_seed(state: TrialState, stream: int) -> int:
    return mix64(mix64(state.seed, 4096 + state.n_events), stream)


def refit_toxicity(state: TrialState) -> ToxPosteriorChain:
    return sample_toxicity_posterior(
        state.toxicity_counts(),
        state.grid,
        state.config.tox_priors,
        state.config.tox_mcmc,
        _decision_seed(state, 1),
    )


def refit_efficacy(state: TrialState):
    return sample_efficacy_posterior(
        state.arm_data(),
        state.config.eff_mcmc,
        _decision_seed(state, 2),
        hyper_priors=state.config.hyper_priors,
    )


def run_trial(
    scenario: Scenario,
    config: DesignConfig,
    seed: int,
    sink=None,
) -> TrialResult:
    """Simulate one complete trial; deterministic for a fixed seed.

    Accrual follows a Poisson process; patients arriving while the design
    waits on a response group queue and enroll when the update fires.  The
    event stream is forwarded to `sink` when given.
    """
    cfg = config
    state = new_state(cfg, scenario.grid, seed)
    log = _EventLog(sink)
    if sink is not None:
        sink(created_event(cfg, scenario.grid, seed))
    rng = np.random.default_rng(np.uint64(mix64(seed, 0)))
    arrival = 0.0
    pending: list[tuple[float, int, bool]] = []  # (due, pid, response)

    def enroll(phase: int, combo: tuple[int, int], arm: int | None) -> float:
        nonlocal arrival
        arrival += rng.exponential(1.0 / cfg.accrual_rate)
        t = max(arrival, state.clock)
        pid = state.enrolled + 1
        i, j = combo
        dlt = rng.random() < scenario.tox[i, j]
        resp = rng.random() < scenario.eff[i, j]
        delay = sample_outcome_times(resp, scenario.hazard, cfg.assess_window, rng)
        due = t + delay
        log.emit(
            state,
            {
                "event": "enrolled",
                "pid": pid,
                "t": t,
                "phase": phase,
                "i": i,
                "j": j,
                "arm": arm,
                "eff_due": due,
            },
        )
        log.emit(state, {"event": "toxicity", "pid": pid, "dlt": bool(dlt)})
        heapq.heappush(pending, (due, pid, bool(resp)))
        return due

    def adjudicate_through(t: float) -> None:
        while pending and pending[0][0] <= t:
            due, pid, resp = heapq.heappop(pending)
            log.emit(
                state, {"event": "efficacy", "pid": pid, "response": resp, "t": due}
            )

    def finalize(selected, reason: str) -> None:
        log.emit(
            state,
            {
                "event": "finalized",
                "selected": list(selected) if selected is not None else None,
                "reason": reason,
                "t": state.clock,
            },
        )

    # phase 1
    while state.enrolled_phase1 < cfg.n1:
        take = min(cfg.cohort_size, cfg.n1 - state.enrolled_phase1)
        for _ in range(take):
            enroll(1, state.current, None)
        adjudicate_through(state.clock)
        chain = refit_toxicity(state)
        if state.enrolled_phase1 >= cfg.n1:
            admissible = select_admissible(state, chain)
            if not admissible:
                finalize(None, "no_admissible")
                break
            log.emit(
                state,
                {"event": "phase2_started", "arms": [list(c) for c in admissible]},
            )
            eff_chain = refit_efficacy(state)
            probs = mar_probabilities(eff_chain, state.open_arms)
            log.emit(
                state,
                {
                    "event": "probs",
                    "probs": list(probs.probs),
                    "order": list(probs.order),
                    "t": state.clock,
                },
            )
            break
        kind, target = phase1_decision(state, chain)
        log.emit(
            state,
            {
                "event": "decision",
                "kind": kind,
                "i": target[0],
                "j": target[1],
                "prob_below": chain.prob_below(*state.current, cfg.phi_t),
            },
        )
        if kind == "terminate":
            finalize(None, "early_toxicity")
            break

    # phase 2
    while not state.finished and state.enrolled_phase2 < cfg.n2:
        take = min(cfg.group_size, cfg.n2 - state.enrolled_phase2)
        group_due = 0.0
        for _ in range(take):
            arm = draw_assignment(state.probs, rng)
            due = enroll(2, state.arms[arm], arm)
            group_due = max(group_due, due)
        state.clock = max(state.clock, group_due)
        adjudicate_through(state.clock)
        if state.enrolled_phase2 >= cfg.n2:
            break
        tox_chain = refit_toxicity(state)
        eff_chain = refit_efficacy(state)
        closures, probs = phase2_update(state, tox_chain, eff_chain)
        for k, reason in closures:
            log.emit(state, {"event": "arm_closed", "arm": k, "reason": reason})
        if probs is None:
            finalize(None, "all_arms_closed")
            break
        log.emit(
            state,
            {
                "event": "probs",
                "probs": list(probs.probs),
                "order": list(probs.order),
                "t": state.clock,
            },
        )

    if not state.finished:
        # final analysis once every outcome is adjudicated
        if pending:
            state.clock = max(state.clock, max(d for d, _, _ in pending))
            adjudicate_through(state.clock)
        tox_chain = refit_toxicity(state)
        eff_chain = refit_efficacy(state)
        closures, _ = phase2_update(state, tox_chain, eff_chain)
        for k, reason in closures:
            log.emit(state, {"event": "arm_closed", "arm": k, "reason": reason})
        selected = final_selection(state, eff_chain)
        if selected is None:
            finalize(None, "all_arms_closed")
        else:
            finalize(selected, "completed")

    return result_from_state(state)


def created_event(config: DesignConfig, grid: DoseGrid, seed: int, trial_id=None) -> dict:
    from .events import config_to_dict  # deferred: events depends on this module

    return {
        "event": "created",
        "schema": 1,
        "trial_id": trial_id,
        "seed": seed,
        "grid": {"a": list(grid.a), "b": list(grid.b)},
        "config": config_to_dict(config),
    }


def result_from_state(state: TrialState) -> TrialResult:
    first = state.patients[0].t_enroll if state.patients else 0.0
    last = first
    for p in state.patients:
        last = max(last, p.t_enroll, p.eff_due or 0.0)
    admissible = list(state.arms) if state.arms is not None else None
    return TrialResult(
        selected=state.selected,
        reason=state.stop_reason or "incomplete",
        patients=state.enrolled_grid.copy(),
        admissible=admissible,
        n_enrolled=state.enrolled,
        duration=max(0.0, last - first),
        seed=state.seed,
    )
