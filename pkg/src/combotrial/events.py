"""Event-log persistence and replay.

A trial log is line-delimited JSON: a `created` header carrying the schema
version, grid, seed, and design constants, followed by one event per line
in the order they were applied.  Replaying a log folds the events through
the same `apply_event` transition the live engine uses, then verifies the
structural invariants, so any state the engine can reach is reconstructable
from its log alone (and tampering is detectable).
"""

import json
from dataclasses import dataclass

from .dose_models import DoseGrid, GammaPrior
from .posterior import McmcConfig
from .trial_engine import DesignConfig, TrialState, apply_event, new_state

__all__ = [
    "config_to_dict",
    "config_from_dict",
    "serialize_event",
    "parse_line",
    "fold_events",
    "replay_lines",
    "verify_invariants",
    "ReplayError",
]


class ReplayError(ValueError):
    """Raised when an event log cannot be replayed; carries the line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _prior_to_list(p: GammaPrior) -> list[float]:
    return [p.shape, p.rate]


def config_to_dict(config: DesignConfig) -> dict:
    return {
        "phi_t": config.phi_t,
        "phi_e": config.phi_e,
        "n1": config.n1,
        "n2": config.n2,
        "cohort_size": config.cohort_size,
        "c_e": config.c_e,
        "c_d": config.c_d,
        "c_a": config.c_a,
        "c_f": config.c_f,
        "group_size": config.group_size,
        "assess_window": config.assess_window,
        "accrual_rate": config.accrual_rate,
        "tox_priors": [_prior_to_list(p) for p in config.tox_priors],
        "hyper_priors": [_prior_to_list(p) for p in config.hyper_priors],
        "tox_mcmc": _mcmc_to_dict(config.tox_mcmc),
        "eff_mcmc": _mcmc_to_dict(config.eff_mcmc),
    }


def _mcmc_to_dict(m: McmcConfig) -> dict:
    step = m.initial_step
    if isinstance(step, tuple):
        step = list(step)
    return {"n_keep": m.n_keep, "n_burn": m.n_burn, "adapt": m.adapt, "initial_step": step}


def _mcmc_from_dict(d: dict, where: str) -> McmcConfig:
    try:
        step = d.get("initial_step")
        if isinstance(step, list):
            step = tuple(step)
        return McmcConfig(
            n_keep=d.get("n_keep", 2000),
            n_burn=d.get("n_burn", 100),
            adapt=d.get("adapt", True),
            initial_step=step,
        )
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> DesignConfig:
    kwargs = {}
    for name in (
        "phi_t",
        "phi_e",
        "n1",
        "n2",
        "cohort_size",
        "c_e",
        "c_d",
        "c_a",
        "c_f",
        "group_size",
        "assess_window",
        "accrual_rate",
    ):
        if name in d:
            kwargs[name] = d[name]
    if "tox_priors" in d:
        kwargs["tox_priors"] = tuple(GammaPrior(*p) for p in d["tox_priors"])
    if "hyper_priors" in d:
        kwargs["hyper_priors"] = tuple(GammaPrior(*p) for p in d["hyper_priors"])
    if "tox_mcmc" in d:
        kwargs["tox_mcmc"] = _mcmc_from_dict(d["tox_mcmc"], "tox_mcmc")
    if "eff_mcmc" in d:
        kwargs["eff_mcmc"] = _mcmc_from_dict(d["eff_mcmc"], "eff_mcmc")
    return DesignConfig(**kwargs)


def serialize_event(evt: dict) -> str:
    return json.dumps(evt, separators=(",", ":"), sort_keys=True)


def parse_line(line: str, line_no: int) -> dict:
    try:
        evt = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ReplayError(line_no, f"malformed JSON ({exc.msg})") from exc
    if not isinstance(evt, dict) or "event" not in evt:
        raise ReplayError(line_no, "record is not an event object")
    return evt


def fold_events(header: dict, events: list[dict]) -> TrialState:
    """Rebuild a TrialState from a created header plus its event list."""
    grid = DoseGrid(tuple(header["grid"]["a"]), tuple(header["grid"]["b"]))
    config = config_from_dict(header["config"])
    state = new_state(config, grid, int(header["seed"]))
    for evt in events:
        apply_event(state, evt)
    return state


def replay_lines(lines) -> TrialState:
    """Replay serialized log lines into a verified TrialState.

    Raises ReplayError with the offending line number on malformed records,
    impossible transitions, or invariant violations.  A truncated log (fewer
    events than a finished trial) is fine: the partial state is returned.
    """
    header = None
    state = None
    line_no = 0
    for raw in lines:
        line_no += 1
        line = raw.strip()
        if not line:
            continue
        evt = parse_line(line, line_no)
        if header is None:
            if evt["event"] != "created":
                raise ReplayError(line_no, "log must start with a created event")
            if evt.get("schema") != 1:
                raise ReplayError(line_no, f"unsupported schema {evt.get('schema')!r}")
            header = evt
            try:
                grid = DoseGrid(tuple(evt["grid"]["a"]), tuple(evt["grid"]["b"]))
                config = config_from_dict(evt["config"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ReplayError(line_no, f"invalid created event: {exc}") from exc
            state = new_state(config, grid, int(evt["seed"]))
            continue
        try:
            apply_event(state, evt)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ReplayError(line_no, f"cannot apply {evt.get('event')!r}: {exc}") from exc
    if state is None:
        raise ReplayError(max(line_no, 1), "empty log")
    try:
        verify_invariants(state)
    except ValueError as exc:
        raise ReplayError(line_no, f"invariant violation: {exc}") from exc
    return state


def verify_invariants(state: TrialState) -> None:
    """Structural invariants every reachable state satisfies."""
    cfg = state.config
    if state.enrolled > cfg.n1 + cfg.n2:
        raise ValueError("total enrollment exceeds n1 + n2")
    if state.enrolled_phase1 > cfg.n1:
        raise ValueError("phase 1 enrollment exceeds n1")
    if (state.counts_x > state.counts_n).any():
        raise ValueError("toxicity counts exceed patient counts")
    if int(state.counts_n.sum()) > state.enrolled:
        raise ValueError("recorded outcomes exceed enrollment")
    t_prev = 0.0
    for p in state.patients:
        if p.t_enroll < t_prev - 1e-9:
            raise ValueError("enrollment times are not nondecreasing")
        t_prev = p.t_enroll
    if state.clock + 1e-9 < t_prev:
        raise ValueError("clock behind the last enrollment")
    if state.arms is not None:
        for k in state.closures:
            if k < 0 or k >= len(state.arms):
                raise ValueError(f"closure references unknown arm {k}")
        for p in state.patients:
            if p.phase == 2 and (p.i, p.j) not in state.arms:
                raise ValueError("phase 2 patient treated outside the arm set")
    elif state.closures:
        raise ValueError("closures recorded before phase 2 started")
    if state.selected is not None:
        if state.arms is None or state.selected not in state.arms:
            raise ValueError("selected combination is not an arm")
        k = state.arms.index(state.selected)
        if k in state.closures:
            raise ValueError("selected combination was closed")
