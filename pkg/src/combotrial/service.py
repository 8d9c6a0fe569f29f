"""HTTP service for conducting a single live trial patient by patient.

Every state change appends to an append-only JSONL log on disk (flushed and
fsynced per event), and in-memory state is always the fold of that log, so
a restarted service resumes exactly where it stopped.  Design decisions
(dose moves, admissibility, closures, randomization updates) are computed
when their triggering outcome arrives and are recorded as events; chain
seeds derive from the trial seed and the event count, so a decision lost to
a crash between appends is recomputed identically on reload.

Writes are serialized per trial; reads return snapshots and never append.
"""

import json
import os
import threading
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException

from .dose_models import DoseGrid
from .efficacy import posterior_mean, prob_exceeds
from .events import config_from_dict, config_to_dict, replay_lines, serialize_event
from .randomization import RandProbs, mar_probabilities
from .seeds import mix64
from .trial_engine import (
    DesignConfig,
    TrialState,
    apply_event,
    final_selection,
    new_state,
    phase1_decision,
    phase2_update,
    refit_efficacy,
    refit_toxicity,
    select_admissible,
)

__all__ = ["create_app", "TrialStore"]

DEFAULT_GRID = {"a": [0.05, 0.1, 0.2], "b": [0.1, 0.2]}


class TrialStore:
    """One trial's event log plus its folded state."""

    def __init__(self, path: Path, header: dict, state: TrialState):
        self.path = path
        self.header = header
        self.state = state
        self.lock = threading.Lock()

    @classmethod
    def create(cls, path: Path, trial_id: str, config: DesignConfig, grid: DoseGrid, seed: int):
        header = {
            "event": "created",
            "schema": 1,
            "trial_id": trial_id,
            "seed": seed,
            "grid": {"a": list(grid.a), "b": list(grid.b)},
            "config": config_to_dict(config),
        }
        state = new_state(config, grid, seed)
        store = cls(path, header, state)
        with open(path, "x", encoding="utf-8") as fh:
            fh.write(serialize_event(header) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return store

    @classmethod
    def load(cls, path: Path):
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
        state = replay_lines(lines)
        header = json.loads(lines[0])
        return cls(path, header, state)

    @property
    def trial_id(self) -> str:
        return self.header["trial_id"]

    def append(self, evt: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(serialize_event(evt) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        apply_event(self.state, evt)

    # decision engine -----------------------------------------------------

    def settle(self) -> None:
        """Compute and append any decision the recorded outcomes imply."""
        while not self.state.finished:
            action = self._pending_action()
            if action is None:
                return
            action()

    def _pending_action(self):
        s = self.state
        cfg = s.config
        if s.phase == 1:
            cohort_done = s.cohort_enrolled >= cfg.cohort_size or s.enrolled_phase1 >= cfg.n1
            if cohort_done and s.cohort_enrolled > 0 and not s.cohort_pending:
                if s.enrolled_phase1 >= cfg.n1:
                    return self._advance_to_phase2
                return self._phase1_decision
            return None
        if s.phase == 2:
            gsize = min(cfg.group_size, cfg.n2 - (s.enrolled_phase2 - s.group_enrolled))
            group_done = s.group_enrolled >= gsize and s.group_enrolled > 0
            if group_done and not self._awaiting_group_outcomes():
                if s.enrolled_phase2 >= cfg.n2:
                    return self._final_analysis
                return self._group_update
        return None

    def _awaiting_group_outcomes(self) -> bool:
        return any(p.phase == 2 and p.eff is None for p in self.state.patients)

    def _phase1_decision(self) -> None:
        s = self.state
        chain = refit_toxicity(s)
        kind, target = phase1_decision(s, chain)
        self.append(
            {
                "event": "decision",
                "kind": kind,
                "i": target[0],
                "j": target[1],
                "prob_below": chain.prob_below(*s.current, s.config.phi_t),
            }
        )
        if kind == "terminate":
            self._finalize(None, "early_toxicity")

    def _advance_to_phase2(self) -> None:
        s = self.state
        chain = refit_toxicity(s)
        admissible = select_admissible(s, chain)
        if not admissible:
            self._finalize(None, "no_admissible")
            return
        self.append({"event": "phase2_started", "arms": [list(c) for c in admissible]})
        eff_chain = refit_efficacy(s)
        probs = mar_probabilities(eff_chain, s.open_arms)
        self._append_probs(probs)

    def _group_update(self) -> None:
        s = self.state
        tox_chain = refit_toxicity(s)
        eff_chain = refit_efficacy(s)
        closures, probs = phase2_update(s, tox_chain, eff_chain)
        for k, reason in closures:
            self.append({"event": "arm_closed", "arm": k, "reason": reason})
        if probs is None:
            self._finalize(None, "all_arms_closed")
            return
        self._append_probs(probs)

    def _final_analysis(self) -> None:
        s = self.state
        tox_chain = refit_toxicity(s)
        eff_chain = refit_efficacy(s)
        closures, _ = phase2_update(s, tox_chain, eff_chain)
        for k, reason in closures:
            self.append({"event": "arm_closed", "arm": k, "reason": reason})
        selected = final_selection(s, eff_chain)
        if selected is None:
            self._finalize(None, "all_arms_closed")
        else:
            self._finalize(selected, "completed")

    def _append_probs(self, probs: RandProbs) -> None:
        self.append(
            {
                "event": "probs",
                "probs": list(probs.probs),
                "order": list(probs.order),
                "t": self.state.clock,
            }
        )

    def _finalize(self, selected, reason: str) -> None:
        self.append(
            {
                "event": "finalized",
                "selected": list(selected) if selected is not None else None,
                "reason": reason,
                "t": self.state.clock,
            }
        )

    # conduct operations ---------------------------------------------------

    def enroll(self) -> dict:
        s = self.state
        cfg = s.config
        if s.finished:
            raise Conflict("trial is finished")
        if s.enrolled >= cfg.n1 + cfg.n2:
            raise Conflict("trial is at full capacity")
        if s.phase == 1:
            if s.cohort_enrolled >= cfg.cohort_size:
                raise Conflict(
                    "accrual suspended: awaiting toxicity outcomes for "
                    f"patients {sorted(s.cohort_pending)}"
                )
            combo = s.current
            arm = None
            phase = 1
        else:
            gsize = min(cfg.group_size, cfg.n2 - (s.enrolled_phase2 - s.group_enrolled))
            if s.group_enrolled >= gsize:
                waiting = [p.pid for p in s.patients if p.phase == 2 and p.eff is None]
                raise Conflict(
                    f"accrual suspended: awaiting response outcomes for patients {waiting}"
                )
            if s.probs is None:
                raise Conflict("randomization probabilities not yet available")
            arm = self._draw_arm()
            combo = s.arms[arm]
            phase = 2
        pid = s.enrolled + 1
        self.append(
            {
                "event": "enrolled",
                "pid": pid,
                "t": float(s.n_events),
                "phase": phase,
                "i": combo[0],
                "j": combo[1],
                "arm": arm,
                "eff_due": None,
            }
        )
        return {"pid": pid, "a_level": combo[0] + 1, "b_level": combo[1] + 1, "arm": arm}

    def _draw_arm(self) -> int:
        s = self.state
        rng = np.random.default_rng(np.uint64(mix64(s.seed, 8192 + s.n_events)))
        u = rng.random()
        acc = 0.0
        last = 0
        for k, pk in enumerate(s.probs.probs):
            if pk <= 0.0:
                continue
            acc += pk
            last = k
            if u < acc:
                return k
        return last

    def record_toxicity(self, pid: int, dlt: bool) -> None:
        self._check_pid(pid)
        if self.state.patients[pid - 1].tox is not None:
            raise Conflict(f"toxicity outcome for patient {pid} already recorded")
        self.append({"event": "toxicity", "pid": pid, "dlt": bool(dlt)})
        self.settle()

    def record_efficacy(self, pid: int, response: bool) -> None:
        self._check_pid(pid)
        if self.state.patients[pid - 1].eff is not None:
            raise Conflict(f"response outcome for patient {pid} already recorded")
        self.append(
            {
                "event": "efficacy",
                "pid": pid,
                "response": bool(response),
                "t": self.state.clock,
            }
        )
        self.settle()

    def finalize_now(self) -> None:
        s = self.state
        if s.finished:
            raise Conflict("trial is already finished")
        if s.phase != 2:
            raise Conflict("finalize applies once phase 2 has begun")
        missing = [p.pid for p in s.patients if p.phase == 2 and p.eff is None]
        if missing:
            raise Conflict(f"responses outstanding for patients {missing}")
        self._final_analysis()

    def _check_pid(self, pid: int) -> None:
        if pid < 1 or pid > self.state.enrolled:
            raise NotFound(f"no enrolled patient {pid}")


class Conflict(Exception):
    pass


class NotFound(Exception):
    pass


def status_payload(store: TrialStore) -> dict:
    s = store.state
    cfg = s.config
    suspended = False
    waiting: list[int] = []
    if not s.finished:
        if s.phase == 1 and s.cohort_enrolled >= cfg.cohort_size:
            suspended = True
            waiting = sorted(s.cohort_pending)
        elif s.phase == 2:
            gsize = min(cfg.group_size, cfg.n2 - (s.enrolled_phase2 - s.group_enrolled))
            if s.group_enrolled >= gsize:
                suspended = True
                waiting = [p.pid for p in s.patients if p.phase == 2 and p.eff is None]
    arms = None
    if s.arms is not None:
        data = s.arm_data()
        arms = [
            {
                "index": k,
                "a_level": i + 1,
                "b_level": j + 1,
                "open": k not in s.closures,
                "closed_reason": s.closures.get(k),
                "n_assessed": data.n[k],
                "n_responders": data.y[k],
                "prob": s.probs.probs[k] if s.probs is not None else None,
            }
            for k, (i, j) in enumerate(s.arms)
        ]
    return {
        "trial_id": store.trial_id,
        "phase": s.phase,
        "finished": s.finished,
        "stop_reason": s.stop_reason,
        "selected": (
            {"a_level": s.selected[0] + 1, "b_level": s.selected[1] + 1}
            if s.selected is not None
            else None
        ),
        "current": {"a_level": s.current[0] + 1, "b_level": s.current[1] + 1},
        "grid": {"a": list(s.grid.a), "b": list(s.grid.b)},
        "capacity": {"n1": cfg.n1, "n2": cfg.n2},
        "enrolled": s.enrolled,
        "enrolled_phase1": s.enrolled_phase1,
        "enrolled_phase2": s.enrolled_phase2,
        "suspended": suspended,
        "waiting_on": waiting,
        "group_size": cfg.group_size,
        "group_enrolled": s.group_enrolled,
        "toxicity_counts": {
            "n": s.counts_n.tolist(),
            "x": s.counts_x.tolist(),
        },
        "patients": [
            {
                "pid": p.pid,
                "phase": p.phase,
                "a_level": p.i + 1,
                "b_level": p.j + 1,
                "arm": p.arm,
                "dlt": p.tox,
                "response": p.eff,
            }
            for p in s.patients
        ],
        "probs": list(s.probs.probs) if s.probs is not None else None,
        "probs_history": [
            {"update": u, "probs": list(pv)} for u, (_, pv) in enumerate(s.probs_history)
        ],
        "events": s.n_events,
    }


def recommendation_payload(store: TrialStore) -> dict:
    s = store.state
    cfg = s.config
    tox_chain = refit_toxicity(s)
    out = {
        "phi_t": cfg.phi_t,
        "phi_e": cfg.phi_e,
        "prob_below": tox_chain.prob_below_surface(cfg.phi_t).tolist(),
        "mean_toxicity": tox_chain.mean_surface.tolist(),
        "selected": (
            {"a_level": s.selected[0] + 1, "b_level": s.selected[1] + 1}
            if s.selected is not None
            else None
        ),
        "arms": None,
        "probs": list(s.probs.probs) if s.probs is not None else None,
    }
    if s.arms is not None:
        eff_chain = refit_efficacy(s)
        out["arms"] = [
            {
                "index": k,
                "a_level": i + 1,
                "b_level": j + 1,
                "open": k not in s.closures,
                "prob_exceeds": prob_exceeds(eff_chain, k, cfg.phi_e),
                "posterior_mean": posterior_mean(eff_chain, k),
            }
            for k, (i, j) in enumerate(s.arms)
        ]
    return out


def create_app(data_dir: Path) -> FastAPI:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="combotrial conduct service")
    stores: dict[str, TrialStore] = {}
    registry_lock = threading.Lock()

    for path in sorted(data_dir.glob("*.jsonl")):
        store = TrialStore.load(path)
        with store.lock:
            store.settle()
        stores[store.trial_id] = store

    def get_store(trial_id: str) -> TrialStore:
        store = stores.get(trial_id)
        if store is None:
            raise HTTPException(status_code=404, detail=f"unknown trial {trial_id!r}")
        return store

    @app.post("/trials")
    def create_trial(body: dict = Body(default={})):
        trial_id = str(body.get("trial_id") or f"trial-{len(stores) + 1:04d}")
        if not trial_id.replace("-", "").replace("_", "").isalnum():
            raise HTTPException(status_code=400, detail="trial_id must be alphanumeric with - or _")
        seed = int(body.get("seed", 0))
        try:
            config = config_from_dict(body.get("config", {})) if body.get("config") else _default_config()
            grid_spec = body.get("grid") or DEFAULT_GRID
            grid = DoseGrid(tuple(grid_spec["a"]), tuple(grid_spec["b"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        with registry_lock:
            if trial_id in stores:
                raise HTTPException(status_code=409, detail=f"trial {trial_id!r} already exists")
            path = data_dir / f"{trial_id}.jsonl"
            try:
                stores[trial_id] = TrialStore.create(path, trial_id, config, grid, seed)
            except FileExistsError:
                raise HTTPException(status_code=409, detail=f"log for {trial_id!r} already exists") from None
        return status_payload(stores[trial_id])

    @app.get("/trials")
    def list_trials():
        return [
            {
                "trial_id": tid,
                "phase": st.state.phase,
                "enrolled": st.state.enrolled,
                "finished": st.state.finished,
            }
            for tid, st in sorted(stores.items())
        ]

    @app.get("/trials/{trial_id}")
    def get_status(trial_id: str):
        store = get_store(trial_id)
        with store.lock:
            return status_payload(store)

    @app.post("/trials/{trial_id}/patients")
    def enroll(trial_id: str):
        store = get_store(trial_id)
        with store.lock:
            try:
                assignment = store.enroll()
            except Conflict as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            return {"assignment": assignment, "status": status_payload(store)}

    @app.post("/trials/{trial_id}/patients/{pid}/toxicity")
    def record_toxicity(trial_id: str, pid: int, body: dict = Body(...)):
        if "dlt" not in body:
            raise HTTPException(status_code=400, detail="body must contain 'dlt'")
        store = get_store(trial_id)
        with store.lock:
            try:
                store.record_toxicity(pid, bool(body["dlt"]))
            except Conflict as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            except NotFound as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            return status_payload(store)

    @app.post("/trials/{trial_id}/patients/{pid}/efficacy")
    def record_efficacy(trial_id: str, pid: int, body: dict = Body(...)):
        if "response" not in body:
            raise HTTPException(status_code=400, detail="body must contain 'response'")
        store = get_store(trial_id)
        with store.lock:
            try:
                store.record_efficacy(pid, bool(body["response"]))
            except Conflict as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            except NotFound as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            return status_payload(store)

    @app.get("/trials/{trial_id}/recommendation")
    def recommendation(trial_id: str):
        store = get_store(trial_id)
        with store.lock:
            return recommendation_payload(store)

    @app.post("/trials/{trial_id}/finalize")
    def finalize(trial_id: str):
        store = get_store(trial_id)
        with store.lock:
            try:
                store.finalize_now()
            except Conflict as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            return status_payload(store)

    return app


def _default_config() -> DesignConfig:
    from .scenarios import bundled_config

    return bundled_config()
