"""Replicated trial simulation and operating-characteristics aggregation.

Replicates are independent: each gets its seed from a splitmix64-style
mix of the master seed and the replicate index, so the same master seed
yields the same replicate set on any machine and at any parallelism level.
Aggregation folds the per-replicate summaries in replicate order with
compensated summation, making the aggregate bit-identical no matter how
the work was scheduled.
"""

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .efficacy import DEFAULT_HYPER_PRIORS, ArmData, sample_efficacy_posterior
from .posterior import McmcConfig
from .randomization import draw_assignment, far_probabilities, mar_probabilities
from .seeds import mix64
from .trial_engine import DesignConfig, Scenario, TrialResult, run_trial

__all__ = [
    "OperatingCharacteristics",
    "ArOnlyResult",
    "run_oc",
    "run_ar_only",
    "format_oc_table",
    "oc_to_csv",
    "replicates_to_csv",
]


@dataclass
class OperatingCharacteristics:
    """Aggregated design performance over replicates."""

    n_reps: int
    selection_pct: np.ndarray  # (I, J)
    none_selected_pct: float
    mean_patients: np.ndarray  # (I, J)
    admissible_pct: np.ndarray  # (I, J)
    mean_admissible_size: float
    mean_enrolled: float
    duration_mean: float
    duration_q10: float
    duration_q50: float
    duration_q90: float
    early_stop_pct: float
    master_seed: int


class _Kahan:
    """Compensated accumulator so the fold order fixes the float result."""

    def __init__(self):
        self.total = 0.0
        self.c = 0.0

    def add(self, v: float) -> None:
        y = v - self.c
        t = self.total + y
        self.c = (t - self.total) - y
        self.total = t


def _replicate(args) -> dict:
    scenario, config, seed = args
    res: TrialResult = run_trial(scenario, config, seed)
    return {
        "seed": seed,
        "selected": res.selected,
        "patients": res.patients,
        "admissible": res.admissible,
        "n_enrolled": res.n_enrolled,
        "duration": res.duration,
        "reason": res.reason,
    }


def run_oc(
    scenario: Scenario,
    config: DesignConfig,
    n_reps: int,
    master_seed: int,
    parallelism: int = 1,
) -> tuple[OperatingCharacteristics, list[dict]]:
    """Simulate `n_reps` trials and aggregate their operating characteristics.

    Returns (aggregate, per-replicate summaries in replicate order).
    """
    if n_reps < 1:
        raise ValueError(f"n_reps must be >= 1, got {n_reps}")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    jobs = [(scenario, config, mix64(master_seed, r)) for r in range(n_reps)]
    if parallelism == 1:
        summaries = [_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            summaries = list(pool.map(_replicate, jobs, chunksize=max(1, n_reps // (parallelism * 4))))
    return aggregate(summaries, scenario, master_seed), summaries


def aggregate(summaries: list[dict], scenario: Scenario, master_seed: int) -> OperatingCharacteristics:
    shape = scenario.grid.shape
    n_reps = len(summaries)
    sel_counts = np.zeros(shape, dtype=np.int64)
    adm_counts = np.zeros(shape, dtype=np.int64)
    patients = np.zeros(shape, dtype=np.int64)
    adm_size = 0
    none_selected = 0
    early = 0
    enrolled = 0
    dur = _Kahan()
    durations = []
    for s in summaries:
        if s["selected"] is not None:
            sel_counts[s["selected"]] += 1
        else:
            none_selected += 1
        if s["admissible"] is not None:
            adm_size += len(s["admissible"])
            for c in s["admissible"]:
                adm_counts[tuple(c)] += 1
        if s["reason"] != "completed":
            early += 1
        patients += s["patients"]
        enrolled += s["n_enrolled"]
        dur.add(s["duration"])
        durations.append(s["duration"])
    durations.sort()

    def q(p: float) -> float:
        idx = min(len(durations) - 1, max(0, int(round(p * (len(durations) - 1)))))
        return durations[idx]

    return OperatingCharacteristics(
        n_reps=n_reps,
        selection_pct=100.0 * sel_counts / n_reps,
        none_selected_pct=100.0 * none_selected / n_reps,
        mean_patients=patients / n_reps,
        admissible_pct=100.0 * adm_counts / n_reps,
        mean_admissible_size=adm_size / n_reps,
        mean_enrolled=enrolled / n_reps,
        duration_mean=dur.total / n_reps,
        duration_q10=q(0.10),
        duration_q50=q(0.50),
        duration_q90=q(0.90),
        early_stop_pct=100.0 * early / n_reps,
        master_seed=master_seed,
    )


@dataclass
class ArOnlyResult:
    """Allocation-only harness output: totals and probability trajectories."""

    scheme: str
    rates: tuple[float, ...]
    n_reps: int
    n_patients: int
    mean_allocation: np.ndarray  # (K,)
    mean_responders: np.ndarray  # (K,)
    prob_trajectory: np.ndarray  # (n_patients, K): probs in force per slot
    master_seed: int


def run_ar_only(
    true_rates,
    n_patients: int = 100,
    n_reps: int = 1000,
    scheme: str = "mar",
    master_seed: int = 0,
    reference_arm: int = 0,
    eff_mcmc: McmcConfig | None = None,
    hyper_priors=DEFAULT_HYPER_PRIORS,
) -> ArOnlyResult:
    """Randomize `n_patients` with per-patient updates, no dose finding.

    Outcomes are Bernoulli draws from `true_rates`, observed immediately, so
    the harness isolates the randomization scheme from the phase 1 design.
    """
    rates = tuple(float(r) for r in true_rates)
    if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError("true rates must be probabilities")
    if scheme not in ("mar", "far"):
        raise ValueError(f"scheme must be 'mar' or 'far', got {scheme!r}")
    k_arms = len(rates)
    if not 0 <= reference_arm < k_arms:
        raise ValueError(f"reference arm {reference_arm} out of range")
    cfg = eff_mcmc or McmcConfig(adapt=False, initial_step=1.0)
    alloc = np.zeros(k_arms, dtype=np.int64)
    resp = np.zeros(k_arms, dtype=np.int64)
    traj = np.zeros((n_patients, k_arms))
    active = list(range(k_arms))
    for rep in range(n_reps):
        seed = mix64(master_seed, rep)
        rng = np.random.default_rng(np.uint64(mix64(seed, 0)))
        n = [0] * k_arms
        y = [0] * k_arms
        for t in range(n_patients):
            chain = sample_efficacy_posterior(
                ArmData(tuple(n), tuple(y)), cfg, mix64(seed, 1 + t), hyper_priors
            )
            if scheme == "mar":
                probs = mar_probabilities(chain, active)
            else:
                probs = far_probabilities(chain, active, reference_arm)
            traj[t] += probs.probs
            k = draw_assignment(probs, rng)
            n[k] += 1
            y[k] += int(rng.random() < rates[k])
        alloc += n
        resp += y
    return ArOnlyResult(
        scheme=scheme,
        rates=rates,
        n_reps=n_reps,
        n_patients=n_patients,
        mean_allocation=alloc / n_reps,
        mean_responders=resp / n_reps,
        prob_trajectory=traj / n_reps,
        master_seed=master_seed,
    )


def _fmt_row(values, width=7, nd=1) -> str:
    return "".join(f"{v:{width}.{nd}f}" for v in values)


def format_oc_table(oc: OperatingCharacteristics, scenario: Scenario) -> str:
    """Text table, one block per drug B level from highest to lowest."""
    ni, nj = scenario.grid.shape
    out = io.StringIO()
    name = scenario.name or "scenario"
    out.write(f"operating characteristics: {name}\n")
    out.write(
        f"replicates={oc.n_reps} master_seed={oc.master_seed} "
        f"hazard={scenario.hazard}\n\n"
    )
    head = f"{'':10s}{'true tox':>{7 * ni}s}  {'true eff':>{7 * ni}s}  {'select %':>{7 * ni}s}  {'patients':>{7 * ni}s}\n"
    out.write(head)
    for j in range(nj - 1, -1, -1):
        out.write(
            f"drug B={j + 1:<3d}"
            + _fmt_row((scenario.tox[i, j] for i in range(ni)), nd=2)
            + "  "
            + _fmt_row((scenario.eff[i, j] for i in range(ni)), nd=2)
            + "  "
            + _fmt_row((oc.selection_pct[i, j] for i in range(ni)))
            + "  "
            + _fmt_row((oc.mean_patients[i, j] for i in range(ni)))
            + "\n"
        )
    out.write(f"\nno selection: {oc.none_selected_pct:.1f}%   early stop: {oc.early_stop_pct:.1f}%\n")
    out.write("admissible-set inclusion %:\n")
    for j in range(nj - 1, -1, -1):
        out.write(
            f"drug B={j + 1:<3d}" + _fmt_row((oc.admissible_pct[i, j] for i in range(ni))) + "\n"
        )
    out.write(f"mean admissible-set size: {oc.mean_admissible_size:.2f}\n")
    out.write(f"mean patients enrolled: {oc.mean_enrolled:.2f}\n")
    out.write(
        f"trial duration (months): mean {oc.duration_mean:.1f}, "
        f"q10 {oc.duration_q10:.1f}, median {oc.duration_q50:.1f}, q90 {oc.duration_q90:.1f}\n"
    )
    return out.getvalue()


def oc_to_csv(oc: OperatingCharacteristics, scenario: Scenario) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["a_level", "b_level", "true_tox", "true_eff", "selection_pct", "mean_patients", "admissible_pct"]
    )
    ni, nj = scenario.grid.shape
    for i in range(ni):
        for j in range(nj):
            w.writerow(
                [
                    i + 1,
                    j + 1,
                    f"{scenario.tox[i, j]:.6g}",
                    f"{scenario.eff[i, j]:.6g}",
                    f"{oc.selection_pct[i, j]:.4f}",
                    f"{oc.mean_patients[i, j]:.4f}",
                    f"{oc.admissible_pct[i, j]:.4f}",
                ]
            )
    w.writerow([])
    w.writerow(["none_selected_pct", f"{oc.none_selected_pct:.4f}"])
    w.writerow(["early_stop_pct", f"{oc.early_stop_pct:.4f}"])
    w.writerow(["mean_admissible_size", f"{oc.mean_admissible_size:.4f}"])
    w.writerow(["mean_enrolled", f"{oc.mean_enrolled:.4f}"])
    w.writerow(["duration_mean", f"{oc.duration_mean:.4f}"])
    w.writerow(["duration_q10", f"{oc.duration_q10:.4f}"])
    w.writerow(["duration_q50", f"{oc.duration_q50:.4f}"])
    w.writerow(["duration_q90", f"{oc.duration_q90:.4f}"])
    return buf.getvalue()


def replicates_to_csv(summaries: list[dict], scenario: Scenario) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ni, nj = scenario.grid.shape
    pat_cols = [f"patients_a{i + 1}_b{j + 1}" for i in range(ni) for j in range(nj)]
    w.writerow(["replicate", "seed", "selected_a", "selected_b", "n_enrolled", "duration", "reason", *pat_cols])
    for r, s in enumerate(summaries):
        sel = s["selected"]
        pats = [int(s["patients"][i, j]) for i in range(ni) for j in range(nj)]
        w.writerow(
            [
                r,
                s["seed"],
                sel[0] + 1 if sel else "",
                sel[1] + 1 if sel else "",
                s["n_enrolled"],
                f"{s['duration']:.4f}",
                s["reason"],
                *pats,
            ]
        )
    return buf.getvalue()
