"""Command-line front door: simulation runs, log replay, and the conduct service.

Exit codes: 0 success, 2 configuration/input error (the message names the
offending field), 3 corrupt or inconsistent event log.
"""

import sys
from pathlib import Path

import click

from .scenarios import (
    ConfigFileError,
    bundled_names,
    load_ar_rates,
    load_config,
    load_scenario,
    resolve_scenario_path,
)

CONFIG_ERROR_EXIT = 2
REPLAY_ERROR_EXIT = 3


@click.group()
def main():
    """Phase I/II drug-combination trial toolkit."""


def _fail_config(err: ConfigFileError):
    click.echo(f"error: {err}", err=True)
    sys.exit(CONFIG_ERROR_EXIT)


@main.command()
@click.option("--scenario", "scenario_arg", required=True, help="Scenario file path or bundled name (s01..s12, ar01..ar08).")
@click.option("--config", "config_arg", default=None, help="Design config JSON; bundled melanoma defaults when omitted.")
@click.option("--reps", type=int, required=True, help="Number of simulated trials.")
@click.option("--seed", type=int, default=0, show_default=True, help="Master seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--parallelism", type=int, default=1, show_default=True, help="Worker processes.")
@click.option("--ar-only", is_flag=True, help="Run the allocation-only harness (scenario must provide 'rates').")
@click.option("--scheme", type=click.Choice(["mar", "far"]), default="mar", show_default=True, help="Randomization scheme for --ar-only.")
@click.option("--patients", type=int, default=100, show_default=True, help="Patients per replicate for --ar-only.")
def simulate(scenario_arg, config_arg, reps, seed, out_dir, parallelism, ar_only, scheme, patients):
    """Run replicated simulations and write operating characteristics."""
    from . import simulator

    if reps < 1:
        click.echo("error: reps: must be a positive integer", err=True)
        sys.exit(CONFIG_ERROR_EXIT)
    if parallelism < 1:
        click.echo("error: parallelism: must be a positive integer", err=True)
        sys.exit(CONFIG_ERROR_EXIT)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = resolve_scenario_path(scenario_arg)
    try:
        if ar_only:
            rates = load_ar_rates(path)
            config = load_config(config_arg) if config_arg else None
            eff_mcmc = config.eff_mcmc if config else None
            res = simulator.run_ar_only(
                rates, n_patients=patients, n_reps=reps, scheme=scheme,
                master_seed=seed, eff_mcmc=eff_mcmc,
            )
            _write_ar_outputs(out, res)
        else:
            sc = load_scenario(path)
            config = load_config(config_arg) if config_arg else _default_config()
            oc, summaries = simulator.run_oc(sc, config, n_reps=reps, master_seed=seed, parallelism=parallelism)
            (out / "oc_table.txt").write_text(simulator.format_oc_table(oc, sc), encoding="utf-8")
            (out / "oc.csv").write_text(simulator.oc_to_csv(oc, sc), encoding="utf-8")
            (out / "replicates.csv").write_text(simulator.replicates_to_csv(summaries, sc), encoding="utf-8")
            click.echo(simulator.format_oc_table(oc, sc))
    except ConfigFileError as err:
        _fail_config(err)
    click.echo(f"wrote results to {out}")


def _default_config():
    from .scenarios import bundled_config

    return bundled_config()


def _write_ar_outputs(out: Path, res):
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "true_rate", "mean_allocation", "mean_responders"])
    for k, rate in enumerate(res.rates):
        w.writerow([k + 1, f"{rate:.6g}", f"{res.mean_allocation[k]:.4f}", f"{res.mean_responders[k]:.4f}"])
    (out / "allocations.csv").write_text(buf.getvalue(), encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient"] + [f"prob_arm{k + 1}" for k in range(len(res.rates))])
    for t in range(res.prob_trajectory.shape[0]):
        w.writerow([t + 1] + [f"{v:.6f}" for v in res.prob_trajectory[t]])
    (out / "trajectories.csv").write_text(buf.getvalue(), encoding="utf-8")
    lines = [
        f"allocation-only harness: scheme={res.scheme} rates={res.rates}",
        f"replicates={res.n_reps} patients={res.n_patients} master_seed={res.master_seed}",
        "mean allocation: " + "  ".join(f"arm{k + 1}={v:.2f}" for k, v in enumerate(res.mean_allocation)),
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    click.echo(lines[2])


@main.command()
@click.argument("log_path", type=click.Path(exists=False))
def replay(log_path):
    """Rebuild trial state from an event log and verify its invariants."""
    from .events import ReplayError, replay_lines

    try:
        with open(log_path, "r", encoding="utf-8") as fh:
            state = replay_lines(fh)
    except FileNotFoundError:
        click.echo(f"error: {log_path}: file not found", err=True)
        sys.exit(CONFIG_ERROR_EXIT)
    except ReplayError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(REPLAY_ERROR_EXIT)
    click.echo(f"events applied: {state.n_events}")
    click.echo(f"phase: {state.phase}  enrolled: {state.enrolled} (phase 1: {state.enrolled_phase1})")
    click.echo(f"current combination: A{state.current[0] + 1}, B{state.current[1] + 1}")
    if state.arms is not None:
        arms = ", ".join(f"(A{i + 1},B{j + 1})" for i, j in state.arms)
        click.echo(f"arms: {arms}")
        if state.closures:
            closed = ", ".join(f"{k + 1}:{r}" for k, r in sorted(state.closures.items()))
            click.echo(f"closed arms: {closed}")
        if state.probs is not None:
            click.echo("randomization probabilities: " + "  ".join(f"{p:.3f}" for p in state.probs.probs))
    if state.finished:
        sel = state.selected
        chosen = f"(A{sel[0] + 1},B{sel[1] + 1})" if sel else "none"
        click.echo(f"finished: selected {chosen} ({state.stop_reason})")
    click.echo("invariants: ok")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8777, show_default=True)
@click.option(
    "--data-dir",
    envvar="COMBOTRIAL_DATA_DIR",
    default="./conduct-data",
    show_default=True,
    help="Durable event-log directory (env: COMBOTRIAL_DATA_DIR).",
)
def serve(host, port, data_dir):
    """Run the trial-conduct HTTP service."""
    import uvicorn

    from .service import create_app

    app = create_app(Path(data_dir))
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
def scenarios():
    """List bundled scenarios and allocation-rate sets."""
    names = bundled_names()
    click.echo("scenarios: " + " ".join(names["scenarios"]))
    click.echo("ar rate sets: " + " ".join(names["ar"]))


if __name__ == "__main__":
    main()
