"""Batch experiment driver.

Subcommands: `run` executes Monte Carlo runs of the filter over a scenario
and writes the aggregated metric series plus per-run logs; `make-scenario`
emits the built-in scenario file. Flags override config-file values, which
override defaults; MPSLAM_SEED is the seed fallback when neither gives one.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .engine import EngineParams, Filter
from .estimates import (
    DIVERGENCE_THRESHOLD_M,
    aggregate,
    evaluate_run,
    record_step,
    write_results_csv,
    write_run_estimates_csv,
    write_run_features_csv,
)
from .transitions import TransitionParams
from .world import (
    Scenario,
    ScenarioParseError,
    load_scenario,
    psi_to_native,
    reference_scenario,
    save_frames,
    save_scenario,
    synthesize_frames,
)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything one batch needs; field names double as config-file keys."""

    scenario: str | None = None  # path; None means the built-in scenario
    seed: int = 1
    runs: int = 1
    particles: int = 100000
    mp_iterations: int = 3
    steps: int | None = None  # truncate the scenario to this many rows
    pa_dispersion: str = "unknown"
    out: str = "out"
    dump_frames: bool = False
    jobs: int = 1
    p_s: float = 0.999
    p_cf: float = 0.5
    p_prune: float = 1e-3
    mu_n: float = 0.01
    sigma_a: float = 1e-3
    sigma_w: float = 0.05
    q_tau: float = 1e4
    q_theta: float = 1e4
    q_vartheta: float = 1e4

    def validate(self) -> None:
        if self.runs < 1:
            raise ValueError("run count must be positive")
        if self.particles < 1:
            raise ValueError("particle count must be positive")
        if self.mp_iterations < 1:
            raise ValueError("message-passing iteration count must be positive")
        if self.jobs < 1:
            raise ValueError("parallel job count must be positive")
        if self.steps is not None and self.steps < 2:
            raise ValueError("step count must be at least 2")
        if self.pa_dispersion not in ("known", "unknown"):
            raise ValueError("dispersion mode must be 'known' or 'unknown'")
        if not 0.0 < self.p_s <= 1.0:
            raise ValueError("survival probability must be in (0, 1]")
        if not 0.0 < self.p_cf < 1.0:
            raise ValueError("confirmation threshold must be in (0, 1)")
        if not 0.0 < self.p_prune < 1.0:
            raise ValueError("prune threshold must be in (0, 1)")
        if self.mu_n < 0.0:
            raise ValueError("birth mean must be nonnegative")
        if self.sigma_a <= 0.0 or self.sigma_w <= 0.0:
            raise ValueError("noise scales must be positive")
        if min(self.q_tau, self.q_theta, self.q_vartheta) <= 0.0:
            raise ValueError("dispersion shape parameters must be positive")


def _transition_params(config: RunConfig) -> TransitionParams:
    return TransitionParams(
        sigma_w=config.sigma_w,
        q_tau=config.q_tau,
        q_theta=config.q_theta,
        q_vartheta=config.q_vartheta,
        p_s=config.p_s,
        mu_n=config.mu_n,
        sigma_a=config.sigma_a,
    )


def _engine_params(config: RunConfig) -> EngineParams:
    return EngineParams(
        n_particles=config.particles,
        mp_iterations=config.mp_iterations,
        p_prune=config.p_prune,
        pa_dispersion=config.pa_dispersion,
    )


def _load_run_scenario(config: RunConfig) -> Scenario:
    if config.scenario is None:
        return reference_scenario(config.steps if config.steps else 300)
    if not os.path.isfile(config.scenario):
        raise FileNotFoundError(f"scenario file not found: {config.scenario}")
    scenario = load_scenario(config.scenario)
    if config.steps is not None:
        if config.steps > scenario.n_steps:
            raise ScenarioParseError(
                f"scenario has {scenario.n_steps} steps, {config.steps} requested"
            )
        scenario = dataclasses.replace(
            scenario, trajectory=scenario.trajectory[: config.steps]
        )
    return scenario


def run_single(scenario: Scenario, config: RunConfig, seed_seq) -> tuple:
    """One Monte Carlo run: synthesize frames, filter them, score the run."""
    frames_ss, filter_ss = seed_seq.spawn(2)
    frames = synthesize_frames(scenario, frames_ss)
    pa_psi = None
    if config.pa_dispersion == "known":
        pa_psi = [psi_to_native(pa.psi_m) for pa in scenario.pas]
    filt = Filter(
        pa_positions=[pa.position for pa in scenario.pas],
        agent_start=scenario.trajectory[0, :2],
        constants=scenario.constants,
        transition=_transition_params(config),
        params=_engine_params(config),
        pa_psi=pa_psi,
        rng=np.random.default_rng(filter_ss),
    )
    records = []
    for n in range(1, scenario.n_steps):
        diag = filt.step(frames[n])
        records.append(record_step(filt, n, diag, config.p_cf))
    metrics = evaluate_run(
        records, scenario, divergence_threshold_m=DIVERGENCE_THRESHOLD_M
    )
    return records, metrics, frames


def _psi_meta(scenario: Scenario) -> dict:
    out = {}
    for feat in scenario.features(0):
        d, th, vt = feat.psi_m[0], np.degrees(feat.psi_m[1]), np.degrees(feat.psi_m[2])
        out[f"psi_true_{feat.label}"] = f"{d:g},{th:g},{vt:g}"
    return out


def run(config: RunConfig) -> int:
    """Execute a batch and write its artifacts; returns an exit status."""
    try:
        config.validate()
    except ValueError as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return 2
    try:
        scenario = _load_run_scenario(config)
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return 3
    except (ScenarioParseError, ValueError) as err:
        print(f"scenario rejected: {err}", file=sys.stderr)
        return 3
    try:
        os.makedirs(config.out, exist_ok=True)
        probe = os.path.join(config.out, ".write-probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as err:
        print(f"cannot write output directory: {err}", file=sys.stderr)
        return 4

    children = np.random.SeedSequence(config.seed).spawn(config.runs)
    if config.jobs == 1 or config.runs == 1:
        results = [run_single(scenario, config, ss) for ss in children]
    else:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(run_single, scenario, config, ss) for ss in children]
            results = [f.result() for f in futures]

    run_metrics = []
    for k, (records, metrics, frames) in enumerate(results):
        run_metrics.append(metrics)
        stem = os.path.join(config.out, f"run_{k:03d}")
        meta = {"run": k, "seed": config.seed, "converged": metrics.converged}
        write_run_estimates_csv(f"{stem}_estimates.csv", records, metrics, meta)
        write_run_features_csv(f"{stem}_features.csv", records, metadata=meta)
        if config.dump_frames:
            save_frames(frames, f"{stem}_frames.txt")

    series = aggregate(run_metrics)
    label = config.pa_dispersion
    scenario_name = "builtin"
    if config.scenario is not None:
        scenario_name = os.path.basename(config.scenario).replace(" ", "_")
    metadata = {
        "seed": config.seed,
        "particles": config.particles,
        "runs": series.n_runs,
        "converged": series.n_converged,
        "label": label,
        "steps": scenario.n_steps,
        "mp_iterations": config.mp_iterations,
        "scenario": scenario_name,
    }
    metadata.update(_psi_meta(scenario))
    name = "results.csv" if label == "unknown" else f"results_{label}.csv"
    write_results_csv(os.path.join(config.out, name), series, metadata)
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpslam",
        description="Multipath feature SLAM: simulation and inference batches.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute Monte Carlo runs and write CSVs")
    p_run.add_argument("--config", help="TOML file with RunConfig keys")
    p_run.add_argument("--scenario", help="scenario file (omit for built-in)")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--runs", type=int)
    p_run.add_argument("--particles", type=int)
    p_run.add_argument("--mp-iters", dest="mp_iterations", type=int)
    p_run.add_argument("--steps", type=int)
    p_run.add_argument("--pa-dispersion", choices=("known", "unknown"))
    p_run.add_argument("--out")
    p_run.add_argument("--dump-frames", action="store_true", default=None)
    p_run.add_argument("--jobs", type=int)
    p_run.add_argument("--p-s", dest="p_s", type=float)
    p_run.add_argument("--p-cf", dest="p_cf", type=float)
    p_run.add_argument("--p-prune", dest="p_prune", type=float)
    p_run.add_argument("--mu-n", dest="mu_n", type=float)
    p_run.add_argument("--sigma-a", dest="sigma_a", type=float)
    p_run.add_argument("--sigma-w", dest="sigma_w", type=float)
    p_run.add_argument("--q-tau", dest="q_tau", type=float)
    p_run.add_argument("--q-theta", dest="q_theta", type=float)
    p_run.add_argument("--q-vartheta", dest="q_vartheta", type=float)

    p_make = sub.add_parser("make-scenario", help="write the built-in scenario file")
    p_make.add_argument("--out", default="scenario.txt")
    p_make.add_argument("--steps", type=int, default=300)
    return parser


def _build_config(args: argparse.Namespace) -> RunConfig:
    file_values: dict = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config, "rb") as fh:
            file_values = tomllib.load(fh)
        unknown = set(file_values) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    flag_values = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    merged = {**file_values, **flag_values}
    if "seed" not in merged and os.environ.get("MPSLAM_SEED"):
        merged["seed"] = int(os.environ["MPSLAM_SEED"])
    return RunConfig(**merged)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "make-scenario":
        save_scenario(reference_scenario(args.steps), args.out)
        return 0
    try:
        config = _build_config(args)
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return 2
    except (ValueError, tomllib.TOMLDecodeError) as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return 2
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
