"""Experiment orchestration: one runner method per experiment kind."""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from pydantic import ValidationError

from .artifacts import ArtifactWriter, RunSummary, compare_artifacts, finite_or_none, package_versions
from .averaging import AveragedPath, power_delta_policy, rate_sweep, solve_averaged
from .config import ExperimentConfig, PerturbationConfig
from .core import ModelSpec, PathGrid, SimConfig, TimeScales, initial_ensembles, simulate
from .errors import ConfigError
from .frozen import default_fast_start, ergodicity_fit, invariant_measure
from .ldp import (
    ControlPath,
    controlled_simulate,
    exit_action_search,
    exit_probability,
    occupation_measure,
    rate_functional,
)
from .measures import EXACT_ASSIGNMENT_LIMIT, moment, wasserstein2
from .models import GaussianProbeSampler, LinearClosedForm, assumption_probe, cbo_consensus
from .noise import NoiseStream

LDP_EXPERIMENTS = ("ldp-rate", "controlled-run")
Q2_FLOOR_REL = 1e-12
CACHE_REUSE_FACTOR = 0.05


def _simulate_rep(model: ModelSpec, ts: TimeScales, sim: SimConfig, x0: np.ndarray, rep: int) -> PathGrid:
    noise = NoiseStream(sim.seed, rep)
    slow0, fast0 = initial_ensembles(x0, model, sim, noise)
    return simulate(slow0, fast0, model, ts, sim, noise)


def _trajectory_rows(paths: List[PathGrid]) -> List[List[Any]]:
    rows = []
    for rep, path in enumerate(paths):
        slow_mean = path.snapshots.mean(axis=1)
        fast_mean = path.fast.mean(axis=1)
        for k, t in enumerate(path.times):
            rows.append(
                [rep, t, *slow_mean[k], *fast_mean[k], moment(path.snapshots[k], 2), moment(path.fast[k], 2)]
            )
    return rows


def _trajectory_header(model: ModelSpec) -> List[str]:
    return (
        ["rep", "t"]
        + [f"mean_x{i}" for i in range(model.n)]
        + [f"mean_y{j}" for j in range(model.m)]
        + ["m2_x", "m2_y"]
    )


class ExperimentRunner:
    """Runs one validated experiment config and writes its artefacts.

    Runtime objects are built up front so invalid parameters fail before anything
    touches the output directory.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        output_dir: Optional[Path | str] = None,
        threads: int = 1,
    ) -> None:
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}")
        self.config = config
        self.threads = threads
        self.output_dir = Path(output_dir or config.output_dir or Path("runs") / config.experiment)

        self.model = config.model.build(ldp=config.experiment in LDP_EXPERIMENTS)
        self.ts = config.time_scales.to_runtime()
        self.sim = config.sim.to_runtime(config.seed, threads)
        self.inv_cfg = config.invariant.to_runtime(config.seed)
        self.x0 = np.asarray(config.x0, dtype=float)
        if self.x0.size != self.model.n:
            raise ConfigError(f"x0 has {self.x0.size} entries, model '{self.model.name}' has slow dim {self.model.n}")
        if config.experiment == "cbo-optimize" and self.model.name != "cbo":
            raise ConfigError("cbo-optimize needs the 'cbo' model")
        if config.experiment == "ldp-rate" and config.ldp.exit is not None:
            if self.model.name != "linear":
                raise ConfigError("the exit-rate check needs the 'linear' model")
            # the quasi-potential the exit action is compared with holds only for a decoupled slow drift
            if self.model.params["c"] != 0.0:
                raise ConfigError(f"the exit-rate check needs c = 0, got c = {self.model.params['c']}")
            for eps in config.ldp.exit.epsilons:
                TimeScales(eps, self.ts.delta, self.ts.separation).check_ldp_regime()
        if config.experiment in LDP_EXPERIMENTS:
            issues = self.model.assumptions.ldp_issues()
            if issues:
                logger.warning("large-deviation assumptions not certified for '{}': {}", self.model.name, issues)
        if config.experiment == "controlled-run":
            self.ts.check_ldp_regime()

        self._writer = ArtifactWriter(self.output_dir)

    # ------------------------------------------------------------------
    def run(self) -> RunSummary:
        kind = self.config.experiment
        logger.info("running {} on model '{}' (seed {}, {} threads)", kind, self.model.name, self.config.seed, self.threads)
        start = time.perf_counter()
        handler = getattr(self, "_run_" + kind.replace("-", "_"))
        headline = handler()
        summary = RunSummary(
            experiment=kind,
            seed=self.config.seed,
            config_hash=self.config.config_hash(),
            config=self.config.model_dump(mode="json"),
            threads=self.threads,
            wall_time=time.perf_counter() - start,
            versions=package_versions(),
            tolerances=self._tolerances(),
            headline=headline,
            artifacts=self._writer.hashes(),
        )
        summary.write(self.output_dir)
        logger.info("{} finished in {:.2f}s", kind, summary.wall_time)
        return summary

    def _tolerances(self) -> Dict[str, Any]:
        inv = self.inv_cfg
        return {
            "fast_substep_factor": self.sim.fast_substep_factor,
            "taming": self.model.resolve_taming(self.sim.taming).value,
            "invariant_tol": inv.tol,
            "invariant_check_lag": inv.check_lag,
            "invariant_max_time": inv.max_time,
            "w2_exact_limit": EXACT_ASSIGNMENT_LIMIT,
            "w2_projections": inv.n_projections,
            "cache_reuse_factor": CACHE_REUSE_FACTOR,
            "q2_floor_rel": Q2_FLOOR_REL,
        }

    def _paths(self) -> List[PathGrid]:
        return Parallel(n_jobs=self.threads, prefer="threads")(
            delayed(_simulate_rep)(self.model, self.ts, self.sim, self.x0, rep) for rep in range(self.sim.n_reps)
        )

    # --- experiments ----------------------------------------------------
    def _run_simulate(self) -> Dict[str, Any]:
        paths = self._paths()
        self._writer.write_csv("trajectory.csv", _trajectory_header(self.model), _trajectory_rows(paths))
        means = np.stack([p.mean_path() for p in paths])
        drift = float(np.abs(means - means[:, :1, :]).max())
        return {
            "final_mean": means[:, -1, :].mean(axis=0).tolist(),
            "max_mean_change": drift,
            "n_reps": len(paths),
        }

    def _run_cbo_optimize(self) -> Dict[str, Any]:
        paths = self._paths()
        rows, terminal = [], []
        for rep, path in enumerate(paths):
            for k, t in enumerate(path.times):
                m_ell, m_h = cbo_consensus(self.model, path.slow_at(k), path.fast_at(k))
                rows.append([rep, t, *m_ell, *m_h])
            terminal.append([m_ell.tolist(), m_h.tolist()])
        header = ["rep", "t"] + [f"m_ell_{i}" for i in range(self.model.n)] + [f"m_h_{j}" for j in range(self.model.m)]
        self._writer.write_csv("trajectory.csv", _trajectory_header(self.model), _trajectory_rows(paths))
        self._writer.write_csv("consensus.csv", header, rows)
        logger.info("terminal consensus per rep: {}", terminal)
        return {"terminal_consensus": terminal}

    def _run_averaging_rate(self) -> Dict[str, Any]:
        sweep = self.config.sweep
        report = rate_sweep(
            self.model,
            sweep.epsilons,
            self.sim,
            self.x0,
            delta_policy=power_delta_policy(sweep.delta_power),
            separation=self.ts.separation,
            inv_cfg=self.inv_cfg,
            n_boot=sweep.n_boot,
        )
        self._writer.write_csv(
            "rate_report.csv",
            ["epsilon", "delta", "estimate", "std_error"],
            [list(row) for row in report.rows()],
        )
        return {
            "slope": report.slope,
            "slope_ci": list(report.slope_ci),
            "monotone_violations": [list(p) for p in report.monotone_violations],
            "failed_cells": report.failed_cells,
        }

    def _run_frozen_invariant(self) -> Dict[str, Any]:
        slow0, _ = initial_ensembles(self.x0, self.model, self.sim, NoiseStream(self.sim.seed))
        inv = invariant_measure(slow0, self.model, self.inv_cfg)
        pts = inv.measure.particles

        noise = NoiseStream(self.inv_cfg.seed)
        start = default_fast_start(self.model, self.inv_cfg, noise)
        fit = ergodicity_fit(
            slow0,
            self.model,
            start,
            start.shifted(np.ones(self.model.m)),
            self.config.invariant.ergodicity_horizon,
            self.inv_cfg.dt,
            noise,
            taming=self.inv_cfg.taming,
            n_projections=self.inv_cfg.n_projections,
        )
        self._writer.write_csv("invariant.csv", [f"y{j}" for j in range(self.model.m)], pts.tolist())
        self._writer.write_csv("ergodicity.csv", ["t", "w2"], zip(fit.times, fit.distances))
        return {
            "converged": inv.converged,
            "w2_residual": finite_or_none(inv.w2_residual),
            "burn_in_time": inv.burn_in_time,
            "invariant_mean": pts.mean(axis=0).tolist(),
            "invariant_m2": moment(inv.measure, 2),
            "ergodicity_rate": fit.rate,
            "ergodicity_fit_points": fit.n_fit,
        }

    def _closed_form_rate(self, closed: LinearClosedForm, pert: PerturbationConfig) -> float:
        x0 = float(self.x0[0])

        def phi(t: float) -> float:
            return x0 * math.exp(-closed.a * t) + float(pert.shape(np.array([t]))[0][0])

        def dphi(t: float) -> float:
            return -closed.a * x0 * math.exp(-closed.a * t) + float(pert.shape(np.array([t]))[1][0])

        return closed.rate(phi, dphi, self.sim.horizon)

    def _run_ldp_rate(self) -> Dict[str, Any]:
        ldp = self.config.ldp
        averaged = solve_averaged(self.x0, self.model, self.sim.horizon, ldp.averaged_dt, self.inv_cfg, scheme=ldp.scheme)
        times = averaged.times
        closed = LinearClosedForm.from_model(self.model) if self.model.name == "linear" else None

        baseline = rate_functional(averaged.path, averaged, self.model, defect_correction=ldp.defect_correction)
        rows, evaluations = [], []
        for index, pert in enumerate(ldp.perturbations):
            psi, _ = pert.shape(times)
            result = rate_functional(
                averaged.path + psi[:, None], averaged, self.model, defect_correction=ldp.defect_correction
            )
            exact = self._closed_form_rate(closed, pert) if closed is not None else math.nan
            rows.append([index, pert.kind, pert.amplitude, pert.frequency, result.value, exact])
            evaluations.append({"index": index, **result.as_dict()})
        exit_rows, exit_headline = self._exit_rates(averaged) if ldp.exit is not None else ([], None)

        self._writer.write_csv("rate.csv", ["index", "kind", "amplitude", "frequency", "value", "closed_form"], rows)
        self._writer.write_json(
            "rate.json",
            {"times": times, "averaged_path": averaged.path, "baseline": baseline.value, "evaluations": evaluations},
        )
        headline: Dict[str, Any] = {
            "averaged_path_rate": baseline.value,
            "rates": [finite_or_none(r[4]) for r in rows],
            "closed_forms": [finite_or_none(r[5]) for r in rows],
        }
        if exit_headline is not None:
            header = ["epsilon", "radius", "hits", "total", "probability", "mc_rate", "action", "closed_form", "tau"]
            self._writer.write_csv("exit_rate.csv", header, exit_rows)
            headline["exit"] = exit_headline
        return headline

    def _exit_rates(self, fine: AveragedPath) -> Tuple[List[List[Any]], List[Dict[str, Any]]]:
        """Monte Carlo exit rates on the macro grid against the searched minimal action."""
        exit_cfg = self.config.ldp.exit
        coarse = solve_averaged(self.x0, self.model, self.sim.horizon, self.sim.dt_macro, self.inv_cfg)
        rows, out = [], []
        for eps, radius in zip(exit_cfg.epsilons, exit_cfg.radii):
            ts = TimeScales(eps, self.ts.delta, self.ts.separation)
            est = exit_probability(self.model, ts, self.sim, self.x0, radius, coarse)
            action = exit_action_search(fine, self.model, radius, n_tau=exit_cfg.n_tau)
            rows.append(
                [eps, radius, est.hits, est.total, est.probability, est.rate, action.value, action.closed_form, action.tau]
            )
            out.append(
                {
                    "epsilon": eps,
                    "radius": radius,
                    "mc_rate": finite_or_none(est.rate),
                    "action": finite_or_none(action.value),
                    "closed_form": action.closed_form,
                }
            )
        return rows, out

    def _run_controlled_run(self) -> Dict[str, Any]:
        ctrl = self.config.control
        tail = self.ts.separation if ctrl.tail is None else ctrl.tail
        width = self.model.d1 + self.model.d2
        value = np.zeros(width) if ctrl.value is None else np.asarray(ctrl.value, dtype=float)
        if value.size != width:
            raise ConfigError(f"control value needs {width} entries, got {value.size}")
        control = ControlPath.constant(value, self.sim.horizon + tail, self.sim.dt_macro, self.model.d1, self.model.d2)
        run = controlled_simulate(
            self.model,
            self.ts,
            control,
            self.sim,
            self.x0,
            share_companion_noise=ctrl.share_companion_noise,
            admissible_bound=ctrl.admissible_bound,
            tail=tail,
        )
        occ = occupation_measure(run, thinning=ctrl.thinning)

        horizon = self.sim.horizon
        grid = run.path.times[run.path.times <= horizon + 1e-12]
        mass_rows = [[t, occ.time_mass(t)] for t in grid]
        mass_error = max(abs(m - t) for t, m in mass_rows)

        late = occ.y_marginal(horizon - self.ts.separation, horizon)
        k_end = int(round(horizon / run.dt_macro))
        frozen = invariant_measure(run.companion.slow_at(k_end), self.model, self.inv_cfg)
        late_w2 = float(wasserstein2(late, frozen.measure, n_projections=self.inv_cfg.n_projections))

        atoms, masses = occ.h_marginal()
        counts, edges = occ.y_histogram(bins=ctrl.histogram_bins)
        # rep 0 is the controlled pair, rep 1 its companion
        self._writer.write_csv(
            "trajectory.csv", _trajectory_header(self.model), _trajectory_rows([run.path, run.companion])
        )
        self._writer.write_csv("occupation_time.csv", ["t", "mass"], mass_rows)
        self._writer.write_csv(
            "occupation_h.csv",
            [f"h{j}" for j in range(width)] + ["mass"],
            [[*a, w] for a, w in zip(atoms, masses)],
        )
        self._writer.write_csv(
            "occupation_y.csv", ["left", "right", "mass"], zip(edges[:-1], edges[1:], counts)
        )
        return {
            "control_energy": control.energy,
            "total_mass": occ.total_mass,
            "time_mass_error": mass_error,
            "late_window_w2": late_w2,
            "frozen_converged": frozen.converged,
        }

    def _run_probe(self) -> Dict[str, Any]:
        probe = self.config.probe
        sampler = GaussianProbeSampler(
            self.model.n,
            self.model.m,
            x_radius=probe.x_radius,
            y_radius=probe.y_radius,
            ensemble_size=probe.ensemble_size,
            ensemble_scale=probe.ensemble_scale,
        )
        report = assumption_probe(self.model, sampler, probe.n_samples, seed=self.config.seed)
        self._writer.write_json("probe.json", report.as_dict())
        return {"ok": report.ok, "violations": report.violations, "issues": report.issues}


def replay(summary_path: Path | str, threads: Optional[int] = None) -> List[str]:
    """Re-run a recorded experiment and check its artefacts byte for byte."""
    summary_path = Path(summary_path)
    summary = RunSummary.read(summary_path)
    try:
        config = ExperimentConfig.model_validate(summary.config)
    except ValidationError as err:
        raise ConfigError(f"recorded config no longer validates:\n{err}") from err
    if config.config_hash() != summary.config_hash:
        raise ConfigError("recorded config does not match its hash")
    with tempfile.TemporaryDirectory(prefix="mvscale-replay-") as tmp:
        ExperimentRunner(config, tmp, threads or summary.threads).run()
        checked = compare_artifacts(summary_path.parent, Path(tmp), summary.artifacts)
    logger.info("replay of {} matched {} artefacts", summary_path, len(checked))
    return checked
