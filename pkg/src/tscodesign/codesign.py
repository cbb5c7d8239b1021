"""Nested co-design orchestration.

For each candidate design the pipeline runs geometry derivation, trim and
coefficient extraction, per-design surrogate fitting, the four-mission
boundary-condition and trajectory optimizations, feedback-gain tuning
against the stochastic emulator, and Monte-Carlo uncertainty propagation of
the summed-mission thrust integral. The outer loop is fail-safe
multi-objective Bayesian optimization over (mean, variance) of that cost;
any stage failure marks the design "failed" with a stage tag and feeds the
classifier.

Ablation modes reuse the same ledger schema:

* "no-emulator": gain tuning skipped, closed loop flown on the phi-theory
  plant with baseline gains, single objective (mean only).
* "static": no closed-loop stage at all; the objective is the open-loop
  thrust integral of the optimized trajectories.

Both ablations are post-checked by running the emulator-based gain tuning
on their winning design.

All randomness flows from one master seed through named streams keyed by
(master_seed, evaluation index, mission index, episode index, stream id),
so results are bit-identical across reruns and worked-thread counts.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import aero, bo, gp
from .control import GAIN_BOUNDS, Gains, HifiPlant, LofiPlant, ReferenceTrajectory, simulate_closed_loop
from .dynamics import EnvConstants
from .geometry import DESIGN_BOUNDS, DesignVector, TrimError, derive_params
from .trajopt import Mission, MissionInfeasibleError, OcpError, solve_mission, standard_missions

MODES = ("codesign", "no-emulator", "static")
FAILURE_STAGES = ("trim", "surrogate", "bc", "ocp", "fcp", "episode")

# named seed streams
_STREAM_SURROGATE = 0
_STREAM_FCP_EPISODE = 1
_STREAM_UP_EPISODE = 2
_STREAM_FCP_BO = 3
_STREAM_CDP_BO = 4
_STREAM_GP_FIT = 5


class StageFailure(RuntimeError):
    """A pipeline stage failed; carries the ledger stage tag."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class CodesignConfig:
    """Budgets, stochasticity, and mode of one co-design run."""

    free_variables: tuple = ("c_sym", "y_tip", "f_con")
    mode: str = "codesign"
    doe_size: int | None = None  # default 11 d - 5
    max_iterations: int = 200
    k_ei: float = 1e-3
    episodes: int = 8  # Monte-Carlo episodes of the uncertainty propagation
    fcp_doe_size: int = 13
    fcp_iterations: int = 10
    # gain tuning flies the same seeded episode set the uncertainty
    # propagation will use (common random numbers); None = episodes
    fcp_episodes: int | None = None
    emulator: aero.EmulatorConfig = aero.EmulatorConfig()
    missions: tuple = ()
    master_seed: int = 0
    workers: int = 1
    surrogate_budget: gp.FitBudget = gp.SMALL_BUDGET
    gp_budget: gp.FitBudget = gp.SMALL_BUDGET
    ga_pop: int = 50
    ga_generations: int = 80

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        unknown = set(self.free_variables) - set(DESIGN_BOUNDS)
        if unknown:
            raise ValueError(f"unknown design variables: {sorted(unknown)}")
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")

    def resolved_missions(self) -> list[Mission]:
        return list(self.missions) if self.missions else standard_missions()

    def design_box(self):
        lo = np.array([DESIGN_BOUNDS[v][0] for v in self.free_variables])
        hi = np.array([DESIGN_BOUNDS[v][1] for v in self.free_variables])
        return lo, hi

    def design_from_point(self, x) -> DesignVector:
        base = DesignVector.baseline()
        return base.with_values(**dict(zip(self.free_variables, map(float, x))))

    def baseline_point(self) -> np.ndarray:
        base = DesignVector.baseline()
        return np.array([getattr(base, v) for v in self.free_variables])


@dataclass
class DesignOutcome:
    """Everything recorded about one design evaluation."""

    index: int
    design: DesignVector
    status: str  # "ok" | "failed"
    stage: str | None = None
    message: str = ""
    objectives: np.ndarray | None = None
    mean: float = np.nan
    variance: float = np.nan
    gains: Gains | None = None
    missions: dict = field(default_factory=dict)
    episode_costs: list = field(default_factory=list)
    wall_time: float = 0.0

    def ledger_record(self) -> dict:
        rec = {
            "index": self.index,
            "design": {k: float(v) for k, v in zip(self.design.__dataclass_fields__, self.design.to_array())},
            "status": self.status,
            "stage": self.stage,
            "mean": None if np.isnan(self.mean) else self.mean,
            "variance": None if np.isnan(self.variance) else self.variance,
            "gains": None if self.gains is None else {k: float(v) for k, v in zip(GAIN_BOUNDS, self.gains.to_array())},
            "missions": self.missions,
            "wall_time": round(self.wall_time, 3),
        }
        return rec


def _solve_mission_task(args):
    mission, params = args
    return solve_mission(mission, params)


def _parallel_map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _episode_seed(cfg: CodesignConfig, eval_index: int, mission_index: int,
                  episode_index: int, stream: int):
    return (cfg.master_seed, eval_index, mission_index, episode_index, stream)


def _mission_references(params, solutions, env) -> list[ReferenceTrajectory]:
    return [ReferenceTrajectory.from_spline(sol.traj, params, env) for sol in solutions]


def _fly_missions(cfg, params, references, plant, gains, eval_index, stream, n_episodes, env):
    """Per-episode summed-mission costs; StageFailure("episode") on divergence.

    Returns (cdp_costs, fcp_costs) arrays of length n_episodes.
    """
    cdp = np.zeros(n_episodes)
    fcp = np.zeros(n_episodes)
    for m_i, ref in enumerate(references):
        if cfg.emulator is not None and getattr(plant, "kind", "lofi") == "hifi":
            eps = tuple(
                cfg.emulator.episode(_episode_seed(cfg, eval_index, m_i, e_i, stream))
                for e_i in range(n_episodes)
            )
        else:
            eps = tuple(aero.STILL_AIR for _ in range(n_episodes))
        logs = simulate_closed_loop(params, ref, gains, plant, episodes=eps, env=env)
        for e_i, log in enumerate(logs):
            if log.failed:
                raise StageFailure("episode", f"mission {m_i} episode {e_i} diverged")
            cdp[e_i] += log.cost_cdp
            fcp[e_i] += log.cost_fcp
    return cdp, fcp


def tune_gains(cfg: CodesignConfig, params, references, plant, eval_index: int,
               env: EnvConstants = EnvConstants()):
    """Single-objective EGO over the six gains, minimizing the mean summed
    tracking-plus-command-rate cost across seeded emulator episodes."""
    lo = np.array([GAIN_BOUNDS[k][0] for k in GAIN_BOUNDS])
    hi = np.array([GAIN_BOUNDS[k][1] for k in GAIN_BOUNDS])

    n_eps = cfg.episodes if cfg.fcp_episodes is None else cfg.fcp_episodes
    stream = _STREAM_UP_EPISODE if cfg.fcp_episodes is None else _STREAM_FCP_EPISODE

    def evaluator(x):
        gains = Gains.from_array(x)
        try:
            _, fcp = _fly_missions(cfg, params, references, plant, gains,
                                   eval_index, stream, n_eps, env)
        except StageFailure:
            return None
        return np.array([float(np.mean(fcp))])

    config = bo.BOConfig(
        lower=lo, upper=hi, n_objectives=1,
        doe_size=cfg.fcp_doe_size, max_iterations=cfg.fcp_iterations,
        k_ei=cfg.k_ei, noisy=True, fit_budget=cfg.gp_budget,
        ga_pop=cfg.ga_pop, ga_generations=cfg.ga_generations,
    )
    try:
        archive = bo.ego_loop(
            evaluator, config,
            seed=(cfg.master_seed, eval_index, _STREAM_FCP_BO),
            doe_x=Gains.baseline().to_array()[None],
        )
    except bo.AllFailedError as exc:
        raise StageFailure("fcp", str(exc)) from exc

    X, Y = archive.feasible_XY()
    if len(X) >= 3:
        model = gp.fit_gpr(X, Y[:, 0], budget=cfg.gp_budget,
                           rng=(cfg.master_seed, eval_index, _STREAM_GP_FIT))
        mu, _ = model.predict(X)
        best = int(np.argmin(mu))
    else:
        best = int(np.argmin(Y[:, 0]))
    return Gains.from_array(X[best]), archive


def propagate_uncertainty(cfg: CodesignConfig, params, references, plant, gains,
                          eval_index: int, env: EnvConstants = EnvConstants()):
    """Monte-Carlo mean and (1/N) sample variance of the summed thrust
    integral over seeded episodes."""
    cdp, _ = _fly_missions(cfg, params, references, plant, gains,
                           eval_index, _STREAM_UP_EPISODE, cfg.episodes, env)
    mean = float(np.mean(cdp))
    variance = float(np.mean((cdp - mean) ** 2))
    return mean, variance, cdp


def evaluate_design(cfg: CodesignConfig, d: DesignVector, eval_index: int = 0,
                    env: EnvConstants = EnvConstants()) -> DesignOutcome:
    """Run the full per-design pipeline; never raises for stage failures."""
    t0 = time.time()
    outcome = DesignOutcome(index=eval_index, design=d, status="failed")
    try:
        provider = aero.SyntheticCoefficientModel(d)
        try:
            params = derive_params(d, provider, env)
        except TrimError as exc:
            raise StageFailure("trim", str(exc)) from exc

        try:
            missions = cfg.resolved_missions()
            solutions = _parallel_map(
                _solve_mission_task, [(m, params) for m in missions], cfg.workers
            )
        except MissionInfeasibleError as exc:
            raise StageFailure("bc", str(exc)) from exc
        except OcpError as exc:
            raise StageFailure("ocp", str(exc)) from exc
        outcome.missions = {
            sol.mission.kind: {
                "T": sol.bc.T,
                "thrust_integral": sol.thrust_integral,
                "objective": sol.objective,
                "coefficients": sol.traj.coeffs.tolist(),
            }
            for sol in solutions
        }
        references = _mission_references(params, solutions, env)

        if cfg.mode == "static":
            total = float(sum(sol.thrust_integral for sol in solutions))
            outcome.status = "ok"
            outcome.mean = total
            outcome.variance = 0.0
            outcome.objectives = np.array([total])
            return outcome

        if cfg.mode == "no-emulator":
            plant = LofiPlant(params, env)
            gains = Gains.baseline()
            cdp, _ = _fly_missions(cfg, params, references, plant, gains,
                                   eval_index, _STREAM_UP_EPISODE, 1, env)
            outcome.status = "ok"
            outcome.gains = gains
            outcome.mean = float(cdp[0])
            outcome.variance = 0.0
            outcome.objectives = np.array([outcome.mean])
            return outcome

        # full pipeline: emulator surrogates, gain tuning, uncertainty propagation
        try:
            surrogates = aero.fit_design_surrogate(
                provider, rng=(cfg.master_seed, eval_index, _STREAM_SURROGATE),
                budget=cfg.surrogate_budget,
            )
        except gp.GPFitError as exc:
            raise StageFailure("surrogate", str(exc)) from exc
        plant = HifiPlant(surrogates, params, env)
        gains, _ = tune_gains(cfg, params, references, plant, eval_index, env)
        outcome.gains = gains
        mean, variance, costs = propagate_uncertainty(
            cfg, params, references, plant, gains, eval_index, env
        )
        outcome.status = "ok"
        outcome.mean = mean
        outcome.variance = variance
        outcome.episode_costs = costs.tolist()
        outcome.objectives = np.array([mean, variance])
        return outcome
    except StageFailure as exc:
        outcome.stage = exc.stage
        outcome.message = str(exc)
        return outcome
    finally:
        outcome.wall_time = time.time() - t0


@dataclass
class CdpResult:
    """Archive, per-design outcomes, and the nondominated set."""

    config: CodesignConfig
    archive: bo.ParetoArchive
    outcomes: list
    post_check: dict | None = None

    def ledger(self) -> list[dict]:
        records = []
        for rec, out in zip(self.archive.records, self.outcomes):
            entry = out.ledger_record()
            entry.update(
                phase=rec.phase,
                acquisition=None if np.isnan(rec.acquisition) else rec.acquisition,
                feasible_probability=(
                    None if np.isnan(rec.feasible_probability) else rec.feasible_probability
                ),
                hypervolume=None if np.isnan(rec.hypervolume) else rec.hypervolume,
            )
            records.append(entry)
        return records

    def front_outcomes(self) -> list:
        ok = [o for o in self.outcomes if o.status == "ok"]
        if not ok:
            return []
        Y = np.array([o.objectives for o in ok])
        mask = bo.pareto_front_mask(Y)
        return [o for o, m in zip(ok, mask) if m]

    def baseline_outcome(self):
        return self.outcomes[0] if self.outcomes else None


def _run_bo(cfg: CodesignConfig, n_objectives: int, noisy: bool) -> CdpResult:
    lo, hi = cfg.design_box()
    outcomes: list[DesignOutcome] = []

    def evaluator(x):
        d = cfg.design_from_point(x)
        outcome = evaluate_design(cfg, d, eval_index=len(outcomes))
        outcomes.append(outcome)
        return None if outcome.status != "ok" else outcome.objectives

    config = bo.BOConfig(
        lower=lo, upper=hi, n_objectives=n_objectives,
        doe_size=cfg.doe_size, max_iterations=cfg.max_iterations,
        k_ei=cfg.k_ei, noisy=noisy, fit_budget=cfg.gp_budget,
        ga_pop=cfg.ga_pop, ga_generations=cfg.ga_generations,
    )
    archive = bo.ego_loop(
        evaluator, config,
        seed=(cfg.master_seed, _STREAM_CDP_BO),
        doe_x=cfg.baseline_point()[None],  # baseline always in the DoE
    )
    return CdpResult(config=cfg, archive=archive, outcomes=outcomes)


def run_cdp(cfg: CodesignConfig) -> CdpResult:
    """Fail-safe multi-objective co-design over (mean, variance)."""
    if cfg.mode != "codesign":
        raise ValueError("run_cdp requires mode='codesign'; see run_ablation")
    return _run_bo(cfg, n_objectives=2, noisy=True)


def run_ablation(mode: str, cfg: CodesignConfig) -> CdpResult:
    """Single-objective ablation run plus emulator post-check of the winner."""
    if mode not in ("no-emulator", "static"):
        raise ValueError("ablation mode must be 'no-emulator' or 'static'")
    cfg = replace(cfg, mode=mode)
    result = _run_bo(cfg, n_objectives=1, noisy=False)

    winner = result.archive.best_single()
    outcome = result.outcomes[winner.index]
    post = {"winner_index": winner.index, "design": outcome.ledger_record()["design"]}
    check_cfg = replace(cfg, mode="codesign")
    env = EnvConstants()
    try:
        provider = aero.SyntheticCoefficientModel(outcome.design)
        params = derive_params(outcome.design, provider, env)
        solutions = [solve_mission(m, params) for m in cfg.resolved_missions()]
        references = _mission_references(params, solutions, env)
        surrogates = aero.fit_design_surrogate(
            provider, rng=(cfg.master_seed, winner.index, _STREAM_SURROGATE),
            budget=cfg.surrogate_budget,
        )
        plant = HifiPlant(surrogates, params, env)
        gains, _ = tune_gains(check_cfg, params, references, plant, winner.index, env)
        mean, variance, _ = propagate_uncertainty(
            check_cfg, params, references, plant, gains, winner.index, env
        )
        post.update(emulator_tuning="ok", mean=mean, variance=variance,
                    gains={k: float(v) for k, v in zip(GAIN_BOUNDS, gains.to_array())})
    except (StageFailure, TrimError, MissionInfeasibleError, OcpError) as exc:
        stage = exc.stage if isinstance(exc, StageFailure) else type(exc).__name__
        post.update(emulator_tuning="failed", stage=stage, message=str(exc))
    result.post_check = post
    return result
