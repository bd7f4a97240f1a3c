"""Experiment pipelines driven by an ``ExperimentConfig``.

Each pipeline returns a ``RunResult`` holding sample batches, a flat metrics
dict keyed ``"sampler/method/omega"`` and a list of solver-trace summaries.
Writing files is left to the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ExperimentConfig
from .guidance import (
    Characteristic,
    ClassifierFree,
    GuidanceSpec,
    SolverParams,
    Unguided,
    characteristic_eps_t,
    classifier_free_eps,
)
from .magnet import MagnetParams, mean_magnetization, mh_chain, omega_for_temperature
from .metrics import (
    bimodality_check,
    fit_gaussian,
    fit_gaussian_kl,
    magnet_nll,
    mixing_error_report,
    mixture_kl,
)
from .samplers import SampleBatch, SamplerKind, run_sampler
from .schedule import NoiseSchedule, build_linear_schedule
from .score_models import GaussianModel, KernelDataset, KernelModel, MixtureModel, one_hot

__all__ = ["RunResult", "run_experiment", "run_key", "guidance_spec", "build_schedule"]

# tags for deriving independent sub-seeds from the top-level seed
_TAG_MH = 1
_TAG_SUBSAMPLE = 2
_TAG_PROBES = 3
_TAG_MC = 4


@dataclass
class RunResult:
    experiment: str
    batches: dict = field(default_factory=dict)     # key -> SampleBatch
    primary: str | None = None                      # key of the batch written to samples.csv
    metrics: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)      # file name -> (header, rows array)
    datasets: dict = field(default_factory=dict)    # file name -> KernelDataset


def run_key(sampler: SamplerKind, method: str, omega: float) -> str:
    return f"{sampler.label}/{method}/{omega:g}"


def subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg["schedule"]
    return build_linear_schedule(s["n"], s["b1"], s["b2"])


def guidance_spec(cfg: ExperimentConfig, omega: float | None = None, **changes) -> GuidanceSpec:
    g = dict(cfg["guidance"], **changes)
    params = SolverParams(
        gamma=g["gamma"], alpha=g["alpha"], epsilon_rms=g["epsilon_rms"],
        decay_D=g["decay_D"], anderson_m=g["anderson_m"],
    )
    return GuidanceSpec(
        omega=g["omega"] if omega is None else omega,
        projection=g["projection"],
        solver=g["solver"],
        params=params,
        max_iters=g["max_iters"],
        tolerance=g["tolerance"],
        warm_start=g["warm_start"],
    )


def sampler_kind(cfg: ExperimentConfig) -> SamplerKind:
    return SamplerKind(cfg["sampler"]["kind"], cfg["sampler"]["steps"])


def make_guide(method: str, model, cond, spec: GuidanceSpec, uncond=None):
    if method == "none":
        return Unguided(model, cond)
    if method == "cf":
        return ClassifierFree(model, cond, spec.omega, uncond)
    if method == "ch":
        return Characteristic(model, cond, spec, uncond)
    raise ValueError(f"unknown guidance method {method!r}")


def _methods(cfg: ExperimentConfig) -> list[str]:
    method = cfg["guidance"]["method"]
    if not cfg["run"]["paired"]:
        return [method]
    if method == "none":
        raise ConfigError("[guidance] method: a paired run needs method cf or ch")
    return ["cf", "ch"]


def trace_summary(key: str, batch: SampleBatch) -> dict | None:
    tr = batch.traces
    if not tr:
        return None
    per_traj = tr["per_trajectory"]
    iters = np.asarray(per_traj["total_iterations"])
    evals = np.asarray(per_traj["total_model_evals"])
    missed = np.asarray(per_traj["missed_steps"])
    return {
        "key": key,
        "per_step": {
            name: [s[name] for s in tr["per_step"]]
            for name in ("step", "mean_iterations", "max_iterations", "converged_fraction",
                         "mean_residual", "model_evals")
        },
        "per_trajectory": {
            "mean_total_iterations": float(iters.mean()),
            "max_total_iterations": int(iters.max()),
            "mean_model_evals": float(evals.mean()),
            "trajectories_with_missed_steps": int(np.count_nonzero(missed)),
        },
    }


def _sample_runs(cfg, model, cond, uncond, spec, result: RunResult, score) -> None:
    """Run every requested method with one sampler and seed; score each batch."""
    sampler = sampler_kind(cfg)
    B, seed = cfg["run"]["batch"], cfg["run"]["seed"]
    methods = _methods(cfg)
    for method in methods:
        guide = make_guide(method, model, cond, spec, uncond)
        batch = run_sampler(model, guide, sampler, B, seed)
        key = run_key(sampler, method, spec.omega)
        result.batches[key] = batch
        result.metrics[key] = score(batch)
        summary = trace_summary(key, batch)
        if summary is not None:
            result.traces.append(summary)
    result.primary = run_key(sampler, cfg["guidance"]["method"], spec.omega)
    if len(methods) == 2:
        result.metrics["paired"] = {
            "sampler": sampler.label,
            "seed": seed,
            "omega": spec.omega,
        }


def _paired_compare(result: RunResult, name: str, lower_is_better=True) -> None:
    pair = result.metrics.get("paired")
    if pair is None:
        return
    sampler, omega = pair["sampler"], pair["omega"]
    cf = result.metrics[f"{sampler}/cf/{omega:g}"][name]
    ch = result.metrics[f"{sampler}/ch/{omega:g}"][name]
    pair[f"{name}_cf"] = cf
    pair[f"{name}_ch"] = ch
    pair["ch_better"] = bool(ch < cf) if lower_is_better else bool(ch > cf)


# --- pipelines ---------------------------------------------------------------


def gaussian_experiment(cfg: ExperimentConfig) -> RunResult:
    schedule = build_schedule(cfg)
    model = GaussianModel(schedule)
    c = np.array(cfg["gaussian"]["c"])
    spec = guidance_spec(cfg)
    mean_t, cov_t = GaussianModel.guided_target(c, spec.omega)

    def score(batch):
        fit = fit_gaussian(batch.samples)
        return {
            "kl": fit_gaussian_kl(batch.samples, mean_t, cov_t),
            "mean": fit.mean.tolist(),
            "cov": fit.cov.tolist(),
            "cov_trace": float(np.trace(fit.cov)),
            "target_mean": mean_t.tolist(),
            "target_cov_trace": float(np.trace(cov_t)),
        }

    result = RunResult("gaussian")
    _sample_runs(cfg, model, c, None, spec, result, score)
    _paired_compare(result, "kl")
    return result


def mixture_experiment(cfg: ExperimentConfig) -> RunResult:
    schedule = build_schedule(cfg)
    model = MixtureModel(schedule)
    k = cfg["mixture"]["component"]
    spec = guidance_spec(cfg)
    mc_seed = subseed(cfg["run"]["seed"], _TAG_MC)

    def score(batch):
        r = mixture_kl(batch.samples, spec.omega, k, n_mc=cfg["mixture"]["n_mc"], seed=mc_seed)
        return {
            "kl": r.kl,
            "kl_stderr": r.stderr,
            "weights": r.weights.tolist(),
            "means": r.means.tolist(),
            "log_z": r.log_z,
        }

    result = RunResult("mixture")
    _sample_runs(cfg, model, one_hot(k), None, spec, result, score)
    _paired_compare(result, "kl")
    return result


def magnet_datasets(cfg: ExperimentConfig, temperatures) -> dict:
    """MH chains per temperature; each temperature gets its own seed."""
    mg = cfg["magnet"]
    params = MagnetParams(mg["m2"], mg["lam"], mg["K"], mg["Tc"])
    out = {}
    for T in temperatures:
        res = mh_chain(
            T, params, n_samples=mg["mh_samples"], thin=mg["mh_thin"], burn_in=mg["mh_burn_in"],
            step_width=mg["mh_step_width"], seed=_mh_seed(cfg["run"]["seed"], T),
            n_chains=mg["mh_chains"], L=mg["lattice"],
        )
        out[float(T)] = res
    return out


def _mh_seed(seed: int, T: float) -> int:
    # keyed by temperature so a chain does not depend on which others are run
    return int(np.random.SeedSequence([seed, _TAG_MH, int(round(T * 1000))]).generate_state(1)[0])


def _bimodality_dict(values) -> dict:
    r = bimodality_check(values)
    ratio = r.peak_to_valley_ratio
    return {
        "peak_count": r.peak_count,
        "peak_to_valley_ratio": None if math.isnan(ratio) else ratio,
        "peak_locations": r.peak_locations,
    }


def magnet_experiment(cfg: ExperimentConfig) -> RunResult:
    mg = cfg["magnet"]
    L = mg["lattice"]
    params = MagnetParams(mg["m2"], mg["lam"], mg["K"], mg["Tc"])
    T, T1, T0 = mg["temperature"], mg["t1"], mg["t0"]
    files = {T1: mg["dataset_t1"], T0: mg["dataset_t0"]}
    need = [t for t in (T1, T0) if not files[t]] + [T]
    chains = magnet_datasets(cfg, need)
    rng = np.random.default_rng(subseed(cfg["run"]["seed"], _TAG_SUBSAMPLE))
    n = mg["dataset_size"]
    datasets = {}
    for label in (T1, T0):
        if files[label]:
            points = KernelDataset.load(files[label]).points
            if points.shape[1] != L * L:
                raise ConfigError(f"[magnet] dataset for T={label:g} has dim {points.shape[1]}, "
                                  f"expected {L * L}")
        else:
            points = chains[float(label)].fields.reshape(-1, L * L)
        pick = rng.choice(points.shape[0], min(n, points.shape[0]), replace=False)
        datasets[float(label)] = KernelDataset(points[pick])
    model = KernelModel(build_schedule(cfg), datasets, shape=(1, L, L))
    spec = guidance_spec(cfg, omega=omega_for_temperature(T, T1, T0))
    reference = chains[float(T)].fields
    ref_m = mean_magnetization(reference)

    def score(batch):
        fields = batch.samples.reshape(-1, L, L)
        return {
            "nll": magnet_nll(fields, T, reference, params),
            "magnetization": _bimodality_dict(mean_magnetization(fields)),
        }

    result = RunResult("magnet")
    _sample_runs(cfg, model, float(T1), float(T0), spec, result, score)
    _paired_compare(result, "nll")
    result.metrics["reference"] = {
        "temperature": T,
        "acceptance_rate": chains[float(T)].acceptance_rate,
        "magnetization": _bimodality_dict(ref_m),
    }
    rows = [np.column_stack([np.zeros(ref_m.size), ref_m])]
    names = ["reference"]
    for key, batch in result.batches.items():
        rows.append(np.column_stack([
            np.full(batch.samples.shape[0], len(names)),
            mean_magnetization(batch.samples.reshape(-1, L, L)),
        ]))
        names.append(key)
    result.tables["magnetization.csv"] = (
        "source,m  # source: " + ", ".join(f"{i}={k}" for i, k in enumerate(names)),
        np.concatenate(rows),
    )
    return result


def mh_experiment(cfg: ExperimentConfig) -> RunResult:
    mg = cfg["magnet"]
    temps = mg["temperatures"]
    chains = magnet_datasets(cfg, temps)
    result = RunResult("mh")
    rows = []
    for T, res in chains.items():
        m = mean_magnetization(res.fields)
        result.metrics[f"mh/T={T:g}"] = {
            "acceptance_rate": res.acceptance_rate,
            "mode_balance": res.mode_balance,
            "samples": int(res.fields.shape[0]),
            "magnetization": _bimodality_dict(m),
        }
        result.datasets[f"dataset_T{T:g}.{mg['dataset_format']}"] = KernelDataset(
            res.fields.reshape(res.fields.shape[0], -1)
        )
        rows.append(np.column_stack([np.full(m.size, T), m]))
    result.tables["magnetization.csv"] = ("temperature,m", np.concatenate(rows))
    return result


def diagnose_experiment(cfg: ExperimentConfig) -> RunResult:
    """Mixing error of CF over a sweep of scales and of CH at the configured scale."""
    d = cfg["diagnose"]
    model = GaussianModel(build_schedule(cfg))
    c = np.array(cfg["gaussian"]["c"])
    spec = guidance_spec(cfg)
    rng = np.random.default_rng(subseed(cfg["run"]["seed"], _TAG_PROBES))
    sig = rng.uniform(d["sigma_min"], d["sigma_max"], size=d["probes"])
    times = -np.log1p(-sig * sig)
    # probes from the guided target pushed forward to each probe time
    mean_t, cov_t = GaussianModel.guided_target(c, spec.omega)
    ab = np.exp(-times)[:, None]
    scale = np.sqrt(ab * cov_t[0, 0] + (1.0 - ab))
    probes = np.sqrt(ab) * mean_t + scale * rng.standard_normal((d["probes"], 2))

    def cf_field(omega):
        return lambda x, t: classifier_free_eps(model.eps_t(x, c, t), model.eps_t(x, None, t), omega)

    def ch_field(x, t):
        return characteristic_eps_t(x, c, t, model, spec)[0]

    result = RunResult("diagnose")
    for omega in d["omegas"]:
        rep = mixing_error_report(cf_field(omega), probes, times, fd=d["fd"])
        result.metrics[f"fp/cf/{omega:g}"] = {
            "e_m_norms": rep.e_m_norms, "max": max(rep.e_m_norms),
            "mean": float(np.mean(rep.e_m_norms)),
        }
    rep = mixing_error_report(ch_field, probes, times, fd=d["fd"])
    result.metrics[f"fp/ch/{spec.omega:g}"] = {
        "e_m_norms": rep.e_m_norms, "max": max(rep.e_m_norms),
        "mean": float(np.mean(rep.e_m_norms)),
    }
    result.metrics["probes"] = {"points": probes.tolist(), "times": times.tolist(),
                                "sigmas": sig.tolist(), "fd": d["fd"]}
    result.tables["samples.csv"] = (None, probes)
    return result


def iteration_locality(steps, mean_iterations, n: int, quantile: float = 0.9) -> dict:
    """Where the top-decile iteration counts sit on the step axis."""
    steps = np.asarray(steps)
    it = np.asarray(mean_iterations, dtype=np.float64)
    threshold = float(np.quantile(it, quantile))
    top = steps[it >= threshold]
    lo, hi = n / 4.0, 3.0 * n / 4.0
    return {
        "threshold": threshold,
        "top_steps": sorted(int(s) for s in top),
        "middle_half": [lo, hi],
        "in_middle": bool(np.all((top >= lo) & (top <= hi))),
    }


def iterstudy_experiment(cfg: ExperimentConfig) -> RunResult:
    """Per-step solver effort on the mixture for a sweep of tolerances."""
    schedule = build_schedule(cfg)
    model = MixtureModel(schedule)
    cond = one_hot(cfg["mixture"]["component"])
    sampler = sampler_kind(cfg)
    B, seed = cfg["run"]["batch"], cfg["run"]["seed"]
    result = RunResult("iterstudy")
    all_in = True
    for tol in cfg["iterstudy"]["tolerances"]:
        spec = guidance_spec(cfg, tolerance=tol)
        guide = Characteristic(model, cond, spec)
        batch = run_sampler(model, guide, sampler, B, seed)
        key = f"{run_key(sampler, 'ch', spec.omega)}/tol={tol:g}"
        summary = trace_summary(key, batch)
        result.traces.append(summary)
        loc = iteration_locality(summary["per_step"]["step"],
                                 summary["per_step"]["mean_iterations"], schedule.n)
        all_in &= loc["in_middle"]
        result.metrics[key] = dict(
            loc, mean_iterations=float(np.mean(summary["per_step"]["mean_iterations"])),
        )
        result.batches[key] = batch
        if result.primary is None:
            result.primary = key
    result.metrics["locality"] = {"all_in_middle": bool(all_in)}
    return result


PIPELINES = {
    "gaussian": gaussian_experiment,
    "mixture": mixture_experiment,
    "magnet": magnet_experiment,
    "mh": mh_experiment,
    "diagnose": diagnose_experiment,
    "iterstudy": iterstudy_experiment,
}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    if cfg["run"]["paired"] and cfg.experiment not in ("gaussian", "mixture", "magnet"):
        raise ConfigError(f"[run] paired: not meaningful for the {cfg.experiment} experiment")
    return PIPELINES[cfg.experiment](cfg)
