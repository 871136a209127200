"""Experiment runner: seeded trials, trace CSVs, summaries, diagnostics JSON.

``ubvi run`` executes one (target, method) experiment over seeded trials
and writes one trace CSV, one mixture JSON, and one diagnostics JSON per
trial plus a quartile summary CSV.  ``ubvi summarize`` merges trace CSVs
(possibly across methods) into a single summary, normalizing energy
distances by the VI median when VI traces are present.

Exit codes: 0 success, 1 usage error, 2 when any trial aborted on a
degenerate component optimization.
"""

from __future__ import annotations

import argparse
import csv
import json
import multiprocessing
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import diagnostics as diag
from .boosting import RunTrace, UbviConfig, run_ubvi, trace_to_csv
from .klboost import BviConfig, DensityMixture, run_bvi, run_vi
from .expfam import GaussComponent
from .mixture import empty_mixture, extend, mixture_to_json
from .stochopt import AdamConfig
from .targets import (
    TargetDensity,
    load_csv_dataset,
    make_banana,
    make_cauchy,
    make_gauss_mixture,
    make_logistic,
    synth_logistic_data,
)

__all__ = ["ExperimentConfig", "run_experiment", "summarize", "main"]

TARGETS = ("cauchy", "banana", "gauss-mix", "logistic")
METHODS = ("ubvi", "bvi", "bvi-plus", "vi")
ENERGY_SAMPLES = 2000


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    target: str = "gauss-mix"
    method: str = "ubvi"
    n_components: int = 2
    trials: int = 20
    seed: int = 0
    grad_samples: int = 1000
    est_samples: int = 10_000
    opt_iters: int = 10_000
    init_trials: int = 10_000
    reg_schedule: str = "invsqrt"
    base_step: float = 1.0
    weight_opt_iters: int = 2000
    weight_samples: int = 1000
    diag_samples: int = 10_000
    jobs: int = 1
    out: str = "results"

    def validate(self):
        base = self.target.split(":", 1)[0]
        if base not in TARGETS and base != "logistic-csv":
            raise UsageError(f"unknown target {self.target!r}")
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if self.reg_schedule != "invsqrt":
            kind, _, val = self.reg_schedule.partition(":")
            if kind != "fixed" or not val:
                raise UsageError(f"bad reg schedule {self.reg_schedule!r}")
            float(val)


def build_target(cfg: ExperimentConfig, trial_seed: int) -> TargetDensity:
    name = cfg.target
    if name == "cauchy":
        return make_cauchy()
    if name == "banana":
        return make_banana(b=0.1, sigma1_sq=100.0)
    if name == "gauss-mix":
        return make_gauss_mixture([0.5, 0.5], [0.0, 25.0], [1.0, 5.0])
    if name == "logistic":
        return make_logistic(synth_logistic_data(trial_seed, n=20, dim=2))
    if name.startswith("logistic-csv:"):
        return make_logistic(load_csv_dataset(name.split(":", 1)[1], seed=trial_seed))
    raise UsageError(f"unknown target {name!r}")


def _reg_schedule_fn(spec: str):
    if spec == "invsqrt":
        return lambda n: 1.0 / np.sqrt(n)
    value = float(spec.split(":", 1)[1])
    return lambda n: value


def _adam(cfg: ExperimentConfig) -> AdamConfig:
    return AdamConfig(
        iters=cfg.opt_iters, base_step=cfg.base_step, grad_samples=cfg.grad_samples
    )


def run_trial(cfg: ExperimentConfig, trial: int) -> RunTrace:
    """Run one seeded trial; returns its trace after writing trial files."""
    trial_seed = cfg.seed + trial
    target = build_target(cfg, trial_seed)
    if cfg.method == "ubvi":
        ucfg = UbviConfig(
            n_components=cfg.n_components,
            init_trials=cfg.init_trials,
            est_samples=cfg.est_samples,
            grad_samples=cfg.grad_samples,
            adam=_adam(cfg),
            seed=trial_seed,
            diag_samples=cfg.diag_samples,
        )
        approx, trace = run_ubvi(target, ucfg)
    elif cfg.method in ("bvi", "bvi-plus"):
        bcfg = BviConfig(
            n_components=cfg.n_components,
            reg_schedule=_reg_schedule_fn(cfg.reg_schedule),
            stabilization_eps=1e-3 if cfg.method == "bvi-plus" else 0.0,
            adam=_adam(cfg),
            weight_opt_iters=cfg.weight_opt_iters,
            weight_samples=cfg.weight_samples,
            init_trials=cfg.init_trials,
            seed=trial_seed,
            diag_samples=cfg.diag_samples,
        )
        approx, trace = run_bvi(target, bcfg)
    else:
        comp, trace = run_vi(target, _adam(cfg), trial_seed)
        approx = DensityMixture((comp,), np.ones(1))

    if target.exact_sampler is None:
        _attach_energy(cfg, target, trace, trial_seed)

    tag = f"{cfg.method}_t{trial:03d}"
    os.makedirs(cfg.out, exist_ok=True)
    trace_to_csv(trace, os.path.join(cfg.out, f"trace_{tag}.csv"))
    with open(os.path.join(cfg.out, f"mixture_{tag}.json"), "w") as fh:
        json.dump(_approx_to_json(approx), fh, indent=1)
    diagnostics = _final_diagnostics(cfg, target, approx, trace, trial_seed)
    with open(os.path.join(cfg.out, f"diag_{tag}.json"), "w") as fh:
        json.dump(diagnostics, fh, indent=1)
    return trace


def _approx_to_json(approx) -> dict:
    if approx is None:
        return {"kind": "plain", "components": [], "weights": []}
    if isinstance(approx, DensityMixture):
        return {
            "kind": "plain",
            "components": [
                {"mean": c.mean.tolist(), "log_var": c.log_var.tolist()}
                for c in approx.components
            ],
            "weights": approx.weights.tolist(),
        }
    return mixture_to_json(approx)


def _rebuild_partial(trace: RunTrace, upto: int):
    """Mixture after ``upto`` boosting iterations, from the trace records."""
    comps = [
        GaussComponent(np.asarray(c["mean"]), np.asarray(c["log_var"]))
        for c in trace.components[:upto]
        if c
    ]
    weights = trace.weights[upto - 1]
    if len(comps) == 0:
        return None
    if trace.method == "ubvi":
        m = empty_mixture()
        for c in comps:
            m = extend(m, c)
        return m.with_weights(weights)
    return DensityMixture(tuple(comps), weights)


def _attach_energy(cfg: ExperimentConfig, target, trace: RunTrace, trial_seed: int):
    """Per-iteration energy distance to the reference sampler (no exact draws)."""
    ref = diag.reference_sampler(target, ENERGY_SAMPLES, seed=trial_seed + 90_001)
    rng = np.random.default_rng(trial_seed + 90_002)
    for k in range(len(trace.n)):
        q = _rebuild_partial(trace, k + 1)
        if q is None:
            trace.energy.append(float("nan"))
            continue
        draws = q.sample(int(rng.integers(2**62)), ENERGY_SAMPLES)
        trace.energy.append(diag.energy_distance(draws, ref.samples))


def _final_diagnostics(cfg, target, approx, trace: RunTrace, trial_seed: int) -> dict:
    out = {
        "hell_hat": None,
        "hell_tilde": None,
        "fwd_kl": None,
        "rev_kl": None,
        "tv": None,
        "w1": None,
        "energy": None,
        "ess": None,
        "n_samples": cfg.diag_samples,
        "seed": trial_seed,
    }
    if approx is None or (isinstance(approx, DensityMixture) and approx.n == 0):
        return out
    n = cfg.diag_samples
    snap = diag.divergence_snapshot(target, approx, trial_seed + 70_001, n)
    for key in ("hell_hat", "hell_tilde", "fwd_kl", "rev_kl"):
        val = snap[key]
        out[key] = None if not np.isfinite(val) else float(val)
    est = diag.importance_estimates(
        target, approx, lambda x: np.ones(x.shape[0]), n, trial_seed + 70_002
    )
    out["ess"] = est.ess
    if target.quad_grid is not None and target.log_norm is not None:
        out["tv"] = diag.tv_quadrature(
            lambda x: np.asarray(target.log_p(x)) - target.log_norm,
            approx.log_pdf,
            target.quad_grid,
        )
    if target.exact_sampler is not None:
        p_draws = target.exact_sampler(trial_seed + 70_003, ENERGY_SAMPLES)
        q_draws = approx.sample(trial_seed + 70_004, ENERGY_SAMPLES)
        out["energy"] = diag.energy_distance(p_draws, q_draws)
        if target.dim == 1:
            out["w1"] = diag.wasserstein1_1d(p_draws, q_draws)
    elif trace.energy:
        last = trace.energy[-1]
        out["energy"] = None if not np.isfinite(last) else float(last)
    return out


def _write_target_density(cfg: ExperimentConfig, target) -> None:
    """Density curve CSV for 1-D targets (consumed by the figure renderer)."""
    if target.quad_grid is None or target.quad_grid.ndim != 1 or target.log_norm is None:
        return
    ax = target.quad_grid.axes[0]
    keep = ax[np.abs(ax) <= 1e3]
    dens = np.exp(np.asarray(target.log_p(keep[:, None])) - target.log_norm)
    path = os.path.join(cfg.out, "target_density.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "density"])
        for xv, dv in zip(keep, dens):
            writer.writerow([repr(float(xv)), repr(float(dv))])


def _trial_worker(args: tuple) -> tuple[bool, str]:
    cfg_dict, trial = args
    trace = run_trial(ExperimentConfig(**cfg_dict), trial)
    return trace.aborted, ""


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run all trials, write the summary, return the process exit code."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    _write_target_density(cfg, build_target(cfg, cfg.seed))
    jobs = max(1, cfg.jobs)
    tasks = [(asdict(cfg), t) for t in range(cfg.trials)]
    if jobs == 1:
        results = [_trial_worker(task) for task in tasks]
    else:
        with multiprocessing.Pool(jobs) as pool:
            results = pool.map(_trial_worker, tasks)
    aborted = any(flag for flag, _ in results)
    trace_files = [
        os.path.join(cfg.out, f"trace_{cfg.method}_t{t:03d}.csv")
        for t in range(cfg.trials)
    ]
    summarize(trace_files, os.path.join(cfg.out, "summary.csv"))
    return 2 if aborted else 0


SUMMARY_METRICS = ("hell_hat", "hell_tilde", "fwd_kl", "rev_kl", "cpu_time_s", "energy")


def read_trace_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, data = rows[0], rows[1:]
    return [dict(zip(header, row)) for row in data]


def summarize(trace_files: list[str], out_path: str) -> None:
    """Merge trace CSVs into per-(method, n) medians and quartiles.

    Adds energy columns normalized by the VI median when VI traces carry
    energy values.  Percentiles use linear interpolation, as noted in the
    output header comment.
    """
    if not trace_files:
        raise ValueError("need at least one trace file")
    records = []
    header_ref = None
    for path in trace_files:
        rows = read_trace_csv(path)
        if rows:
            cols = tuple(sorted(rows[0].keys()))
            if header_ref is None:
                header_ref = cols
            elif cols != header_ref:
                raise ValueError(f"inconsistent trace schema in {path}")
        records.extend(rows)
    by_key: dict[tuple[str, int], list[dict]] = {}
    for rec in records:
        by_key.setdefault((rec["method"], int(rec["n"])), []).append(rec)

    vi_energy = [
        float(rec["energy"])
        for rec in records
        if rec["method"] == "vi" and rec.get("energy")
    ]
    energy_norm = float(np.median(vi_energy)) if vi_energy else None

    out_rows = []
    for (method, n) in sorted(by_key, key=lambda k: (k[0], k[1])):
        group = by_key[(method, n)]
        row: dict[str, object] = {"method": method, "n": n, "trials": len(group)}
        for metric in SUMMARY_METRICS:
            vals = [float(r[metric]) for r in group if r.get(metric)]
            if vals:
                q25, med, q75 = np.percentile(vals, [25.0, 50.0, 75.0])
                row[f"{metric}_median"] = med
                row[f"{metric}_q25"] = q25
                row[f"{metric}_q75"] = q75
            else:
                row[f"{metric}_median"] = ""
                row[f"{metric}_q25"] = ""
                row[f"{metric}_q75"] = ""
            if metric == "energy" and energy_norm and vals:
                row["energy_norm_median"] = row["energy_median"] / energy_norm
                row["energy_norm_q25"] = row["energy_q25"] / energy_norm
                row["energy_norm_q75"] = row["energy_q75"] / energy_norm
            elif metric == "energy":
                row["energy_norm_median"] = ""
                row["energy_norm_q25"] = ""
                row["energy_norm_q75"] = ""
        out_rows.append(row)

    columns = ["method", "n", "trials"]
    for metric in SUMMARY_METRICS:
        columns += [f"{metric}_median", f"{metric}_q25", f"{metric}_q75"]
        if metric == "energy":
            columns += ["energy_norm_median", "energy_norm_q25", "energy_norm_q75"]
    with open(out_path, "w", newline="") as fh:
        fh.write("# percentiles: linear interpolation\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in out_rows:
            writer.writerow(
                [row[c] if isinstance(row[c], (str, int)) else repr(float(row[c]))
                 for c in columns]
            )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ubvi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a seeded experiment")
    run_p.add_argument("--target", default=None)
    run_p.add_argument("--method", default=None, choices=METHODS)
    run_p.add_argument("--n-components", type=int, default=None)
    run_p.add_argument("--trials", type=int, default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--grad-samples", type=int, default=None)
    run_p.add_argument("--est-samples", type=int, default=None)
    run_p.add_argument("--opt-iters", type=int, default=None)
    run_p.add_argument("--init-trials", type=int, default=None)
    run_p.add_argument("--reg-schedule", default=None)
    run_p.add_argument("--base-step", type=float, default=None)
    run_p.add_argument("--weight-opt-iters", type=int, default=None)
    run_p.add_argument("--weight-samples", type=int, default=None)
    run_p.add_argument("--diag-samples", type=int, default=None)
    run_p.add_argument("--jobs", type=int, default=None)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--config", default=None, help="JSON config; flags override")

    sum_p = sub.add_parser("summarize", help="merge trace CSVs into a summary")
    sum_p.add_argument("traces", nargs="+")
    sum_p.add_argument("--out", required=True)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
    for key in ExperimentConfig.__dataclass_fields__:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return ExperimentConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return run_experiment(_config_from_args(args))
        summarize(args.traces, args.out)
        return 0
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
