"""Config-driven runs, reports and dimension sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import exact_law as el
from .metrics import ResidualTrace, fitted_exponent, moment_summary, sliced_w2
from .ode_sampler import run_piadm_ode, run_sequential_ode
from .picard import CountingScore, timer
from .schedule import (CorrectorPlan, DiscretizationPlan, PlanTooLargeError, PresetConstants, theorem1_preset,
                       theorem2_preset)
from .score_oracle import PerturbedOracle, ScoreOracle, TargetSpec, ou_marginal
from .sde_sampler import run_piadm_sde, run_sequential_sde

IMPLEMENTATIONS = ("piadm_sde", "piadm_ode", "sequential_sde", "sequential_ode")
ROW_FIELDS = ["d", "delta", "implementation", "mode", "sequential_rounds", "total_score_evals",
              "max_parallel_width", "KL", "W2", "wall_clock"]
RESIDUAL_FIELDS = ["block", "iteration", "residual"]
SWEEP_FIELDS = ["d", "delta", "implementation", "mode", "preset", "N", "M", "M_last", "M_dagger", "K_min",
                "sequential_rounds", "total_score_evals", "memory_estimate", "final_residual", "status"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    target: dict
    implementation: str = "piadm_sde"
    plan: dict | None = None
    preset: dict | None = None
    corrector: dict | None = None
    mode: str = "exact"
    seed: int = 0
    n_samples: int = 1000
    threads: int | None = None
    chunk_size: int = 4096
    residual_tol: float | None = None
    perturbation: dict | None = None
    output_dir: str | None = None
    reference_samples: int = 20000

    def __post_init__(self):
        if self.implementation not in IMPLEMENTATIONS:
            raise ConfigError(f"implementation must be one of {IMPLEMENTATIONS}")
        if (self.plan is None) == (self.preset is None):
            raise ConfigError("give exactly one of 'plan' and 'preset'")
        if self.mode not in ("exact", "paper_verbatim"):
            raise ConfigError("mode must be 'exact' or 'paper_verbatim'")
        if self.preset is not None and self.preset.get("name") not in ("theorem1", "theorem2"):
            raise ConfigError("preset name must be 'theorem1' or 'theorem2'")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def payload_dict(self) -> dict:
        """Fields that determine the numbers (thread count and paths excluded)."""
        out = self.to_dict()
        for k in ("threads", "output_dir"):
            out.pop(k)
        return out

    def hash(self) -> str:
        blob = json.dumps(self.payload_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_target(cfg: ExperimentConfig) -> TargetSpec:
    return TargetSpec.from_dict(cfg.target)


def build_plans(cfg: ExperimentConfig, target: TargetSpec, lipschitz: float = 1.0):
    """(plan, corrector plan or None, delta or None)."""
    if cfg.plan is not None:
        plan = DiscretizationPlan.from_dict(cfg.plan)
        corrector = CorrectorPlan.from_dict(cfg.corrector) if cfg.corrector else None
        return plan, corrector, cfg.plan.get("delta")
    preset = cfg.preset
    delta = float(preset["delta"])
    consts = PresetConstants(**preset.get("constants", {}))
    if preset["name"] == "theorem1":
        plan = theorem1_preset(target.dim, delta, consts)
        corrector = CorrectorPlan.from_dict(cfg.corrector) if cfg.corrector else None
    else:
        plan, corrector = theorem2_preset(target.dim, delta, consts, lipschitz=lipschitz)
        if cfg.corrector:
            corrector = CorrectorPlan.from_dict(cfg.corrector)
    if "picard_depth" in preset:
        plan = plan.with_depth(int(preset["picard_depth"]))
    return plan, corrector, delta


def build_oracle(cfg: ExperimentConfig, target: TargetSpec, horizon: float):
    base = ScoreOracle(target, horizon)
    pert = cfg.perturbation
    if pert and float(pert.get("amplitude", 0.0)) > 0:
        return PerturbedOracle(base, pert.get("mode", "linf_budget"), float(pert["amplitude"]),
                               int(pert.get("seed", 0)))
    return base


def _sample(cfg, plan, corrector, oracle, counting):
    threads = cfg.threads if cfg.threads is not None else (os.cpu_count() or 1)
    kw = dict(mode=cfg.mode, threads=threads, chunk_size=cfg.chunk_size)
    impl = cfg.implementation
    if impl == "piadm_sde":
        return run_piadm_sde(plan, counting, cfg.seed, cfg.n_samples, residual_tol=cfg.residual_tol, **kw)
    if impl == "sequential_sde":
        return run_sequential_sde(plan, counting, cfg.seed, cfg.n_samples, **kw)
    if impl == "piadm_ode":
        return run_piadm_ode(plan, corrector, counting, cfg.seed, cfg.n_samples, residual_tol=cfg.residual_tol,
                             **kw)
    return run_sequential_ode(plan, corrector, counting, cfg.seed, cfg.n_samples, **kw)


def output_law(cfg, plan, corrector, oracle, report) -> el.GaussianLaw:
    """Exact law of the configured sampler (Gaussian targets only)."""
    impl = cfg.implementation
    if impl == "sequential_sde":
        return el.sequential_sde_law(plan, oracle, cfg.mode)
    if impl == "sequential_ode":
        return el.sequential_ode_law(plan, corrector, oracle, cfg.mode)
    if cfg.residual_tol is not None and len(set(report.picard_iterations)) > 1:
        raise ConfigError("exact laws need a fixed Picard depth across blocks")
    depth = report.picard_iterations[0] if report.picard_iterations else plan.picard_depth
    if impl == "piadm_sde":
        return el.piadm_sde_law(plan, oracle, cfg.mode, K=depth)
    if corrector is not None and cfg.residual_tol is not None:
        raise ConfigError("exact corrector laws need a fixed corrector depth")
    return el.piadm_ode_law(plan, corrector, oracle, cfg.mode, K=depth)


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    plan: dict
    corrector: dict | None
    oracle: dict
    report: dict
    comparison: dict
    counters: dict
    version: str = __version__
    wall_clock: float = 0.0
    samples: np.ndarray | None = field(default=None, repr=False)
    residual_trace: ResidualTrace | None = field(default=None, repr=False)

    def payload(self) -> dict:
        """Everything except timing: identical across re-runs of one config."""
        return {"config_hash": self.config_hash, "config": self.config, "plan": self.plan,
                "corrector": self.corrector, "oracle": self.oracle, "report": self.report,
                "comparison": self.comparison, "counters": self.counters, "version": self.version}

    def to_json(self) -> dict:
        out = self.payload()
        out["timing"] = {"wall_clock": self.wall_clock}
        return out

    def row(self) -> dict:
        cmp = self.comparison
        return {"d": self.config["target_dim"], "delta": self.config.get("delta"),
                "implementation": self.config["implementation"], "mode": self.config["mode"],
                "sequential_rounds": self.report["sequential_rounds"],
                "total_score_evals": self.report["total_score_evals"],
                "max_parallel_width": self.report["max_parallel_width"],
                "KL": cmp.get("kl"), "W2": cmp.get("w2", cmp.get("sliced_w2")), "wall_clock": self.wall_clock}


def run(config: ExperimentConfig | dict) -> RunRecord:
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    started = timer()
    target = build_target(cfg)
    probe = ScoreOracle(target, 0.0)
    plan, corrector, delta = build_plans(cfg, target, lipschitz=probe.lipschitz_bound)
    oracle = build_oracle(cfg, target, plan.T)
    counting = CountingScore(oracle)
    samples, report = _sample(cfg, plan, corrector, oracle, counting)
    reference = ou_marginal(target, plan.eta)
    moments = moment_summary(samples) if samples.shape[0] >= 2 else None
    comparison: dict = {"reference": "ou_marginal_at_eta"}
    law = None
    if target.variant == "gaussian":
        try:
            law = output_law(cfg, plan, corrector, oracle, report)
        except ConfigError as exc:
            comparison.update(kind="exact_law_unavailable", reason=str(exc))
    if law is not None:
        kl = el.kl_gaussian(reference, law)
        comparison.update(kind="exact_law", kl=kl, w2=el.w2_gaussian(reference, law),
                          tv_bound=el.tv_bound_from_kl(kl), output_law=law.to_dict(),
                          reference_law=reference.to_dict())
    elif target.variant != "gaussian":
        ref = reference.sample(cfg.reference_samples, np.random.default_rng([cfg.seed, 7]))
        comparison.update(kind="samples", sliced_w2=sliced_w2(samples, ref, 64, cfg.seed),
                          reference_mean=reference.mean.tolist(), reference_cov=reference.covariance.tolist())
    if moments is not None:
        comparison["moments"] = moments.to_dict()
    cfg_info = cfg.payload_dict()
    cfg_info.update(target_dim=target.dim, delta=delta)
    record = RunRecord(cfg.hash(), cfg_info, plan.to_dict(), corrector.to_dict() if corrector else None,
                       oracle.metadata(), report.to_dict(include_timing=False), comparison,
                       {"score_calls": counting.calls, "score_evaluations": counting.evaluations},
                       samples=samples, residual_trace=ResidualTrace.from_report(report))
    record.wall_clock = timer() - started
    return record


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_record(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "record.json", "w") as fh:
        json.dump(_clean(record.to_json()), fh, indent=2, sort_keys=True)
    with open(out / "rows.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        writer.writerow(record.row())
    with open(out / "residuals.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESIDUAL_FIELDS)
        for row in record.residual_trace.rows():
            writer.writerow(row)
    return out


# ----------------------------------------------------------------- sweeps
def _max_final_residual(report) -> float:
    finals = [h[-1] for h in report.residual_history if h]
    finals += [h[-1] for h in report.corrector_residual_history if h]
    return max(finals) if finals else 0.0


def minimal_depth(plan, oracle, seed, n_samples, tol, implementation="piadm_sde", corrector=None,
                  mode="exact", k_max=64, threads=1, chunk_size=4096):
    """Smallest fixed K whose last residual is below ``tol`` in every block (doubling, then bisection)."""

    def final_residual(K):
        p = plan.with_depth(K)
        if implementation == "piadm_sde":
            _, rep = run_piadm_sde(p, oracle, seed, n_samples, mode=mode, threads=threads, chunk_size=chunk_size)
        else:
            _, rep = run_piadm_ode(p, corrector, oracle, seed, n_samples, mode=mode, threads=threads,
                                   chunk_size=chunk_size)
        return max(h[-1] for h in rep.residual_history), rep

    lo, hi = 0, 1
    res, rep = final_residual(hi)
    while res >= tol:
        lo, hi = hi, 2 * hi
        if hi > k_max:
            raise RuntimeError(f"residual target {tol} not reached with K <= {k_max}")
        res, rep = final_residual(hi)
    best = (hi, res, rep)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        res, rep = final_residual(mid)
        if res < tol:
            hi, best = mid, (mid, res, rep)
        else:
            lo = mid
    return best


def sweep_dimension(base: ExperimentConfig | dict, dims, tol: float, search_k: bool = True,
                    out_path=None) -> tuple[list[dict], bool]:
    """Scaling table over dimensions; returns (rows, all_ok).  Rows are flushed as they finish."""
    cfg = base if isinstance(base, ExperimentConfig) else ExperimentConfig.from_dict(base)
    dims = [int(d) for d in dims]
    if dims != sorted(dims):
        raise ConfigError("dimension list must be sorted")
    rows, ok = [], True
    fh = writer = None
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(out_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
    try:
        for d in dims:
            row = {"d": d, "implementation": cfg.implementation, "mode": cfg.mode,
                   "preset": cfg.preset["name"] if cfg.preset else "explicit"}
            try:
                target_cfg = dict(cfg.target)
                if target_cfg.get("variant") == "standard_normal":
                    target_cfg["dim"] = d
                else:
                    target_cfg = {"variant": "standard_normal", "dim": d}
                dcfg = replace(cfg, target=target_cfg)
                target = build_target(dcfg)
                plan, corrector, delta = build_plans(dcfg, target)
                row.update(delta=delta, N=plan.N, M=plan.steps_per_block[0], M_last=plan.steps_per_block[-1],
                           M_dagger=corrector.M_dagger if corrector else None,
                           memory_estimate=d * max(plan.steps_per_block))
                if search_k:
                    oracle = build_oracle(dcfg, target, plan.T)
                    K, res, rep = minimal_depth(plan, oracle, cfg.seed, cfg.n_samples, tol, cfg.implementation,
                                                corrector, cfg.mode, threads=cfg.threads or 1,
                                                chunk_size=cfg.chunk_size)
                    row.update(K_min=K, sequential_rounds=rep.sequential_rounds,
                               total_score_evals=rep.total_score_evals, final_residual=res, status="ok")
                else:
                    row.update(status="plan_only")
            except PlanTooLargeError as exc:
                row.update(status=f"skipped: {exc}")
            except Exception as exc:  # noqa: BLE001 - a failed row is reported, the sweep continues
                ok = False
                row.update(status=f"failed: {type(exc).__name__}: {exc}")
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return rows, ok


def scaling_exponents(rows) -> dict:
    good = [r for r in rows if r.get("status") in ("ok", "plan_only")]
    out = {}
    if len(good) >= 2:
        ds = [r["d"] for r in good]
        out["M"] = fitted_exponent(ds, [r["M"] for r in good])
        if all(r.get("K_min") for r in good):
            out["K"] = fitted_exponent(ds, [r["K_min"] for r in good])
    return out
