"""Training loop tying together workloads, selection, the partitioned
optimizer, adaptive intervals and the pipeline simulator."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash
from .gradcore import DegenerateGradientWarning, norm_energy_topfrac
from .pipesim import PipelineProfile, ScheduleKind, ScheduleSpec, simulate
from .selection import (ChannelSelection, LocalityReport, NormEMA, locality_series, mask_from_channels,
                        select_channels, write_locality_csv)
from .sharding import GRAD_DTYPE_BYTES, CommLedger, gather_column_norms, shard_matrix
from .staleopt import (PartialStaleOptimizer, RhoTracker, StaleOptConfig, SyncOptimizer, staleness_factor,
                       warmup_penalty)
from .workloads import build_workload
from .zenauto import AdaptiveInterval, write_interval_csv

__all__ = ["DivergenceError", "RunReport", "measure_locality", "train"]

log = logging.getLogger(__name__)

_F32_MAX = float(np.finfo(np.float32).max)


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, loss: float, detail: str = ""):
        self.step, self.loss = step, loss
        msg = f"training diverged at step {step}: loss={loss!r}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    steps: int
    warmup_steps: int
    S: int
    evals: list[dict]
    final_loss: float
    final_accuracy: float | None
    rho: float
    staleness_factor: float
    warmup_penalty: float
    mean_sq_grad: float
    mean_sq_grad_after_warmup: float
    n_flushes: int
    n_migrations: int
    interval_history: list[tuple[int, int]]
    comm: dict
    locality_summary: dict | None = None
    locality: list[LocalityReport] = field(default_factory=list)
    pipeline: dict | None = None
    # Raw gradient trace for offline analysis; never serialized.
    trace: list[np.ndarray] = field(default_factory=list, repr=False, compare=False)
    trace_start_step: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "steps": self.steps,
            "warmup_steps": self.warmup_steps,
            "S": self.S,
            "evals": self.evals,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "rho": self.rho,
            "staleness_factor": self.staleness_factor,
            "warmup_penalty": self.warmup_penalty,
            "mean_sq_grad": self.mean_sq_grad,
            "mean_sq_grad_after_warmup": self.mean_sq_grad_after_warmup,
            "n_flushes": self.n_flushes,
            "n_migrations": self.n_migrations,
            "interval_history": [list(x) for x in self.interval_history],
            "comm": self.comm,
            "locality_summary": self.locality_summary,
            "locality": [[r.step, r.retention, r.channel_energy_topfrac] for r in self.locality],
            "pipeline": self.pipeline,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"report": out / "report.json", "evals": out / "evals.csv", "intervals": out / "intervals.csv"}
        files["report"].write_text(self.to_json() + "\n")
        with files["evals"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "accuracy"])
            for e in self.evals:
                w.writerow([e["step"], repr(e["loss"]), "" if e["accuracy"] is None else repr(e["accuracy"])])
        write_interval_csv(self.interval_history, files["intervals"])
        if self.locality:
            files["locality"] = write_locality_csv(self.locality, out / "locality.csv")
        return files


def _norms_and_charge(g: np.ndarray, n_shards: int, ledger: CommLedger) -> np.ndarray:
    shards, layout = shard_matrix(g, min(n_shards, g.shape[0]), GRAD_DTYPE_BYTES)
    norms, delta = gather_column_norms(shards, layout)
    ledger.merge(delta)
    return norms


def _pipeline_overlay(cfg: ExperimentConfig, S_eff: int, k: float) -> dict:
    pc = cfg.pipeline
    p = pc.profile
    prof = PipelineProfile(fp_ms=p.fp_ms, bp_ms=p.bp_ms, cpu_update_ms=p.cpu_update_ms,
                           model_bytes=p.model_bytes, pcie_bytes_per_s=p.pcie_bytes_per_s,
                           n_layers=p.n_layers, gpu_update_ms=p.gpu_update_ms)
    n = max(pc.n_iters, 3 * S_eff)
    k = min(k, 0.999)
    base = simulate(ScheduleSpec(ScheduleKind.SequentialOffload), prof, n)
    part = simulate(ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=S_eff, k=k, swap_bytes=pc.swap_bytes), prof, n)
    return {
        "schedule": ScheduleKind.ZenFlowPipelined.value,
        "S": S_eff,
        "k": k,
        "avg_iter_ms": part.avg_iter_ms,
        "stall_ms": part.stall_ms,
        "baseline_avg_iter_ms": base.avg_iter_ms,
        "speedup": base.avg_iter_ms / part.avg_iter_ms,
        "est_wall_s": cfg.T * part.avg_iter_ms / 1000.0,
        "baseline_est_wall_s": cfg.T * base.avg_iter_ms / 1000.0,
    }


def train(cfg: ExperimentConfig, *, concurrent: bool = False) -> RunReport:
    """Run ``cfg.T`` steps and collect a :class:`RunReport`.

    ``concurrent`` only changes how the delayed update executes; the report
    is identical either way.
    """
    wl = build_workload(cfg.workload, cfg.seed)
    lay = wl.layout
    rng_init = np.random.default_rng([cfg.seed, 1])
    rng_batch = np.random.default_rng([cfg.seed, 2])
    theta = wl.init_params(rng_init)

    oc, sc, ac = cfg.optimizer, cfg.selection, cfg.autotune
    T = cfg.T
    warm = int(round(oc.warmup_frac * T))
    sched_S = ac.s_max if ac.enabled else oc.S
    scfg = StaleOptConfig(S=sched_S, k_channel_ratio=sc.k_channel_ratio, warmup_steps=warm, total_steps=T,
                          lr=oc.lr, lr_schedule=oc.schedule, lr_warmup_frac=oc.lr_warmup_frac, kind=oc.kind,
                          beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps, weight_decay=oc.weight_decay)
    refresh = sc.refresh_interval or oc.S
    mats = lay.matrix_names
    trace_name = sc.trace_param or (mats[0] if mats else None)
    if sc.record_trace and trace_name not in mats:
        raise ValueError(f"trace_param {trace_name!r} is not a weight matrix of this workload")
    emas = {n: NormEMA(sc.ema_decay) for n in mats} if sc.ema_decay is not None else None
    zen = AdaptiveInterval(ac.gamma, ac.ema_decay, ac.s_min, ac.s_max) if ac.enabled and not oc.synchronous else None
    eval_every = cfg.eval_every or max(1, T // 50)

    ledger = CommLedger()
    rho = RhoTracker()
    sels: dict[str, ChannelSelection] = {}
    opt = None
    sync = None
    evals: list[dict] = []
    trace: list[np.ndarray] = []
    sq_all = 0.0
    sq_post = 0.0
    n_flushes = 0
    intervals: list[tuple[int, int]] = []

    def record_eval(step: int, params: np.ndarray) -> None:
        loss, acc = wl.evaluate(params)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss, "evaluation loss is not finite")
        evals.append({"step": step, "loss": loss, "accuracy": acc})

    def mask_now() -> np.ndarray:
        return lay.important_mask({n: mask_from_channels(sels[n], lay.spec(n).shape) for n in mats})

    record_eval(0, theta)
    try:
        for t in range(T):
            params = theta if opt is None and sync is None else (sync.theta if sync is not None else opt.theta)
            batch = wl.sample_batch(rng_batch)
            loss, grad = wl.loss_and_grad(params, batch)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(t, loss, "non-finite loss or gradient")
            if np.abs(grad).max(initial=0.0) > _F32_MAX:
                raise DivergenceError(t, loss, "gradient exceeds float32 range")
            views = {n: lay.view(grad, n) for n in mats}

            smoothed = ({n: emas[n].update(_norms_and_charge(views[n], sc.n_shards, ledger)) for n in mats}
                        if emas is not None else None)
            if (opt is None or opt.at_boundary) and mats:
                changed = False
                for n in mats:
                    if n in sels and t - sels[n].created_at_step < sels[n].refresh_interval:
                        continue
                    norms = smoothed[n] if smoothed is not None else _norms_and_charge(views[n], sc.n_shards, ledger)
                    new = select_channels(norms, sc.k_channel_ratio, step=t, refresh_interval=refresh)
                    changed = changed or n not in sels or not new.same_channels(sels[n])
                    sels[n] = new
                if opt is not None and changed:
                    opt.set_mask(mask_now())

            if opt is None and sync is None:
                mask = mask_now() if mats else np.ones(lay.size, dtype=bool)
                if oc.synchronous:
                    sync = SyncOptimizer(theta, scfg)
                else:
                    opt = PartialStaleOptimizer(theta, mask, scfg, concurrent=concurrent)
            mask = opt.important_mask if opt is not None else (mask_now() if mats else np.ones(lay.size, bool))
            rho.observe(grad, mask)
            e = float(grad @ grad)
            sq_all += e
            if t >= warm:
                sq_post += e
            if sc.record_trace and len(trace) < sc.trace_limit:
                trace.append(np.array(views[trace_name], dtype=np.float32))

            n_delayed = int((~mask).sum())
            ledger.charge(grad_offload=n_delayed * GRAD_DTYPE_BYTES)
            if sync is not None:
                sync.step(grad)
                ledger.charge(param_upload=n_delayed * GRAD_DTYPE_BYTES)
            else:
                in_warm = opt.in_warmup
                rounds_before = opt.rounds_in_active
                flushed = opt.step(grad)
                if zen is not None and not in_warm:
                    zen.observe([views[n] for n in mats], [sels[n] for n in mats])
                    if flushed:
                        zen.record_flush(t)
                    elif zen.should_flush():
                        opt.flush_now()
                        zen.record_flush(t)
                        flushed = True
                elif flushed:
                    intervals.append((t, rounds_before + 1))
                if flushed:
                    n_flushes += 1
                if flushed or in_warm:
                    ledger.charge(param_upload=n_delayed * GRAD_DTYPE_BYTES)

            step = t + 1
            if step % eval_every == 0 or step == T:
                record_eval(step, sync.theta if sync is not None else opt.theta)
    finally:
        if opt is not None:
            opt.close()

    if zen is not None:
        intervals = zen.interval_history
    r = rho.value
    S_report = oc.S if zen is None else ac.s_max
    report = RunReport(
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        steps=T,
        warmup_steps=warm,
        S=oc.S,
        evals=evals,
        final_loss=evals[-1]["loss"],
        final_accuracy=evals[-1]["accuracy"],
        rho=r,
        staleness_factor=staleness_factor(r, S_report),
        warmup_penalty=warmup_penalty(r, S_report, warm, T, cfg.analysis.beta),
        mean_sq_grad=sq_all / T,
        mean_sq_grad_after_warmup=sq_post / (T - warm) if T > warm else 0.0,
        n_flushes=n_flushes,
        n_migrations=len(opt.migrations) if opt is not None else 0,
        interval_history=[tuple(x) for x in intervals],
        comm=ledger.to_dict(),
        trace=trace,
    )
    if trace:
        report.locality = measure_locality(report)
        report.locality_summary = _locality_summary(report.locality, trace, sc.element_frac)
    if cfg.pipeline.overlay:
        if intervals:
            S_eff = max(1, int(round(float(np.median([s for _, s in intervals])))))
        else:
            S_eff = oc.S
        report.pipeline = _pipeline_overlay(cfg, S_eff, sc.k_channel_ratio)
    return report


def _locality_summary(series: list[LocalityReport], trace, element_frac: float) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGradientWarning)
        top_energy = [norm_energy_topfrac(g, element_frac) for g in trace]
    ret = [r.retention for r in series]
    ce = [r.channel_energy_topfrac for r in series]
    return {
        "n_steps": len(series),
        "mean_retention": float(np.mean(ret)),
        "min_retention": float(np.min(ret)),
        "mean_channel_energy": float(np.mean(ce)),
        "mean_top_element_energy": float(np.mean(top_energy)),
        "min_top_element_energy": float(np.min(top_energy)),
    }


def measure_locality(run, *, k_channel_ratio: float | None = None, element_frac: float | None = None,
                     refresh_interval: int | None = None) -> list[LocalityReport]:
    """Per-step retention and channel-energy share from a retained gradient trace.

    ``run`` is a :class:`RunReport` (recorded with ``selection.record_trace``)
    or a plain sequence of gradient matrices.
    """
    if isinstance(run, RunReport):
        if not run.trace:
            raise ValueError("run has no gradient trace; enable selection.record_trace")
        sc = run.config["selection"]
        grads, start = run.trace, run.trace_start_step
        k = k_channel_ratio if k_channel_ratio is not None else sc["k_channel_ratio"]
        ef = element_frac if element_frac is not None else sc["element_frac"]
        ri = refresh_interval or sc["refresh_interval"] or run.config["optimizer"]["S"]
    else:
        grads, start = list(run), 0
        k = k_channel_ratio if k_channel_ratio is not None else 0.10
        ef = element_frac if element_frac is not None else 0.01
        ri = refresh_interval or 4
    return locality_series(grads, k, ef, ri, start)
