"""Reproducible claim checks.

Each check recomputes one headline number or property from scratch and
compares it with its reference value. :func:`run_all` drives them for the
``paper-check`` command and the acceptance tests.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .engine import train
from .gradcore import column_norms_sq, norm_energy_topfrac
from .pipesim import PipelineProfile, ScheduleKind, ScheduleSpec, io_per_iter_model, simulate
from .selection import SyntheticGradients, locality_series, select_channels
from .sharding import (ShardLayout, allgather_exchange_bytes, comm_reduction_factor, full_matrix_bytes,
                       gather_column_norms, reduction_table, shard_matrix)
from .staleopt import PartialStaleOptimizer, StaleOptConfig, SyncOptimizer, staleness_factor, warmup_penalty
from .workloads import build_workload

__all__ = ["CheckResult", "CHECKS", "format_table", "run_all", "run_check"]


@dataclass
class CheckResult:
    id: int
    claim: str
    computed: str
    reference: str
    tolerance: str
    passed: bool
    runtime_s: float = 0.0
    budget_s: float | None = None
    detail: dict | None = None

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


N_ITERS = 100

# Logistic workload used by the convergence check: gradient energy is
# concentrated on a tenth of the features, matching the channel budget.
CONVERGENCE_CONFIG = {
    "T": 20000,
    "workload": {"kind": "logistic_regression"},
    "optimizer": {"kind": "adamw", "lr": 0.003, "schedule": "cosine", "S": 4, "warmup_frac": 0.05},
    "selection": {"k_channel_ratio": 0.10},
    "pipeline": {"overlay": False},
}

# Planted-relevance logistic workload with heavy-tailed feature scales, traced
# for locality metrics.
LOCALITY_CONFIG = {
    "T": 100,
    "workload": {"kind": "logistic_regression", "n_features": 1000, "feature_sigma": 2.0},
    "selection": {"k_channel_ratio": 0.10, "element_frac": 0.01, "record_trace": True, "trace_limit": 100},
    "pipeline": {"overlay": False},
}

# Logistic workload for the adaptive-interval trend: a non-zero starting
# point and large batches give a coherent early descent across all
# features, followed by a noise-dominated tail.
AUTOTUNE_TREND_CONFIG = {
    "T": 5000,
    "workload": {"kind": "logistic_regression", "feature_sigma": 0.7, "relevant_scale": 1.0,
                 "relevant_frac": 0.5, "init_scale": 1.0, "batch_size": 512, "n_samples": 16384},
    "optimizer": {"kind": "adamw", "lr": 0.003, "schedule": "cosine", "warmup_frac": 0.05},
    "autotune": {"enabled": True, "gamma": 1.0, "s_max": 8},
    "pipeline": {"overlay": False},
}


def _cfg(base: dict, **top) -> ExperimentConfig:
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, val in top.items():
        if isinstance(val, dict):
            d.setdefault(key, {}).update(val)
        else:
            d[key] = val
    return ExperimentConfig.from_dict(d)


def check_stall_identity() -> CheckResult:
    tr = simulate(ScheduleSpec(ScheduleKind.LayerwiseOverlap), PipelineProfile.reference(), N_ITERS)
    stalls = set(tr.iter_stall_us)
    ok = stalls == {3_600_000}
    return CheckResult(1, "LayerwiseOverlap GPU stall per iteration (reference profile)",
                       f"{tr.stall_ms:g} ms (per-iteration values: {sorted(s / 1000 for s in stalls)})",
                       "3600 ms = 4600 + 2*500 - 2000", "exact (integer us)", ok, budget_s=1.0)


def check_baseline_iteration() -> CheckResult:
    tr = simulate(ScheduleSpec(ScheduleKind.SequentialOffload), PipelineProfile.reference(), N_ITERS)
    ok = tr.avg_iter_ms == 7645.0 and set(tr.iter_wall_us) == {7_645_000}
    return CheckResult(2, "SequentialOffload iteration time (reference profile)", f"{tr.avg_iter_ms:g} ms",
                       "7645 ms = 45+2000+500+4600+500 (~7 s)", "exact", ok, budget_s=1.0)


def check_io_model() -> CheckResult:
    prof = PipelineProfile.reference()
    M = prof.model_bytes
    zf = ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=4, k=0.1)
    model = io_per_iter_model(zf, M)
    base = io_per_iter_model(ScheduleSpec(ScheduleKind.SequentialOffload), M)
    sim = simulate(zf, prof, N_ITERS).io_bytes_per_iter
    sim_base = simulate(ScheduleSpec(ScheduleKind.SequentialOffload), prof, N_ITERS).io_bytes_per_iter
    rel = abs(sim - model) / model
    rel_base = abs(sim_base - base) / base
    ok = (math.isclose(model / M, 1.125, rel_tol=0, abs_tol=1e-12) and base == 2 * M
          and rel <= 0.01 and rel_base <= 0.01)
    return CheckResult(
        3, "Per-iteration PCIe traffic, partitioned (S=4, k=0.1) vs full offload",
        f"model {model / M:.4f}M vs {base / M:g}M (x{base / model:.3f}); simulated {sim / M:.4f}M "
        f"(rel err {rel:.2%}), baseline simulated {sim_base / M:.4f}M",
        "1.125M vs 2M (x1.78)", "closed form exact; simulation within 1%", ok,
        detail={"model": model, "baseline": base, "simulated": sim, "simulated_baseline": sim_base})


def check_stall_elimination() -> CheckResult:
    prof = PipelineProfile.reference()
    lw = simulate(ScheduleSpec(ScheduleKind.LayerwiseOverlap), prof, N_ITERS).stall_ms
    zf = simulate(ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=4, k=0.1), prof, N_ITERS).stall_ms
    frac = zf / lw
    return CheckResult(4, "Pipelined partitioned schedule removes GPU stall",
                       f"stall {zf:g} ms vs {lw:g} ms ({frac:.1%} remaining, {1 - frac:.1%} reduction)",
                       ">85% reduction", "<= 15% of LayerwiseOverlap stall", frac <= 0.15, budget_s=5.0)


def check_penalties() -> CheckResult:
    sf = staleness_factor(0.10, 4)
    wp = warmup_penalty(0.10, 4, 7500, 150000, 0.6)
    ok = abs(sf - 1.1832) <= 1e-3 and abs(wp - 1.1311) <= 1e-3
    return CheckResult(
        5, "Staleness and warm-up penalty factors",
        f"staleness_factor(0.1,4)={sf:.4f}; warmup_penalty(0.1,4,7500,150000,0.6)={wp:.4f} "
        f"(extra cost {wp - 1:.3f})",
        "1.1832 (~1.18); 1.1311 by the closed form. The headline 0.12 extra cost does not follow from "
        "that formula (documented discrepancy)", "+-1e-3", ok)


def check_proxy_exactness(n_matrices: int = 200) -> CheckResult:
    rng = np.random.default_rng(2024)
    worst = 0.0
    mismatched = 0
    for i in range(n_matrices):
        rows = int(rng.integers(1, 513))
        cols = int(rng.integers(1, 513))
        n_shards = int(rng.integers(1, min(8, rows) + 1))
        scale = np.exp(rng.normal(0.0, 1.5, cols))
        g = (rng.standard_normal((rows, cols)) * scale).astype(np.float32)
        ref = column_norms_sq(g)
        shards, layout = shard_matrix(g, n_shards)
        got, _ = gather_column_norms(shards, layout)
        nz = ref > 0
        if nz.any():
            worst = max(worst, float(np.max(np.abs(got[nz] - ref[nz]) / ref[nz])))
        k = float(rng.choice([0.01, 0.05, 0.1, 0.25]))
        if select_channels(got, k).as_set() != select_channels(ref, k).as_set():
            mismatched += 1
    ok = worst <= 1e-6 and mismatched == 0
    return CheckResult(6, f"Sharded norm proxy equals unsharded norms ({n_matrices} matrices, 1-8 shards)",
                       f"max rel err {worst:.2e}; selection mismatches {mismatched}",
                       "identical", "rel 1e-6, set-identical", ok, budget_s=30.0)


def check_comm_accounting() -> CheckResult:
    rows = cols = 4096
    layout = ShardLayout.even(rows, 4, dtype_bytes=2, norm_bytes=4)
    full = full_matrix_bytes(rows, cols, 2)
    per_shard = layout.local_rows(0) * cols * 2
    proxy = cols * layout.norm_bytes
    ratio = comm_reduction_factor(layout, rows, cols)
    exchange = allgather_exchange_bytes(layout, cols)
    over_1000 = []
    for n in (1, 2, 4, 8):
        for row in reduction_table(rows, cols, n):
            if row["per_shard"] > 1000:
                over_1000.append((n, row["dtype_bytes"], row["norm_bytes"], row["per_shard"]))
    ok = full == 33_554_432 and per_shard == 8_388_608 and proxy == 16_384 and ratio == 512.0
    cfgs = ", ".join(f"{n} shard(s) {d}B grad/{b}B norm -> {r:g}x" for n, d, b, r in over_1000)
    return CheckResult(
        7, "Communication bytes for norm proxy vs full gather (4096x4096, 4 shards)",
        f"full {full} B, per shard {per_shard} B, proxy {proxy} B, factor {ratio:g}x; all-gather exchange "
        f"{exchange} B; configurations above 1000x: {cfgs or 'none'}",
        "16 KB norm vector; 512x per shard at these dtypes", "exact byte counts", ok,
        detail={"over_1000x": over_1000, "allgather_exchange_bytes": exchange})


def _quadratic_stream_equal(kind: str, S: int, mask_fn, steps: int = 1000) -> bool:
    cfg = ExperimentConfig.from_dict({"workload": {"kind": "quadratic", "noise": 0.1}, "T": steps})
    wl = build_workload(cfg.workload, 0)
    sc = StaleOptConfig(S=S, total_steps=steps, warmup_steps=0, lr=0.05, kind=kind)
    theta0 = wl.init_params(np.random.default_rng(0))
    ref = SyncOptimizer(theta0, sc)
    opt = PartialStaleOptimizer(theta0, mask_fn(wl), sc)
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    try:
        for _ in range(steps):
            _, ga = wl.loss_and_grad(ref.theta, wl.sample_batch(rng_a))
            _, gb = wl.loss_and_grad(opt.theta, wl.sample_batch(rng_b))
            ref.step(ga)
            opt.step(gb)
            if not np.array_equal(ref.theta, opt.theta):
                return False
    finally:
        opt.close()
    return True


def check_degenerate_equivalence(steps: int = 1000) -> CheckResult:
    def channel_mask(wl):
        g = wl.loss_and_grad(wl.init_params(np.random.default_rng(0)), None)[1]
        W = wl.layout.view(g, "W")
        sel = select_channels(column_norms_sq(W), 0.1)
        mk = np.zeros(W.shape, bool)
        mk[:, sel.channel_ids] = True
        return wl.layout.important_mask({"W": mk})

    def all_important(wl):
        return np.ones(wl.layout.size, bool)

    results = {}
    for kind in ("sgd", "adamw"):
        results[f"{kind} S=1"] = _quadratic_stream_equal(kind, 1, channel_mask, steps)
        results[f"{kind} all-important S=4"] = _quadratic_stream_equal(kind, 4, all_important, steps)
    ok = all(results.values())
    return CheckResult(8, f"Degenerate cases match synchronous updates bitwise ({steps} steps, quadratic)",
                       "; ".join(f"{k}: {'identical' if v else 'DIFFERS'}" for k, v in results.items()),
                       "identical trajectories", "bitwise", ok)


def check_convergence(T: int = 20000, seed: int = 0) -> CheckResult:
    sync = train(_cfg(CONVERGENCE_CONFIG, T=T, seed=seed, optimizer={"synchronous": True}))
    stale = train(_cfg(CONVERGENCE_CONFIG, T=T, seed=seed))
    rel = (stale.final_loss - sync.final_loss) / sync.final_loss
    msg_ratio = stale.mean_sq_grad / sync.mean_sq_grad
    bound = staleness_factor(stale.rho, 4) ** 2 * 1.10
    ok = abs(rel) <= 0.02 and msg_ratio <= bound
    return CheckResult(
        9, f"Partial staleness converges like synchronous training (logistic, T={T}, S=4, k=10%, 5% warm-up)",
        f"final loss {stale.final_loss:.5f} vs sync {sync.final_loss:.5f} (rel {rel:+.2%}); mean-sq-grad ratio "
        f"{msg_ratio:.4f} vs bound {bound:.4f} (rho={stale.rho:.3f})",
        "within 2% of sync; ratio <= staleness_factor(rho,4)^2 * 1.10", "2% relative; bound", ok,
        budget_s=120.0, detail={"rel": rel, "msg_ratio": msg_ratio, "bound": bound, "rho": stale.rho})


def check_locality(steps: int = 100) -> CheckResult:
    rep = train(_cfg(LOCALITY_CONFIG, T=steps, selection={"trace_limit": steps}))
    summ = rep.locality_summary
    ret = [r.retention for r in rep.locality]
    cols = 512
    null = list(SyntheticGradients(256, cols, mode="uniform", seed=12).stream(steps))
    ser0 = locality_series(null, 0.10, 0.01, 4)
    # the first step is scored against its own selection; skip it for the null case
    null_ret = float(np.mean([r.retention for r in ser0[1:]]))
    budget = math.ceil(0.10 * cols) / cols
    # informational: a stream whose hot columns churn 1% per step
    churn = list(SyntheticGradients(256, cols, mode="lognormal", sigma=2.0, seed=11).stream(steps))
    churn_ret = [r.retention for r in locality_series(churn, 0.10, 0.01, 4)]
    ok = summ["min_top_element_energy"] >= 0.80 and min(ret) >= 0.90 and abs(null_ret - budget) <= 0.03
    return CheckResult(
        10, f"Gradient locality on the planted-relevance workload vs a uniform null ({steps} steps, 10% channels)",
        f"top-1% energy min {summ['min_top_element_energy']:.3f}; retention min {min(ret):.3f} "
        f"mean {np.mean(ret):.3f}; uniform retention {null_ret:.3f} vs budget {budget:.3f}",
        ">=0.80 energy; >=0.90 retention; null ~ budget", "every step; null +-0.03", ok, budget_s=60.0,
        detail={"churn_generator_retention_mean": float(np.mean(churn_ret)),
                "churn_generator_retention_min": float(np.min(churn_ret))})


def check_autotune_trend(seeds=(0, 1, 2, 3, 4)) -> CheckResult:
    rows = []
    for seed in seeds:
        rep = train(_cfg(AUTOTUNE_TREND_CONFIG, seed=seed))
        T = rep.steps
        h = np.array(rep.interval_history, dtype=float)
        first = h[h[:, 0] < 0.1 * T, 1]
        last = h[h[:, 0] >= 0.9 * T, 1]
        rows.append((seed, float(np.median(first)), float(np.median(last))))
    ok = all(f <= l for _, f, l in rows)
    return CheckResult(
        11, "Adaptive interval is short early and longer late (logistic, 5 seeds)",
        "; ".join(f"seed {s}: {f:g} -> {l:g}" for s, f, l in rows),
        "short early, relaxed later", "median(first 10%) <= median(last 10%) for every seed", ok,
        detail={"medians": rows})


def check_concurrency_contract() -> CheckResult:
    cases = {
        "quadratic": {"T": 300, "workload": {"kind": "quadratic", "noise": 0.1}, "optimizer": {"kind": "sgd", "lr": 0.1}},
        "logistic_regression": {"T": 400, "workload": {"kind": "logistic_regression"}},
        "logistic_regression+autotune": {"T": 400, "workload": {"kind": "logistic_regression"},
                                         "autotune": {"enabled": True}},
        "mlp2": {"T": 300, "workload": {"kind": "mlp2"}, "selection": {"record_trace": True, "trace_limit": 20}},
    }
    same = {}
    for name, d in cases.items():
        d = dict(d, pipeline={"overlay": False})
        cfg = ExperimentConfig.from_dict(d)
        same[name] = train(cfg).to_json() == train(cfg, concurrent=True).to_json()
    return CheckResult(12, "Concurrent delayed updates give byte-identical run reports",
                       "; ".join(f"{k}: {'identical' if v else 'DIFFERS'}" for k, v in same.items()),
                       "identical", "byte-identical JSON", all(same.values()))


CHECKS: dict[int, Callable[[], CheckResult]] = {
    1: check_stall_identity,
    2: check_baseline_iteration,
    3: check_io_model,
    4: check_stall_elimination,
    5: check_penalties,
    6: check_proxy_exactness,
    7: check_comm_accounting,
    8: check_degenerate_equivalence,
    9: check_convergence,
    10: check_locality,
    11: check_autotune_trend,
    12: check_concurrency_contract,
}


def run_check(i: int) -> CheckResult:
    t0 = time.perf_counter()
    res = CHECKS[i]()
    res.runtime_s = time.perf_counter() - t0
    if res.budget_s is not None and res.runtime_s > res.budget_s:
        res.passed = False
        res.computed += f" [over time budget: {res.runtime_s:.1f}s > {res.budget_s:g}s]"
    return res


def run_all(ids=None) -> list[CheckResult]:
    return [run_check(i) for i in (ids or sorted(CHECKS))]


def format_table(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"[{r.verdict}] #{r.id} {r.claim}  ({r.runtime_s:.2f}s)")
        lines.append(f"    computed : {r.computed}")
        lines.append(f"    reference: {r.reference}")
        lines.append(f"    tolerance: {r.tolerance}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
