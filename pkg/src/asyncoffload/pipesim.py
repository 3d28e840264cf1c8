"""Discrete-event simulation of offloaded-training schedules.

Four resources are modelled: the GPU, the CPU, and the two directions of
the PCIe link (``pcie_down`` GPU->CPU, ``pcie_up`` CPU->GPU), each an
independent channel at the profiled throughput. The clock is integer
microseconds so traces are exactly reproducible.

Schedules:

``SequentialOffload``
    FP, BP, gradient offload, CPU update and parameter upload, one after
    another.
``LayerwiseOverlap``
    The offload -> update -> upload chain starts together with BP, the best
    case of streaming per-layer gradients out during the backward pass.
    The chain is charged as whole-model stages, which reproduces the
    ``update + 2*transfer - bp`` stall of the best-case layer-wise scheme.
``ZenFlowPipelined``
    Per-layer BP on the GPU with an in-place update of the important
    fraction ``k`` (optimizer states swapped in/out per layer over PCIe);
    the ``1-k`` gradients stream to the CPU every iteration and are applied
    by one CPU update every ``S`` iterations. The result of a cycle's update
    is needed only one full cycle later (double buffering).
``ZenFlowUnpipelined``
    Same partitioning, but each cycle's CPU update must land before the next
    cycle starts.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

__all__ = [
    "Event",
    "ModelMismatchError",
    "PipelineProfile",
    "ScheduleKind",
    "ScheduleSpec",
    "ScheduleTrace",
    "closed_form_stall_ms",
    "io_per_iter_model",
    "min_hide_interval",
    "model_vs_sim_check",
    "simulate",
    "transfer_ms",
]

RESOURCES = ("GPU", "CPU", "pcie_down", "pcie_up")
US_PER_MS = 1000


class ModelMismatchError(AssertionError):
    pass


@dataclass(frozen=True)
class PipelineProfile:
    """Per-iteration stage costs of one training step.

    ``gpu_update_ms`` is the cost of updating the *whole* model on the GPU;
    the important-fraction update is charged ``k`` of it. Defaults to
    ``fp_ms``.
    """

    fp_ms: float = 45.0
    bp_ms: float = 2000.0
    cpu_update_ms: float = 4600.0
    model_bytes: float = 14e9
    pcie_bytes_per_s: float = 28e9
    n_layers: int = 32
    bp_split: tuple[float, ...] | None = None
    update_split: tuple[float, ...] | None = None
    gpu_update_ms: float | None = None

    def __post_init__(self):
        for name in ("fp_ms", "bp_ms", "cpu_update_ms", "model_bytes", "pcie_bytes_per_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        for name in ("bp_split", "update_split"):
            split = getattr(self, name)
            if split is not None:
                if len(split) != self.n_layers or any(w < 0 for w in split) or sum(split) <= 0:
                    raise ValueError(f"{name} needs {self.n_layers} non-negative weights")
                object.__setattr__(self, name, tuple(float(w) for w in split))
        if self.gpu_update_ms is not None and self.gpu_update_ms < 0:
            raise ValueError("gpu_update_ms must be >= 0")

    @classmethod
    def reference(cls, **kw) -> "PipelineProfile":
        """7B-class model on a 4-GPU node with a fully threaded CPU optimizer."""
        return cls(**kw)

    @classmethod
    def constrained_cpu(cls, **kw) -> "PipelineProfile":
        """Same node with a quarter of the CPU threads."""
        kw.setdefault("cpu_update_ms", 6200.0)
        return cls(**kw)

    @property
    def compute_ms(self) -> float:
        return self.fp_ms + self.bp_ms

    @property
    def full_gpu_update_ms(self) -> float:
        return self.fp_ms if self.gpu_update_ms is None else self.gpu_update_ms

    def to_dict(self) -> dict:
        return asdict(self)


class ScheduleKind(str, Enum):
    SequentialOffload = "SequentialOffload"
    LayerwiseOverlap = "LayerwiseOverlap"
    ZenFlowPipelined = "ZenFlowPipelined"
    ZenFlowUnpipelined = "ZenFlowUnpipelined"

    @property
    def partitioned(self) -> bool:
        return self in (ScheduleKind.ZenFlowPipelined, ScheduleKind.ZenFlowUnpipelined)


@dataclass(frozen=True)
class ScheduleSpec:
    """Which schedule to run; ``swap_bytes`` is the per-iteration optimizer-state
    transfer in *each* direction (default ``2 * k * M * 4/2``: two fp32 moments
    per 16-bit important parameter)."""

    kind: ScheduleKind
    S: int = 4
    k: float = 0.1
    swap_bytes: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if not (0.0 <= self.k < 1.0):
            raise ValueError("k must be in [0, 1)")

    def swap_bytes_for(self, model_bytes: float) -> int:
        if self.swap_bytes is not None:
            return int(round(self.swap_bytes))
        return int(round(2 * self.k * model_bytes * (4 / 2)))


@dataclass(frozen=True)
class Event:
    resource: str
    name: str
    start_us: int
    end_us: int
    iteration: int
    nbytes: int = 0
    category: str = "compute"  # compute | io | swap | barrier


@dataclass
class ScheduleTrace:
    spec: ScheduleSpec
    profile: PipelineProfile
    n_iters: int
    events: list[Event]
    iter_start_us: list[int]
    end_us: int
    iter_wall_us: list[int] = field(default_factory=list)
    iter_stall_us: list[int] = field(default_factory=list)
    io_bytes: int = 0
    swap_bytes: int = 0

    @property
    def avg_iter_ms(self) -> float:
        return (self.end_us - self.iter_start_us[0]) / self.n_iters / US_PER_MS

    @property
    def stall_ms(self) -> float:
        """Average GPU idle time per iteration."""
        return sum(self.iter_stall_us) / self.n_iters / US_PER_MS

    @property
    def total_stall_us(self) -> int:
        return sum(self.iter_stall_us)

    @property
    def gpu_util(self) -> float:
        busy = sum(e.end_us - e.start_us for e in self.events if e.resource == "GPU")
        span = self.end_us - self.iter_start_us[0]
        return busy / span if span else 0.0

    @property
    def io_bytes_per_iter(self) -> float:
        return self.io_bytes / self.n_iters

    def summary(self) -> dict:
        return {
            "schedule": self.spec.kind.value,
            "S": self.spec.S,
            "k": self.spec.k,
            "n_iters": self.n_iters,
            "avg_iter_ms": self.avg_iter_ms,
            "stall_ms": self.stall_ms,
            "gpu_util": self.gpu_util,
            "io_bytes_per_iter": self.io_bytes_per_iter,
            "swap_bytes_per_iter": self.swap_bytes / self.n_iters,
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["resource", "event", "start_us", "end_us", "iter"])
            for e in self.events:
                w.writerow([e.resource, e.name, e.start_us, e.end_us, e.iteration])
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return path

    def check_exclusive(self) -> None:
        """Raise if two events overlap on one resource."""
        by_res: dict[str, list[Event]] = {}
        for e in self.events:
            by_res.setdefault(e.resource, []).append(e)
        for res, evs in by_res.items():
            evs = sorted(evs, key=lambda e: (e.start_us, e.end_us))
            for a, b in zip(evs, evs[1:]):
                if b.start_us < a.end_us:
                    raise AssertionError(f"overlap on {res}: {a.name} [{a.start_us},{a.end_us}) "
                                         f"and {b.name} [{b.start_us},{b.end_us})")


def transfer_ms(nbytes: float, profile: PipelineProfile) -> float:
    if nbytes < 0:
        raise ValueError("bytes must be >= 0")
    return nbytes / profile.pcie_bytes_per_s * 1000.0


def _us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


def _transfer_us(nbytes: int, profile: PipelineProfile) -> int:
    return int(round(nbytes / profile.pcie_bytes_per_s * 1e6))


def _split_int(total: int, weights) -> list[int]:
    """Split an integer total by weights with largest-remainder rounding (sums exactly)."""
    wsum = float(sum(weights))
    raw = [total * w / wsum for w in weights]
    parts = [int(math.floor(r)) for r in raw]
    short = total - sum(parts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - parts[i]), i))
    for i in order[:short]:
        parts[i] += 1
    return parts


# ---------------------------------------------------------------------------
# event engine
# ---------------------------------------------------------------------------

@dataclass
class _Task:
    tid: int
    resource: str
    dur: int
    name: str
    iteration: int
    nbytes: int = 0
    category: str = "compute"
    deps: list[int] = field(default_factory=list)
    start: int = -1
    end: int = -1


class _Graph:
    """Tasks with dependencies; resources serve ready tasks FIFO by ready time."""

    def __init__(self):
        self.tasks: list[_Task] = []
        self._last_on: dict[str, int] = {}

    def add(self, resource, dur, name, iteration, deps=(), *, nbytes=0, category="compute",
            in_order=False) -> int:
        """``in_order`` makes the task wait for the previous in-order task on its resource
        (a stream); otherwise only data dependencies apply."""
        deps = [d for d in deps if d is not None]
        if in_order and resource in self._last_on:
            deps.append(self._last_on[resource])
        t = _Task(len(self.tasks), resource, int(dur), name, iteration, int(nbytes), category, deps)
        self.tasks.append(t)
        if in_order:
            self._last_on[resource] = t.tid
        return t.tid

    def run(self) -> None:
        n = len(self.tasks)
        waiting = [len(t.deps) for t in self.tasks]
        children: list[list[int]] = [[] for _ in range(n)]
        for t in self.tasks:
            for d in t.deps:
                children[d].append(t.tid)
        ready_time = [0] * n
        queues: dict[str, list[tuple[int, int]]] = {r: [] for r in RESOURCES}
        busy_until = {r: 0 for r in RESOURCES}
        running: dict[str, int | None] = {r: None for r in RESOURCES}
        completions: list[tuple[int, int]] = []
        for t in self.tasks:
            if waiting[t.tid] == 0:
                heapq.heappush(queues[t.resource], (0, t.tid))
        now = 0
        done = 0
        while done < n:
            for r in RESOURCES:
                if running[r] is None and queues[r]:
                    _, tid = heapq.heappop(queues[r])
                    t = self.tasks[tid]
                    t.start = max(now, busy_until[r])
                    t.end = t.start + t.dur
                    busy_until[r] = t.end
                    running[r] = tid
                    heapq.heappush(completions, (t.end, tid))
            if not completions:
                raise RuntimeError("schedule deadlock: tasks remain but none can run")
            now = completions[0][0]
            while completions and completions[0][0] == now:
                _, tid = heapq.heappop(completions)
                t = self.tasks[tid]
                running[t.resource] = None
                done += 1
                for c in children[tid]:
                    waiting[c] -= 1
                    ready_time[c] = max(ready_time[c], t.end)
                    if waiting[c] == 0:
                        heapq.heappush(queues[self.tasks[c].resource], (ready_time[c], c))


# ---------------------------------------------------------------------------
# schedule builders
# ---------------------------------------------------------------------------

def _build_baseline(g: _Graph, spec: ScheduleSpec, prof: PipelineProfile, n_iters: int):
    fp, bp, up = _us(prof.fp_ms), _us(prof.bp_ms), _us(prof.cpu_update_ms)
    M = int(round(prof.model_bytes))
    xfer = _transfer_us(M, prof)
    fps = []
    prev_pu = None
    layerwise = spec.kind is ScheduleKind.LayerwiseOverlap
    for i in range(n_iters):
        f = g.add("GPU", fp, "FP", i, [prev_pu], in_order=True)
        fps.append(f)
        b = g.add("GPU", bp, "BP", i, [f], in_order=True)
        go = g.add("pcie_down", xfer, "GO", i, [f] if layerwise else [b], nbytes=M, category="io")
        u = g.add("CPU", up, "UP", i, [go], in_order=True)
        prev_pu = g.add("pcie_up", xfer, "PU", i, [u], nbytes=M, category="io")
    barrier = g.add("GPU", 0, "END", n_iters, [prev_pu], in_order=True, category="barrier")
    return fps, barrier


def _build_partitioned(g: _Graph, spec: ScheduleSpec, prof: PipelineProfile, n_iters: int):
    L, S, k = prof.n_layers, spec.S, spec.k
    pipelined = spec.kind is ScheduleKind.ZenFlowPipelined
    fp = _us(prof.fp_ms)
    bp_l = _split_int(_us(prof.bp_ms), prof.bp_split or [1.0] * L)
    cpu_l = _split_int(_us((1.0 - k) * prof.cpu_update_ms), prof.update_split or [1.0] * L)
    gpu_upd_l = _split_int(_us(k * prof.full_gpu_update_ms), prof.update_split or [1.0] * L)
    delayed_bytes = int(round((1.0 - k) * prof.model_bytes))
    io_l = _split_int(delayed_bytes, [1.0] * L)
    swap_l = _split_int(spec.swap_bytes_for(prof.model_bytes), [1.0] * L)
    io_us = [_transfer_us(b, prof) for b in io_l]
    swap_us = [_transfer_us(b, prof) for b in swap_l]
    lag = 2 if pipelined else 1

    flush_done: dict[int, list[int]] = {}  # cycle -> PU task ids
    prev_go: list[int | None] = [None] * L
    prev_sout: list[int | None] = [None] * L
    cycle_go: list[list[int]] = [[] for _ in range(L)]
    fps = []

    def gate(i: int) -> list[int]:
        if i % S != 0:
            return []
        return flush_done.get(i // S - lag, [])

    for i in range(n_iters):
        f = g.add("GPU", fp, "FP", i, gate(i), in_order=True)
        fps.append(f)
        before = f
        for l in range(L):
            b = g.add("GPU", bp_l[l], f"BP[{l}]", i, [prev_go[l]], in_order=True)
            sin = g.add("pcie_up", swap_us[l], f"SWAPIN[{l}]", i, [before, prev_sout[l]],
                        nbytes=swap_l[l], category="swap")
            go = g.add("pcie_down", io_us[l], f"GO[{l}]", i, [b], nbytes=io_l[l], category="io")
            u = g.add("GPU", gpu_upd_l[l], f"GPUUP[{l}]", i, [b, sin], in_order=True)
            sout = g.add("pcie_down", swap_us[l], f"SWAPOUT[{l}]", i, [u],
                         nbytes=swap_l[l], category="swap")
            prev_go[l], prev_sout[l] = go, sout
            cycle_go[l].append(go)
            before = b
        if (i + 1) % S == 0:
            c = i // S
            pus = []
            for l in range(L):
                cu = g.add("CPU", cpu_l[l], f"CPUUP[{l}]", i, cycle_go[l], in_order=True)
                pus.append(g.add("pcie_up", io_us[l], f"PU[{l}]", i, [cu],
                                 nbytes=io_l[l], category="io"))
                cycle_go[l] = []
            flush_done[c] = pus
    barrier = g.add("GPU", 0, "END", n_iters, gate(n_iters), in_order=True, category="barrier")
    return fps, barrier


def simulate(spec: ScheduleSpec, profile: PipelineProfile, n_iters: int) -> ScheduleTrace:
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    g = _Graph()
    if spec.kind.partitioned:
        fps, barrier = _build_partitioned(g, spec, profile, n_iters)
    else:
        fps, barrier = _build_baseline(g, spec, profile, n_iters)
    g.run()

    events = [Event(t.resource, t.name, t.start, t.end, t.iteration, t.nbytes, t.category)
              for t in g.tasks if t.category != "barrier"]
    events.sort(key=lambda e: (e.start_us, RESOURCES.index(e.resource), e.end_us))
    starts = [g.tasks[f].start for f in fps]
    end = g.tasks[barrier].start
    bounds = starts + [end]
    busy = [0] * n_iters
    for t in g.tasks:
        if t.resource == "GPU" and t.category != "barrier":
            busy[t.iteration] += t.dur
    wall = [bounds[i + 1] - bounds[i] for i in range(n_iters)]
    stall = [wall[i] - busy[i] for i in range(n_iters)]
    io = sum(e.nbytes for e in events if e.category == "io")
    swap = sum(e.nbytes for e in events if e.category == "swap")
    return ScheduleTrace(spec, profile, n_iters, events, starts, end, wall, stall, io, swap)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def io_per_iter_model(spec: ScheduleSpec, M: float) -> float:
    """Average bytes of gradient offload plus parameter upload per iteration."""
    if spec.kind.partitioned:
        return (spec.S + 1) * (1.0 - spec.k) * M / spec.S
    return 2.0 * M


def closed_form_stall_ms(spec: ScheduleSpec, profile: PipelineProfile) -> float | None:
    """Per-iteration GPU idle time for the non-partitioned schedules (None otherwise)."""
    xfer = _transfer_us(int(round(profile.model_bytes)), profile)
    up, bp = _us(profile.cpu_update_ms), _us(profile.bp_ms)
    if spec.kind is ScheduleKind.SequentialOffload:
        return (2 * xfer + up) / US_PER_MS
    if spec.kind is ScheduleKind.LayerwiseOverlap:
        return max(0, 2 * xfer + up - bp) / US_PER_MS
    return None


def min_hide_interval(profile: PipelineProfile, k: float) -> int:
    """Smallest ``S`` whose ``S`` iterations of FP+BP cover the delayed partition's
    CPU update plus both of its transfers.

    Conservative: it charges the whole gradient offload even though most of it
    already overlaps the backward pass.
    """
    if not (0.0 <= k < 1.0):
        raise ValueError("k must be in [0, 1)")
    need = (1.0 - k) * (profile.cpu_update_ms + 2.0 * transfer_ms(profile.model_bytes, profile))
    ratio = need / profile.compute_ms
    return max(1, int(math.ceil(round(ratio, 9))))


def _timeline_diff(trace: ScheduleTrace, limit: int = 12) -> str:
    lines = [f"{e.resource:>9} {e.name:<12} it={e.iteration:<4} [{e.start_us}, {e.end_us})"
             for e in trace.events[:limit]]
    return "\n".join(lines)


def model_vs_sim_check(spec: ScheduleSpec, profile: PipelineProfile, n_iters: int) -> dict:
    """Compare the simulated trace against the closed forms; raise on disagreement."""
    if n_iters < 3 * spec.S:
        raise ValueError(f"need n_iters >= 3*S = {3 * spec.S}")
    trace = simulate(spec, profile, n_iters)
    model_io = io_per_iter_model(spec, profile.model_bytes)
    # only complete cycles are flushed
    if spec.kind.partitioned:
        full_cycles = n_iters // spec.S
        model_io_exact = (n_iters + full_cycles) * (1.0 - spec.k) * profile.model_bytes / n_iters
    else:
        model_io_exact = model_io
    sim_io = trace.io_bytes_per_iter
    io_rel = abs(sim_io - model_io) / model_io
    report = {
        "schedule": spec.kind.value,
        "n_iters": n_iters,
        "sim_io_bytes_per_iter": sim_io,
        "model_io_bytes_per_iter": model_io,
        "model_io_bytes_per_iter_finite": model_io_exact,
        "io_rel_err": io_rel,
        "sim_stall_ms": trace.stall_ms,
        "model_stall_ms": closed_form_stall_ms(spec, profile),
        "ok": True,
    }
    problems = []
    if io_rel > 0.01:
        problems.append(f"I/O per iteration {sim_io:.6g} vs model {model_io:.6g} (rel {io_rel:.3%})")
    cf = report["model_stall_ms"]
    if cf is not None and not all(s == _us(cf) for s in trace.iter_stall_us):
        bad = [s for s in trace.iter_stall_us if s != _us(cf)]
        problems.append(f"stall {bad[0] / US_PER_MS} ms/iter vs closed form {cf} ms")
    if problems:
        report["ok"] = False
        raise ModelMismatchError("; ".join(problems) + "\nfirst events:\n" + _timeline_diff(trace))
    return report
